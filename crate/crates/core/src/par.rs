//! Deterministic parallel reductions over particles.
//!
//! Particles are grouped into fixed-size chunks; per-chunk partial sums are
//! combined in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const CHUNK: usize = 512;

/// Ensemble mean of a vector-valued per-particle quantity.
pub fn mean_vec<F>(n_particles: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut s = sum_vec(n_particles, len, f);
    let inv = 1.0 / n_particles as f64;
    for v in &mut s {
        *v *= inv;
    }
    s
}

/// Ensemble sum of a vector-valued per-particle quantity.
pub fn sum_vec<F>(n_particles: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_chunks = n_particles.div_ceil(CHUNK);
    let partial: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            let mut tmp = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_particles) {
                tmp.fill(0.0);
                f(i, &mut tmp);
                for (a, t) in acc.iter_mut().zip(&tmp) {
                    *a += t;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for p in partial {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Ensemble sum where `f` adds particle `i`'s contribution into the running
/// chunk accumulator itself.
pub fn accumulate<F>(n_particles: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_chunks = n_particles.div_ceil(CHUNK);
    let partial: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_particles) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for p in partial {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Runs `f` on every particle's mutable block, in parallel, stopping at the
/// first error in particle order.
pub fn for_each_block<F>(data: &mut [f64], block: usize, f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    for_each_block_with(data, block, || (), |_, i, b| f(i, b))
}

/// Like [`for_each_block`], with scratch state created once per chunk.
pub fn for_each_block_with<S, I, F>(data: &mut [f64], block: usize, init: I, f: F) -> Result<()>
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, usize, &mut [f64]) -> Result<()> + Sync,
{
    let errs: Vec<Option<(usize, Error)>> = data
        .par_chunks_mut(block * CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut s = init();
            for (j, b) in chunk.chunks_mut(block).enumerate() {
                let i = c * CHUNK + j;
                if let Err(e) = f(&mut s, i, b) {
                    return Some((i, e));
                }
            }
            None
        })
        .collect();
    match errs.into_iter().flatten().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

/// Builds a pool with the requested number of threads and runs `f` in it.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(k) if k > 0 => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}
