//! Reproducible Brownian increments.
//!
//! Every particle owns an independent ChaCha8 stream selected by its index,
//! so the increments of particle `i` do not depend on the ensemble size or
//! on the number of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::control::TimeGrid;
use crate::error::{arg_err, Result};

/// Brownian increments `dW[i][k][j]` for a range of particles.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    seed: u64,
    first: usize,
    particles: usize,
    steps: usize,
    w: usize,
    dt: f64,
    data: Vec<f64>,
}

impl NoiseBank {
    pub fn new(seed: u64, particles: usize, grid: &TimeGrid, w: usize) -> Result<Self> {
        Self::range(seed, 0..particles, grid, w)
    }

    /// Increments for particles `range`, identical to the corresponding rows
    /// of any larger bank with the same seed.
    pub fn range(seed: u64, range: std::ops::Range<usize>, grid: &TimeGrid, w: usize) -> Result<Self> {
        if range.is_empty() {
            return Err(arg_err("noise bank needs at least one particle"));
        }
        let (steps, dt) = (grid.steps, grid.dt);
        let block = steps * w;
        let mut data = vec![0.0; range.len() * block];
        let sq = dt.sqrt();
        let first = range.start;
        data.par_chunks_mut(block.max(1)).enumerate().for_each(|(j, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((first + j) as u64);
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sq * z;
            }
        });
        Ok(Self {
            seed,
            first,
            particles: range.len(),
            steps,
            w,
            dt,
            data,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Increment vector of particle `i` (relative to the bank) at step `k`.
    pub fn dw(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * self.steps + k) * self.w;
        &self.data[o..o + self.w]
    }

    /// All increments of particle `i`, step-major.
    pub fn particle(&self, i: usize) -> &[f64] {
        let b = self.steps * self.w;
        &self.data[i * b..(i + 1) * b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_from_ensemble_size() {
        let g = TimeGrid::new(1.0, 0.125).unwrap();
        let small = NoiseBank::new(9, 5, &g, 2).unwrap();
        let big = NoiseBank::new(9, 50, &g, 2).unwrap();
        for i in 0..5 {
            assert_eq!(small.particle(i), big.particle(i));
        }
        let tail = NoiseBank::range(9, 3..7, &g, 2).unwrap();
        assert_eq!(tail.particle(0), big.particle(3));
    }

    #[test]
    fn seeds_differ_and_variance_is_dt() {
        let g = TimeGrid::new(1.0, 0.25).unwrap();
        let a = NoiseBank::new(1, 20_000, &g, 1).unwrap();
        let b = NoiseBank::new(2, 1, &g, 1).unwrap();
        assert_ne!(a.particle(0), b.particle(0));
        let n = (20_000 * 4) as f64;
        let var: f64 = a.data.iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var - 0.25).abs() < 0.01, "{var}");
    }
}
