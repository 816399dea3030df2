//! Particle simulation of the lifted state equation.
//!
//! One step of the scheme is `X_{k+1} = S_1 X_k + G(b_k dt + sigma_k dW_k)`
//! with `dt = dtheta`. Each particle keeps its full history of head values
//! (steps `-m..=K`), and the lifted state at step `k` is the window of
//! `m + 1` consecutive heads ending at step `k`. The mean-field argument is
//! the ensemble mean, updated synchronously after every step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{ControlPath, TimeGrid};
use crate::error::{arg_err, Error, Result};
use crate::model::LiftedCoefficients;
use crate::noise::NoiseBank;
use crate::par;
use crate::segment::{LiftedVector, SegmentGrid};

/// Deterministic initial segment on `[-d, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialSegment {
    /// Head value `x(0)`.
    pub head: Vec<f64>,
    /// Node-major samples at `theta_0..theta_{m-1}`.
    pub segment: Vec<f64>,
}

impl InitialSegment {
    pub fn constant(grid: &SegmentGrid, x: &[f64]) -> Self {
        let mut segment = Vec::with_capacity(grid.m() * grid.n());
        for _ in 0..grid.m() {
            segment.extend_from_slice(x);
        }
        Self {
            head: x.to_vec(),
            segment,
        }
    }

    pub fn lifted(&self, grid: &SegmentGrid) -> Result<LiftedVector> {
        LiftedVector::new(grid, &self.head, &self.segment)
    }
}

/// Simulated particle ensemble.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub grid: SegmentGrid,
    pub time: TimeGrid,
    pub control: ControlPath,
    particles: usize,
    /// Per particle: heads at steps `-m..=K`, `n` values each.
    hist: Vec<f64>,
    /// Ensemble mean of `hist`.
    mean: Vec<f64>,
}

impl Ensemble {
    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.time.steps
    }

    fn stride(&self) -> usize {
        (self.time.steps + self.grid.m() + 1) * self.grid.n()
    }

    /// Flattened lifted state of particle `i` at step `k`.
    pub fn lifted(&self, i: usize, k: usize) -> &[f64] {
        let n = self.grid.n();
        let base = i * self.stride();
        &self.hist[base + k * n..base + (k + self.grid.m() + 1) * n]
    }

    /// Head history of particle `i`, steps `-m..=K`.
    pub fn heads(&self, i: usize) -> &[f64] {
        &self.hist[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Head of particle `i` at step `k`.
    pub fn head(&self, i: usize, k: usize) -> &[f64] {
        let n = self.grid.n();
        let o = i * self.stride() + (k + self.grid.m()) * n;
        &self.hist[o..o + n]
    }

    /// Flattened lifted ensemble mean at step `k`.
    pub fn mean_lifted(&self, k: usize) -> &[f64] {
        let n = self.grid.n();
        &self.mean[k * n..(k + self.grid.m() + 1) * n]
    }

    pub fn mean_head(&self, k: usize) -> &[f64] {
        let n = self.grid.n();
        let o = (k + self.grid.m()) * n;
        &self.mean[o..o + n]
    }

    pub fn lift_state(&self, i: usize, k: usize) -> Result<LiftedVector> {
        if i >= self.particles || k > self.time.steps {
            return Err(arg_err(format!("no state for particle {i} at step {k}")));
        }
        LiftedVector::from_flat(&self.grid, self.lifted(i, k).to_vec())
    }

    /// Mean of head values over steps.
    pub fn mean_path(&self) -> Vec<Vec<f64>> {
        (0..=self.time.steps).map(|k| self.mean_head(k).to_vec()).collect()
    }
}

/// Simulates the controlled mean-field delay equation.
pub fn simulate(
    lc: &LiftedCoefficients,
    xi: &InitialSegment,
    time: &TimeGrid,
    control: &ControlPath,
    noise: &NoiseBank,
) -> Result<Arc<Ensemble>> {
    let grid = lc.grid;
    let d = lc.dims();
    let (n, m, w) = (d.n, grid.m(), d.w);
    if (time.dt - grid.dtheta()).abs() > 1e-12 * grid.dtheta() {
        return Err(arg_err(format!(
            "time step {} must equal the segment spacing {}",
            time.dt,
            grid.dtheta()
        )));
    }
    if control.steps() != time.steps || control.dim() != d.k {
        return Err(arg_err(
            "control path does not match the time grid or control dimension",
        ));
    }
    if noise.steps() != time.steps || noise.w() != w {
        return Err(arg_err("noise bank does not match the time grid or Brownian dimension"));
    }
    if xi.head.len() != n || xi.segment.len() != m * n {
        return Err(Error::Dimension("initial segment does not match the grid".into()));
    }
    let np = noise.particles();
    let k_all = time.steps;
    let stride = (k_all + m + 1) * n;
    let mut hist = vec![0.0; np * stride];
    let mut mean = vec![0.0; stride];
    for h in hist.chunks_mut(stride).chain(std::iter::once(&mut mean[..])) {
        h[..m * n].copy_from_slice(&xi.segment);
        h[m * n..(m + 1) * n].copy_from_slice(&xi.head);
    }
    for k in 0..k_all {
        let t = time.t(k);
        let u = control.at(k);
        let mut mp = lc.point();
        mp.set_mean(lc, &mean[k * n..(k + m + 1) * n]);
        let init = || (mp.clone(), vec![0.0; n], vec![0.0; n * w]);
        par::for_each_block_with(&mut hist, stride, init, |(p, b, s), i, h| {
            p.set_state(lc, &h[k * n..(k + m + 1) * n]);
            lc.eval_drift_diffusion(t, p, u, b, s)?;
            let dw = noise.dw(i, k);
            let (prev, next) = h.split_at_mut((k + m + 1) * n);
            let x = &prev[(k + m) * n..];
            for a in 0..n {
                let mut v = x[a] + b[a] * time.dt;
                for j in 0..w {
                    v += s[a * w + j] * dw[j];
                }
                if !v.is_finite() {
                    return Err(Error::Divergence { step: k + 1 });
                }
                next[a] = v;
            }
            Ok(())
        })?;
        let o = (k + m + 1) * n;
        let mh = par::mean_vec(np, n, |i, out| {
            out.copy_from_slice(&hist[i * stride + o..i * stride + o + n])
        });
        mean[o..o + n].copy_from_slice(&mh);
    }
    Ok(Arc::new(Ensemble {
        grid,
        time: *time,
        control: control.clone(),
        particles: np,
        hist,
        mean,
    }))
}

/// Monte Carlo estimate with its standard error and per-particle samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl Estimate {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let (mean, stderr) = crate::stats::mean_stderr(&samples);
        Self { mean, stderr, samples }
    }
}

/// Cost functional of a simulated ensemble, left-endpoint in time.
pub fn evaluate_cost(lc: &LiftedCoefficients, ens: &Ensemble) -> Estimate {
    let np = ens.particles();
    let kk = ens.steps();
    let means: Vec<_> = (0..=kk)
        .map(|k| {
            let mut p = lc.point();
            p.set_mean(lc, ens.mean_lifted(k));
            p
        })
        .collect();
    let samples: Vec<f64> = par_map(np, |i| {
        let mut total = 0.0;
        for k in 0..kk {
            let mut p = means[k].clone();
            p.set_state(lc, ens.lifted(i, k));
            total += lc.running_cost(ens.time.t(k), &p, ens.control.at(k)) * ens.time.dt;
        }
        let mut p = means[kk].clone();
        p.set_state(lc, ens.lifted(i, kk));
        total + lc.terminal_cost(&p)
    });
    Estimate::from_samples(samples)
}

/// Per-particle map collected in particle order.
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(np: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..np).into_par_iter().map(f).collect()
}
