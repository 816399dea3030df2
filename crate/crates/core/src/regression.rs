//! Least-squares estimation of conditional expectations given the lifted
//! state at one time step.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Ensemble;
use crate::model::LiftedCoefficients;
use crate::par;

/// Regression features of the lifted state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Constant and every coordinate of the lifted state.
    #[default]
    Linear,
    /// Constant, head and the distinct nonzero kernel pairings.
    Pairings,
}

/// Fitted projection for one time step.
#[derive(Clone, Debug)]
pub struct StepFit {
    step: usize,
    /// Raw features per particle, row-major `N x p`.
    features: Vec<f64>,
    p: usize,
    mu: Vec<f64>,
    sd: Vec<f64>,
    keep: Vec<usize>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

fn features(lc: &LiftedCoefficients, basis: Basis, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    match basis {
        Basis::Linear => out.extend_from_slice(x),
        Basis::Pairings => {
            let g = &lc.grid;
            let n = g.n();
            out.extend_from_slice(&x[g.head_offset()..]);
            let mut seen: Vec<&crate::segment::DelayKernel> = Vec::new();
            let mut buf = vec![0.0; n];
            for k in lc.kernels.state.iter() {
                if k.is_zero() || seen.iter().any(|s| s.values() == k.values()) {
                    continue;
                }
                seen.push(k);
                k.pair_into(g, &x[..g.head_offset()], &mut buf);
                out.extend_from_slice(&buf);
            }
        }
    }
}

impl StepFit {
    /// Builds and factorizes the design of step `k`.
    pub fn new(lc: &LiftedCoefficients, ens: &Ensemble, basis: Basis, k: usize) -> Result<Self> {
        let np = ens.particles();
        let mut f0 = Vec::new();
        features(lc, basis, ens.lifted(0, k), &mut f0);
        let p = f0.len();
        let mut feats = vec![0.0; np * p];
        par::for_each_block_with(&mut feats, p, Vec::new, |buf, i, row| {
            features(lc, basis, ens.lifted(i, k), buf);
            row.copy_from_slice(buf);
            Ok(())
        })?;
        let mu = par::mean_vec(np, p, |i, out| out.copy_from_slice(&feats[i * p..(i + 1) * p]));
        let var = par::mean_vec(np, p, |i, out| {
            for a in 0..p {
                let d = feats[i * p + a] - mu[a];
                out[a] = d * d;
            }
        });
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let keep: Vec<usize> = (0..p).filter(|&a| sd[a] > 1e-10 * mu[a].abs().max(1.0)).collect();
        let q = keep.len();
        let chol = if q == 0 {
            None
        } else {
            let gram = par::mean_vec(np, q * q, |i, out| {
                let row = &feats[i * p..(i + 1) * p];
                for (a, &ka) in keep.iter().enumerate() {
                    let za = (row[ka] - mu[ka]) / sd[ka];
                    for (b, &kb) in keep.iter().enumerate().skip(a) {
                        out[a * q + b] = za * (row[kb] - mu[kb]) / sd[kb];
                    }
                }
            });
            let mut g = DMatrix::zeros(q, q);
            for a in 0..q {
                for b in a..q {
                    g[(a, b)] = gram[a * q + b];
                    g[(b, a)] = gram[a * q + b];
                }
            }
            let ch = nalgebra::Cholesky::new(g).ok_or(Error::RankDeficient { step: k })?;
            let l = ch.l_dirty();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
            for a in 0..q {
                let d = l[(a, a)] * l[(a, a)];
                lo = lo.min(d);
                hi = hi.max(d);
            }
            if !(lo > 1e-12 * hi) {
                return Err(Error::RankDeficient { step: k });
            }
            Some(ch)
        };
        Ok(Self {
            step: k,
            features: feats,
            p,
            mu,
            sd,
            keep,
            chol,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Number of active (non-constant) features.
    pub fn active(&self) -> usize {
        self.keep.len()
    }

    /// Fitted values of `cols` target columns given row-major `N x cols`.
    pub fn project(&self, targets: &[f64], cols: usize) -> Vec<f64> {
        let np = targets.len() / cols;
        let (p, q) = (self.p, self.keep.len());
        let ybar = par::mean_vec(np, cols, |i, out| {
            out.copy_from_slice(&targets[i * cols..(i + 1) * cols])
        });
        let mut fitted = vec![0.0; np * cols];
        for row in fitted.chunks_mut(cols) {
            row.copy_from_slice(&ybar);
        }
        let Some(ch) = &self.chol else {
            return fitted;
        };
        let zty = par::mean_vec(np, q * cols, |i, out| {
            let row = &self.features[i * p..(i + 1) * p];
            let y = &targets[i * cols..(i + 1) * cols];
            for (a, &ka) in self.keep.iter().enumerate() {
                let za = (row[ka] - self.mu[ka]) / self.sd[ka];
                for c in 0..cols {
                    out[a * cols + c] = za * (y[c] - ybar[c]);
                }
            }
        });
        let mut beta = DMatrix::from_row_slice(q, cols, &zty);
        ch.solve_mut(&mut beta);
        let z_of = |row: &[f64], a: usize| {
            let ka = self.keep[a];
            (row[ka] - self.mu[ka]) / self.sd[ka]
        };
        let _ = par::for_each_block(&mut fitted, cols, |i, out| {
            let row = &self.features[i * p..(i + 1) * p];
            for a in 0..q {
                let z = z_of(row, a);
                for (c, o) in out.iter_mut().enumerate() {
                    *o += z * beta[(a, c)];
                }
            }
            Ok(())
        });
        fitted
    }

    /// Single-target convenience wrapper.
    pub fn project_one(&self, y: &[f64]) -> Vec<f64> {
        self.project(y, 1)
    }
}

/// Conditional expectation of a vector target at one step as a one-off.
pub fn conditional_expectation(
    lc: &LiftedCoefficients,
    ens: &Ensemble,
    basis: Basis,
    k: usize,
    targets: &[f64],
    cols: usize,
) -> Result<Vec<f64>> {
    Ok(StepFit::new(lc, ens, basis, k)?.project(targets, cols))
}
