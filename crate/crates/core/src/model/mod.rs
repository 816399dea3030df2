//! Coefficient models and their lifted counterparts.
//!
//! A model supplies the pointwise coefficients `b, sigma, l, m` as
//! functions of `(t, x, x~, y, y~, u)` where `x~ = int f(theta) x(theta)`
//! and `y~` is the same pairing of the ensemble-mean segment. The kernels
//! are kept outside the model in a [`KernelSet`], so one model can be
//! combined with different delay structures.

pub mod builtin;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::segment::{DelayKernel, SegmentGrid};

/// Argument slot of a coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    X,
    Xt,
    Y,
    Yt,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::X, Slot::Xt, Slot::Y, Slot::Yt];
    pub const STATE: [Slot; 2] = [Slot::X, Slot::Xt];
}

/// Arguments of a pointwise coefficient.
#[derive(Clone, Copy, Debug)]
pub struct Args<'a> {
    pub x: &'a [f64],
    pub xt: &'a [f64],
    pub y: &'a [f64],
    pub yt: &'a [f64],
}

impl<'a> Args<'a> {
    pub fn slot(&self, s: Slot) -> &'a [f64] {
        match s {
            Slot::X => self.x,
            Slot::Xt => self.xt,
            Slot::Y => self.y,
            Slot::Yt => self.yt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// State dimension.
    pub n: usize,
    /// Brownian dimension.
    pub w: usize,
    /// Control dimension.
    pub k: usize,
}

/// Pointwise coefficients together with their derivatives.
///
/// Layouts: drift Jacobian `out[i*n + a]`; diffusion `out[i*w + j]` and its
/// Jacobian `out[(i*w + j)*n + a]`; second derivatives append one more `n`
/// axis. Second derivatives are only requested for the state slots.
pub trait Coefficients: Send + Sync {
    fn name(&self) -> &str;
    fn dims(&self) -> ModelDims;

    fn drift(&self, t: f64, a: &Args, u: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, a: &Args, u: &[f64], out: &mut [f64]);
    fn running_cost(&self, t: f64, a: &Args, u: &[f64]) -> f64;
    fn terminal_cost(&self, a: &Args) -> f64;

    fn drift_d1(&self, t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]);
    fn diffusion_d1(&self, t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]);
    fn running_cost_d1(&self, t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]);
    fn terminal_cost_d1(&self, a: &Args, s: Slot, out: &mut [f64]);

    fn drift_d2(&self, t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]);
    fn diffusion_d2(&self, t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]);
    fn running_cost_d2(&self, t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]);
    fn terminal_cost_d2(&self, a: &Args, s1: Slot, s2: Slot, out: &mut [f64]);

    /// True when every derivative in the state slots is independent of the
    /// state and of the ensemble mean, so the second-order adjoint is
    /// deterministic.
    fn deterministic_derivatives(&self) -> bool {
        false
    }
}

/// Which coefficient a kernel pairing belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coef {
    Drift = 0,
    Diffusion = 1,
    Running = 2,
    Terminal = 3,
}

/// The eight delay kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    /// Kernels acting on the particle segment, indexed by [`Coef`].
    pub state: [DelayKernel; 4],
    /// Kernels acting on the mean segment, indexed by [`Coef`].
    pub mean: [DelayKernel; 4],
}

impl KernelSet {
    pub fn zero(grid: &SegmentGrid) -> Self {
        let z = DelayKernel::zero(grid);
        Self {
            state: [z.clone(), z.clone(), z.clone(), z.clone()],
            mean: [z.clone(), z.clone(), z.clone(), z],
        }
    }

    pub fn state(&self, c: Coef) -> &DelayKernel {
        &self.state[c as usize]
    }

    pub fn mean(&self, c: Coef) -> &DelayKernel {
        &self.mean[c as usize]
    }
}

/// Kernel pairings of a particle state and of the ensemble mean.
#[derive(Clone, Debug)]
pub struct EvalPoint {
    n: usize,
    x: Vec<f64>,
    xt: [Vec<f64>; 4],
    y: Vec<f64>,
    yt: [Vec<f64>; 4],
}

impl EvalPoint {
    pub fn new(n: usize) -> Self {
        let z = vec![0.0; n];
        Self {
            n,
            x: z.clone(),
            xt: [z.clone(), z.clone(), z.clone(), z.clone()],
            y: z.clone(),
            yt: [z.clone(), z.clone(), z.clone(), z],
        }
    }

    /// Loads a particle state given as a flattened lifted vector.
    pub fn set_state(&mut self, lc: &LiftedCoefficients, state: &[f64]) {
        let g = &lc.grid;
        let o = g.head_offset();
        self.x.copy_from_slice(&state[o..o + self.n]);
        for c in 0..4 {
            lc.kernels.state[c].pair_into(g, &state[..o], &mut self.xt[c]);
        }
    }

    /// Loads the ensemble-mean state given as a flattened lifted vector.
    pub fn set_mean(&mut self, lc: &LiftedCoefficients, mean: &[f64]) {
        let g = &lc.grid;
        let o = g.head_offset();
        self.y.copy_from_slice(&mean[o..o + self.n]);
        for c in 0..4 {
            lc.kernels.mean[c].pair_into(g, &mean[..o], &mut self.yt[c]);
        }
    }

    pub fn args(&self, c: Coef) -> Args<'_> {
        Args {
            x: &self.x,
            xt: &self.xt[c as usize],
            y: &self.y,
            yt: &self.yt[c as usize],
        }
    }
}

/// Jacobians of drift and diffusion in all four slots.
#[derive(Clone, Debug)]
pub struct Jacobians {
    pub b: [Vec<f64>; 4],
    pub s: [Vec<f64>; 4],
}

impl Jacobians {
    pub fn new(d: ModelDims) -> Self {
        let b = vec![0.0; d.n * d.n];
        let s = vec![0.0; d.n * d.w * d.n];
        Self {
            b: [b.clone(), b.clone(), b.clone(), b],
            s: [s.clone(), s.clone(), s.clone(), s],
        }
    }

    pub fn b(&self, s: Slot) -> &[f64] {
        &self.b[s as usize]
    }

    pub fn s(&self, s: Slot) -> &[f64] {
        &self.s[s as usize]
    }
}

/// A model bound to a segment grid and a kernel set.
#[derive(Clone)]
pub struct LiftedCoefficients {
    pub model: Arc<dyn Coefficients>,
    pub kernels: KernelSet,
    pub grid: SegmentGrid,
}

impl std::fmt::Debug for LiftedCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiftedCoefficients")
            .field("model", &self.model.name())
            .field("grid", &self.grid)
            .finish()
    }
}

impl LiftedCoefficients {
    pub fn new(model: Arc<dyn Coefficients>, kernels: KernelSet, grid: SegmentGrid) -> Result<Self> {
        let d = model.dims();
        if d.n != grid.n() {
            return Err(Error::Dimension(format!(
                "model state dimension {} differs from grid dimension {}",
                d.n,
                grid.n()
            )));
        }
        for k in kernels.state.iter().chain(kernels.mean.iter()) {
            if k.values().len() != grid.m() {
                return Err(Error::Dimension("kernel length differs from grid".into()));
            }
        }
        Ok(Self { model, kernels, grid })
    }

    pub fn dims(&self) -> ModelDims {
        self.model.dims()
    }

    pub fn point(&self) -> EvalPoint {
        EvalPoint::new(self.grid.n())
    }

    /// Drift and diffusion values; reports non-finite output.
    pub fn eval_drift_diffusion(&self, t: f64, p: &EvalPoint, u: &[f64], b: &mut [f64], s: &mut [f64]) -> Result<()> {
        self.model.drift(t, &p.args(Coef::Drift), u, b);
        self.model.diffusion(t, &p.args(Coef::Diffusion), u, s);
        if !b.iter().all(|v| v.is_finite()) {
            return Err(Error::Evaluation {
                what: "drift",
                t,
                u: u.to_vec(),
            });
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::Evaluation {
                what: "diffusion",
                t,
                u: u.to_vec(),
            });
        }
        Ok(())
    }

    pub fn jacobians(&self, t: f64, p: &EvalPoint, u: &[f64], out: &mut Jacobians) {
        let ab = p.args(Coef::Drift);
        let asg = p.args(Coef::Diffusion);
        for s in Slot::ALL {
            self.model.drift_d1(t, &ab, u, s, &mut out.b[s as usize]);
            self.model.diffusion_d1(t, &asg, u, s, &mut out.s[s as usize]);
        }
    }

    pub fn running_cost(&self, t: f64, p: &EvalPoint, u: &[f64]) -> f64 {
        self.model.running_cost(t, &p.args(Coef::Running), u)
    }

    pub fn terminal_cost(&self, p: &EvalPoint) -> f64 {
        self.model.terminal_cost(&p.args(Coef::Terminal))
    }

    /// Riesz representer of the derivative of a scalar cost in a particle
    /// slot (`mean = false`) or in the mean slot (`mean = true`).
    pub fn cost_gradient(&self, t: f64, p: &EvalPoint, u: &[f64], c: Coef, mean: bool, out: &mut [f64]) {
        let n = self.grid.n();
        let o = self.grid.head_offset();
        let (sh, sk) = if mean { (Slot::Y, Slot::Yt) } else { (Slot::X, Slot::Xt) };
        let a = p.args(c);
        let mut dh = vec![0.0; n];
        let mut dk = vec![0.0; n];
        match c {
            Coef::Running => {
                self.model.running_cost_d1(t, &a, u, sh, &mut dh);
                self.model.running_cost_d1(t, &a, u, sk, &mut dk);
            }
            Coef::Terminal => {
                self.model.terminal_cost_d1(&a, sh, &mut dh);
                self.model.terminal_cost_d1(&a, sk, &mut dk);
            }
            _ => unreachable!("cost gradient requested for a dynamics coefficient"),
        }
        out.fill(0.0);
        out[o..].copy_from_slice(&dh);
        let kern = if mean {
            self.kernels.mean(c)
        } else {
            self.kernels.state(c)
        };
        kern.add_representer(&self.grid, &dk, out);
    }

    /// Row-major `n x dim` matrix of `Z -> d_head z + d_tilde I(z)` in raw
    /// coordinates, where `d_head`, `d_tilde` are `rows x n` blocks.
    pub fn linear_map_raw(&self, rows: usize, d_head: &[f64], d_tilde: &[f64], kern: &DelayKernel) -> Vec<f64> {
        let n = self.grid.n();
        let m = self.grid.m();
        let dim = self.grid.dim();
        let dt = self.grid.dtheta();
        let mut out = vec![0.0; rows * dim];
        for r in 0..rows {
            for a in 0..n {
                out[r * dim + m * n + a] = d_head[r * n + a];
                let c = d_tilde[r * n + a];
                if c != 0.0 {
                    for (j, f) in kern.values().iter().enumerate() {
                        out[r * dim + j * n + a] = c * f * dt;
                    }
                }
            }
        }
        out
    }

    /// Whitened `dim x dim` matrix of the symmetric bilinear form
    /// `(z, I z)^T H (z, I z)` for a `2n x 2n` block matrix `H`.
    pub fn bilinear_whitened(&self, h: &[[&[f64]; 2]; 2], kern: &DelayKernel) -> DMatrix<f64> {
        let n = self.grid.n();
        let m = self.grid.m();
        let dim = self.grid.dim();
        let sq = self.grid.dtheta().sqrt();
        // E maps whitened coordinates to (z, I z)
        let mut e = DMatrix::zeros(2 * n, dim);
        for a in 0..n {
            e[(a, m * n + a)] = 1.0;
            for (j, f) in kern.values().iter().enumerate() {
                e[(n + a, j * n + a)] = sq * f;
            }
        }
        let mut hm = DMatrix::zeros(2 * n, 2 * n);
        for (bi, row) in h.iter().enumerate() {
            for (bj, blk) in row.iter().enumerate() {
                for a in 0..n {
                    for b in 0..n {
                        hm[(bi * n + a, bj * n + b)] = blk[a * n + b];
                    }
                }
            }
        }
        let mut out = e.transpose() * hm * e;
        symmetrize(&mut out);
        out
    }

    /// Whitened matrix of the second derivative of the running cost.
    pub fn running_cost_hessian_whitened(&self, t: f64, p: &EvalPoint, u: &[f64]) -> DMatrix<f64> {
        let n = self.grid.n();
        let a = p.args(Coef::Running);
        let mut blocks = vec![vec![0.0; n * n]; 4];
        for (idx, (s1, s2)) in state_pairs().into_iter().enumerate() {
            self.model.running_cost_d2(t, &a, u, s1, s2, &mut blocks[idx]);
        }
        self.bilinear_whitened(
            &[[&blocks[0], &blocks[1]], [&blocks[2], &blocks[3]]],
            self.kernels.state(Coef::Running),
        )
    }

    /// Whitened matrix of the second derivative of the terminal cost.
    pub fn terminal_cost_hessian_whitened(&self, p: &EvalPoint) -> DMatrix<f64> {
        let n = self.grid.n();
        let a = p.args(Coef::Terminal);
        let mut blocks = vec![vec![0.0; n * n]; 4];
        for (idx, (s1, s2)) in state_pairs().into_iter().enumerate() {
            self.model.terminal_cost_d2(&a, s1, s2, &mut blocks[idx]);
        }
        self.bilinear_whitened(
            &[[&blocks[0], &blocks[1]], [&blocks[2], &blocks[3]]],
            self.kernels.state(Coef::Terminal),
        )
    }

    /// `sum_i v_i * d2 b_i` as a whitened matrix.
    pub fn drift_hessian_whitened(&self, t: f64, p: &EvalPoint, u: &[f64], v: &[f64]) -> DMatrix<f64> {
        let n = self.grid.n();
        let a = p.args(Coef::Drift);
        let mut tmp = vec![0.0; n * n * n];
        let mut blocks = vec![vec![0.0; n * n]; 4];
        for (idx, (s1, s2)) in state_pairs().into_iter().enumerate() {
            self.model.drift_d2(t, &a, u, s1, s2, &mut tmp);
            contract_first(&tmp, v, n * n, &mut blocks[idx]);
        }
        self.bilinear_whitened(
            &[[&blocks[0], &blocks[1]], [&blocks[2], &blocks[3]]],
            self.kernels.state(Coef::Drift),
        )
    }

    /// `sum_{i,j} v_{ij} * d2 sigma_{ij}` as a whitened matrix (`v` is `n x w`).
    pub fn diffusion_hessian_whitened(&self, t: f64, p: &EvalPoint, u: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = self.dims();
        let n = d.n;
        let a = p.args(Coef::Diffusion);
        let mut tmp = vec![0.0; n * d.w * n * n];
        let mut blocks = vec![vec![0.0; n * n]; 4];
        for (idx, (s1, s2)) in state_pairs().into_iter().enumerate() {
            self.model.diffusion_d2(t, &a, u, s1, s2, &mut tmp);
            contract_first(&tmp, v, n * n, &mut blocks[idx]);
        }
        self.bilinear_whitened(
            &[[&blocks[0], &blocks[1]], [&blocks[2], &blocks[3]]],
            self.kernels.state(Coef::Diffusion),
        )
    }

    /// Second-order term `D^2 L[y, y]` of the running (`Coef::Running`) or
    /// terminal (`Coef::Terminal`) cost at a flattened lifted direction `y`.
    pub fn cost_quadratic(&self, t: f64, p: &EvalPoint, u: &[f64], c: Coef, y: &[f64]) -> f64 {
        let g = &self.grid;
        let n = g.n();
        let o = g.head_offset();
        let a = p.args(c);
        let mut yt = vec![0.0; n];
        self.kernels.state(c).pair_into(g, &y[..o], &mut yt);
        let yh = &y[o..];
        let mut blk = vec![0.0; n * n];
        let mut s = 0.0;
        for (s1, s2) in state_pairs() {
            match c {
                Coef::Running => self.model.running_cost_d2(t, &a, u, s1, s2, &mut blk),
                Coef::Terminal => self.model.terminal_cost_d2(&a, s1, s2, &mut blk),
                _ => unreachable!("cost quadratic form requested for a dynamics coefficient"),
            }
            let v1 = if s1 == Slot::X { yh } else { &yt[..] };
            let v2 = if s2 == Slot::X { yh } else { &yt[..] };
            for i in 0..n {
                for j in 0..n {
                    s += blk[i * n + j] * v1[i] * v2[j];
                }
            }
        }
        s
    }

    /// Whitened `dim x dim` matrix of `Z -> G(d_head z + d_tilde I(z))`.
    pub fn lifted_jacobian_whitened(&self, d_head: &[f64], d_tilde: &[f64], kern: &DelayKernel) -> DMatrix<f64> {
        let n = self.grid.n();
        let m = self.grid.m();
        let dim = self.grid.dim();
        let sq = self.grid.dtheta().sqrt();
        let mut out = DMatrix::zeros(dim, dim);
        for r in 0..n {
            for a in 0..n {
                out[(m * n + r, m * n + a)] = d_head[r * n + a];
                let c = d_tilde[r * n + a];
                if c != 0.0 {
                    for (j, f) in kern.values().iter().enumerate() {
                        out[(m * n + r, j * n + a)] = c * f * sq;
                    }
                }
            }
        }
        out
    }
}

/// Extracts column `j` of a diffusion Jacobian laid out as `(i*w + j)*n + a`.
pub fn diffusion_column(jac: &[f64], n: usize, w: usize, j: usize, out: &mut [f64]) {
    for i in 0..n {
        for a in 0..n {
            out[i * n + a] = jac[(i * w + j) * n + a];
        }
    }
}

fn state_pairs() -> [(Slot, Slot); 4] {
    [
        (Slot::X, Slot::X),
        (Slot::X, Slot::Xt),
        (Slot::Xt, Slot::X),
        (Slot::Xt, Slot::Xt),
    ]
}

fn contract_first(t: &[f64], v: &[f64], block: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (i, vi) in v.iter().enumerate() {
        if *vi != 0.0 {
            for (o, x) in out.iter_mut().zip(&t[i * block..(i + 1) * block]) {
                *o += vi * x;
            }
        }
    }
}

pub(crate) fn symmetrize(a: &mut DMatrix<f64>) {
    let d = a.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
}

/// Outcome of a finite-difference derivative check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative discrepancy used by the derivative check.
pub fn rel_discrepancy(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / 1.0_f64.max(an.abs()).max(fd.abs())
}

/// Compares analytic derivatives with central differences at random points.
pub fn check_derivatives(
    model: &dyn Coefficients,
    controls: &[Vec<f64>],
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<DerivativeReport> {
    const TOL: f64 = 1e-6;
    let d = model.dims();
    if controls.is_empty() {
        return Err(arg_err("derivative check needs at least one control value"));
    }
    let (n, w) = (d.n, d.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0_f64, String::new());
    let mut note = |e: f64, what: String| {
        if e > worst.0 || !e.is_finite() {
            worst = (if e.is_finite() { e } else { f64::INFINITY }, what);
        }
    };
    for sample in 0..samples {
        let u = &controls[sample % controls.len()];
        let t = rng.gen_range(0.0..horizon.max(1e-9));
        let mut vals: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let h = 1e-4;
        for s in Slot::ALL {
            // first derivatives
            let mut jb = vec![0.0; n * n];
            let mut js = vec![0.0; n * w * n];
            let mut jl = vec![0.0; n];
            let mut jm = vec![0.0; n];
            {
                let a = mk_args(&vals);
                model.drift_d1(t, &a, u, s, &mut jb);
                model.diffusion_d1(t, &a, u, s, &mut js);
                model.running_cost_d1(t, &a, u, s, &mut jl);
                model.terminal_cost_d1(&a, s, &mut jm);
            }
            for k in 0..n {
                let orig = vals[s as usize][k];
                let eval = |vals: &Vec<Vec<f64>>| {
                    let a = mk_args(vals);
                    let mut b = vec![0.0; n];
                    let mut sg = vec![0.0; n * w];
                    model.drift(t, &a, u, &mut b);
                    model.diffusion(t, &a, u, &mut sg);
                    (b, sg, model.running_cost(t, &a, u), model.terminal_cost(&a))
                };
                vals[s as usize][k] = orig + h;
                let p = eval(&vals);
                vals[s as usize][k] = orig - h;
                let q = eval(&vals);
                vals[s as usize][k] = orig;
                for i in 0..n {
                    let fd = (p.0[i] - q.0[i]) / (2.0 * h);
                    note(rel_discrepancy(fd, jb[i * n + k]), format!("drift d{s:?}[{i},{k}]"));
                }
                for ij in 0..n * w {
                    let fd = (p.1[ij] - q.1[ij]) / (2.0 * h);
                    note(
                        rel_discrepancy(fd, js[ij * n + k]),
                        format!("diffusion d{s:?}[{ij},{k}]"),
                    );
                }
                let fd = (p.2 - q.2) / (2.0 * h);
                note(rel_discrepancy(fd, jl[k]), format!("running cost d{s:?}[{k}]"));
                let fd = (p.3 - q.3) / (2.0 * h);
                note(rel_discrepancy(fd, jm[k]), format!("terminal cost d{s:?}[{k}]"));
            }
        }
        for s1 in Slot::STATE {
            for s2 in Slot::STATE {
                let mut hb = vec![0.0; n * n * n];
                let mut hs = vec![0.0; n * w * n * n];
                let mut hl = vec![0.0; n * n];
                let mut hm = vec![0.0; n * n];
                {
                    let a = mk_args(&vals);
                    model.drift_d2(t, &a, u, s1, s2, &mut hb);
                    model.diffusion_d2(t, &a, u, s1, s2, &mut hs);
                    model.running_cost_d2(t, &a, u, s1, s2, &mut hl);
                    model.terminal_cost_d2(&a, s1, s2, &mut hm);
                }
                for l in 0..n {
                    let orig = vals[s2 as usize][l];
                    let eval = |vals: &Vec<Vec<f64>>| {
                        let a = mk_args(vals);
                        let mut b = vec![0.0; n * n];
                        let mut sg = vec![0.0; n * w * n];
                        let mut lc = vec![0.0; n];
                        let mut mc = vec![0.0; n];
                        model.drift_d1(t, &a, u, s1, &mut b);
                        model.diffusion_d1(t, &a, u, s1, &mut sg);
                        model.running_cost_d1(t, &a, u, s1, &mut lc);
                        model.terminal_cost_d1(&a, s1, &mut mc);
                        (b, sg, lc, mc)
                    };
                    vals[s2 as usize][l] = orig + h;
                    let p = eval(&vals);
                    vals[s2 as usize][l] = orig - h;
                    let q = eval(&vals);
                    vals[s2 as usize][l] = orig;
                    for ik in 0..n * n {
                        let fd = (p.0[ik] - q.0[ik]) / (2.0 * h);
                        note(
                            rel_discrepancy(fd, hb[ik * n + l]),
                            format!("drift d{s1:?}d{s2:?}[{ik},{l}]"),
                        );
                    }
                    for ik in 0..n * w * n {
                        let fd = (p.1[ik] - q.1[ik]) / (2.0 * h);
                        note(
                            rel_discrepancy(fd, hs[ik * n + l]),
                            format!("diffusion d{s1:?}d{s2:?}[{ik},{l}]"),
                        );
                    }
                    for k in 0..n {
                        let fd = (p.2[k] - q.2[k]) / (2.0 * h);
                        note(
                            rel_discrepancy(fd, hl[k * n + l]),
                            format!("running cost d{s1:?}d{s2:?}[{k},{l}]"),
                        );
                        let fd = (p.3[k] - q.3[k]) / (2.0 * h);
                        note(
                            rel_discrepancy(fd, hm[k * n + l]),
                            format!("terminal cost d{s1:?}d{s2:?}[{k},{l}]"),
                        );
                    }
                }
            }
        }
    }
    Ok(DerivativeReport {
        max_rel_error: worst.0,
        worst: worst.1,
        tolerance: TOL,
        pass: worst.0 <= TOL,
    })
}

fn mk_args(v: &[Vec<f64>]) -> Args<'_> {
    Args {
        x: &v[0],
        xt: &v[1],
        y: &v[2],
        yt: &v[3],
    }
}
