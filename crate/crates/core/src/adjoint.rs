//! First-order adjoint by backward regression, second-order adjoint for
//! deterministic derivatives, and the operator-valued dual family.
//!
//! The backward scheme is the exact adjoint of the forward scheme: with
//! `c_k = E_k[p_{k+1}]` and `q^j_k = E_k[p_{k+1} dW^j_k] / dt`,
//!
//! `p_k = S_1^* c_k + dt (B_X^* c_k + sum_j Sigma_X^{j*} q^j_k - L_X)
//!        + dt (E[B_Y^* c_k + sum_j Sigma_Y^{j*} q^j_k] - E[L_Y])`,
//!
//! so the discrete duality relations hold in expectation up to regression
//! and sampling error. The ensemble-mean terms in the second bracket are
//! frozen at the previous Picard iterate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Ensemble;
use crate::model::{diffusion_column, symmetrize, Coef, EvalPoint, Jacobians, LiftedCoefficients, Slot};
use crate::noise::NoiseBank;
use crate::par;
use crate::regression::{Basis, StepFit};
use crate::segment::{shift_adjoint_flat, DelayKernel, LiftedVector, SegmentGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdjointOptions {
    pub basis: Basis,
    pub max_iter: usize,
    pub tol: f64,
    pub max_ratio: f64,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            basis: Basis::Linear,
            max_iter: 20,
            tol: 1e-8,
            max_ratio: 0.5,
        }
    }
}

/// Convergence record of the mean-field Picard iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardReport {
    /// `r_i`: distance between iterates `i` and `i - 1` (`r_1` is the size
    /// of the first iterate).
    pub residuals: Vec<f64>,
    /// `r_{i+1} / r_i` for `i >= 2`.
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub contraction_ok: bool,
}

impl PicardReport {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    pub fn pass(&self) -> bool {
        self.converged && self.contraction_ok
    }
}

/// Discrete first-order adjoint along an ensemble.
#[derive(Clone, Debug)]
pub struct AdjointPath {
    pub grid: SegmentGrid,
    pub steps: usize,
    pub particles: usize,
    pub w: usize,
    p: Vec<f64>,
    p_pred: Vec<f64>,
    q: Vec<f64>,
    pub picard: PicardReport,
}

impl AdjointPath {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Flattened `p_k` of particle `i`.
    pub fn p(&self, k: usize, i: usize) -> &[f64] {
        let d = self.dim();
        let o = (k * self.particles + i) * d;
        &self.p[o..o + d]
    }

    /// Flattened `E_k[p_{k+1}]` of particle `i`, `k < K`.
    pub fn p_pred(&self, k: usize, i: usize) -> &[f64] {
        let d = self.dim();
        let o = (k * self.particles + i) * d;
        &self.p_pred[o..o + d]
    }

    /// Flattened column `j` of `q_k` of particle `i`.
    pub fn q(&self, k: usize, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let o = ((k * self.particles + i) * self.w + j) * d;
        &self.q[o..o + d]
    }

    pub fn p_lifted(&self, k: usize, i: usize) -> Result<LiftedVector> {
        LiftedVector::from_flat(&self.grid, self.p(k, i).to_vec())
    }

    pub fn q_lifted(&self, k: usize, i: usize, j: usize) -> Result<LiftedVector> {
        LiftedVector::from_flat(&self.grid, self.q(k, i, j).to_vec())
    }
}

/// `out += (d_h^T v, f_j d_t^T v)` for an `n x n` map given elementwise.
fn add_adjoint(
    grid: &SegmentGrid,
    kern: &DelayKernel,
    dh: impl Fn(usize, usize) -> f64,
    dt: impl Fn(usize, usize) -> f64,
    v: &[f64],
    out: &mut [f64],
    scale: f64,
) {
    let n = grid.n();
    let o = grid.head_offset();
    let mut t = vec![0.0; n];
    for a in 0..n {
        let (mut h, mut tt) = (0.0, 0.0);
        for i in 0..n {
            h += dh(i, a) * v[i];
            tt += dt(i, a) * v[i];
        }
        out[o + a] += scale * h;
        t[a] = scale * tt;
    }
    if t.iter().any(|x| *x != 0.0) {
        kern.add_representer(grid, &t, out);
    }
}

/// Adds `scale * (B^*_slot v + sum_j Sigma^{j*}_slot qv_j)` (heads only).
#[allow(clippy::too_many_arguments)]
fn add_linear_adjoints(
    lc: &LiftedCoefficients,
    jac: &Jacobians,
    mean: bool,
    c_head: &[f64],
    q_heads: &[&[f64]],
    out: &mut [f64],
    scale: f64,
) {
    let g = &lc.grid;
    let d = lc.dims();
    let (n, w) = (d.n, d.w);
    let (sh, st) = if mean { (Slot::Y, Slot::Yt) } else { (Slot::X, Slot::Xt) };
    let kb = if mean {
        lc.kernels.mean(Coef::Drift)
    } else {
        lc.kernels.state(Coef::Drift)
    };
    let ks = if mean {
        lc.kernels.mean(Coef::Diffusion)
    } else {
        lc.kernels.state(Coef::Diffusion)
    };
    let bh = jac.b(sh);
    let bt = jac.b(st);
    add_adjoint(g, kb, |i, a| bh[i * n + a], |i, a| bt[i * n + a], c_head, out, scale);
    let sh_ = jac.s(sh);
    let st_ = jac.s(st);
    for (j, qh) in q_heads.iter().enumerate() {
        add_adjoint(
            g,
            ks,
            |i, a| sh_[(i * w + j) * n + a],
            |i, a| st_[(i * w + j) * n + a],
            qh,
            out,
            scale,
        );
    }
}

struct Sweep<'a> {
    lc: &'a LiftedCoefficients,
    ens: &'a Ensemble,
    noise: &'a NoiseBank,
    fits: Vec<StepFit>,
    /// `E[L_Y]` per step and `E[M_Y]` at the terminal time.
    mean_ly: Vec<Vec<f64>>,
    mean_my: Vec<f64>,
}

impl<'a> Sweep<'a> {
    fn eval_point(&self, k: usize) -> EvalPoint {
        let mut p = self.lc.point();
        p.set_mean(self.lc, self.ens.mean_lifted(k));
        p
    }

    /// One backward pass. Mean terms come from `frozen` if given, otherwise
    /// from the current iterate. Returns the mean terms of this iterate and
    /// the distance to the previous contents of the buffers.
    fn run(
        &self,
        frozen: Option<&[Vec<f64>]>,
        p: &mut [f64],
        p_pred: &mut [f64],
        q: &mut [f64],
    ) -> Result<(Vec<Vec<f64>>, f64)> {
        let lc = self.lc;
        let g = lc.grid;
        let d = lc.dims();
        let (n, w) = (d.n, d.w);
        let dim = g.dim();
        let o = g.head_offset();
        let np = self.ens.particles();
        let kk = self.ens.steps();
        let dt = self.ens.time.dt;
        let mut new_frozen = vec![vec![0.0; dim]; kk];
        let mut resid = 0.0_f64;

        // terminal condition
        {
            let mp = self.eval_point(kk);
            let blk = &mut p[kk * np * dim..(kk + 1) * np * dim];
            let mean_my = &self.mean_my;
            par::for_each_block_with(
                blk,
                dim,
                || (mp.clone(), vec![0.0; dim]),
                |(pt, buf), i, out| {
                    pt.set_state(lc, self.ens.lifted(i, kk));
                    lc.cost_gradient(0.0, pt, &[], Coef::Terminal, false, buf);
                    for a in 0..dim {
                        out[a] = -buf[a] - mean_my[a];
                    }
                    Ok(())
                },
            )?;
        }

        for k in (0..kk).rev() {
            let t = self.ens.time.t(k);
            let u = self.ens.control.at(k);
            let fit = &self.fits[k];
            let next = &p[(k + 1) * np * dim..(k + 2) * np * dim];
            let c = fit.project(next, dim);
            let mut qt = vec![0.0; np * w * dim];
            for i in 0..np {
                let dw = self.noise.dw(i, k);
                for j in 0..w {
                    for a in 0..dim {
                        qt[(i * w + j) * dim + a] = (next[i * dim + a] - c[i * dim + a]) * dw[j] / dt;
                    }
                }
            }
            let qk = fit.project(&qt, w * dim);
            drop(qt);

            let mp = self.eval_point(k);
            // mean-field terms of the current iterate
            let cur = par::mean_vec(np, dim, |i, out| {
                let mut pt = mp.clone();
                pt.set_state(lc, self.ens.lifted(i, k));
                let mut jac = Jacobians::new(d);
                lc.jacobians(t, &pt, u, &mut jac);
                let qh: Vec<&[f64]> = (0..w)
                    .map(|j| &qk[(i * w + j) * dim + o..(i * w + j) * dim + o + n])
                    .collect();
                add_linear_adjoints(lc, &jac, true, &c[i * dim + o..i * dim + o + n], &qh, out, 1.0);
            });
            let fk = match frozen {
                Some(f) => f[k].clone(),
                None => cur.clone(),
            };
            new_frozen[k] = cur;
            let shared: Vec<f64> = (0..dim).map(|a| dt * (fk[a] - self.mean_ly[k][a])).collect();

            let mut newp = vec![0.0; np * dim];
            let init = || (mp.clone(), Jacobians::new(d), vec![0.0; dim]);
            par::for_each_block_with(&mut newp, dim, init, |(pt, jac, lx), i, out| {
                pt.set_state(lc, self.ens.lifted(i, k));
                lc.jacobians(t, pt, u, jac);
                lc.cost_gradient(t, pt, u, Coef::Running, false, lx);
                let ci = &c[i * dim..(i + 1) * dim];
                shift_adjoint_flat(&g, 1, ci, out);
                let qh: Vec<&[f64]> = (0..w)
                    .map(|j| &qk[(i * w + j) * dim + o..(i * w + j) * dim + o + n])
                    .collect();
                add_linear_adjoints(lc, jac, false, &ci[o..], &qh, out, dt);
                for a in 0..dim {
                    out[a] += shared[a] - dt * lx[a];
                }
                Ok(())
            })?;
            let pk = &mut p[k * np * dim..(k + 1) * np * dim];
            let qq = &mut q[k * np * w * dim..(k + 1) * np * w * dim];
            let wsq = |a: usize| if a < o { g.dtheta() } else { 1.0 };
            let step_sq = {
                let (pk, qq) = (&*pk, &*qq);
                par::sum_vec(np, 1, |i, out| {
                    let mut s = 0.0;
                    for a in 0..dim {
                        let e = newp[i * dim + a] - pk[i * dim + a];
                        s += e * e * wsq(a);
                    }
                    for b in 0..w * dim {
                        let idx = i * w * dim + b;
                        let e = qk[idx] - qq[idx];
                        s += e * e * wsq(b % dim);
                    }
                    out[0] = s;
                })[0]
            };
            pk.copy_from_slice(&newp);
            p_pred[k * np * dim..(k + 1) * np * dim].copy_from_slice(&c);
            qq.copy_from_slice(&qk);
            resid = resid.max((step_sq / np as f64).sqrt());
        }
        Ok((new_frozen, resid))
    }
}

fn check_noise(ens: &Ensemble, noise: &NoiseBank) -> Result<()> {
    if noise.particles() != ens.particles() || noise.steps() != ens.steps() {
        return Err(Error::Argument("noise bank does not match the ensemble".into()));
    }
    Ok(())
}

/// Ensemble means of the mean-slot cost gradients: `E[L_Y]` for every step
/// and `E[M_Y]` at the horizon, as Riesz vectors.
pub fn mean_cost_gradients(lc: &LiftedCoefficients, ens: &Ensemble) -> (Vec<Vec<f64>>, Vec<f64>) {
    let kk = ens.steps();
    let np = ens.particles();
    let dim = lc.grid.dim();
    let mean_grad = |k: usize, c: Coef| {
        let mut mp = lc.point();
        mp.set_mean(lc, ens.mean_lifted(k));
        let t = ens.time.t(k);
        let u: &[f64] = if k < kk { ens.control.at(k) } else { &[] };
        par::mean_vec(np, dim, |i, out| {
            let mut pt = mp.clone();
            pt.set_state(lc, ens.lifted(i, k));
            lc.cost_gradient(t, &pt, u, c, true, out);
        })
    };
    (
        (0..kk).map(|k| mean_grad(k, Coef::Running)).collect(),
        mean_grad(kk, Coef::Terminal),
    )
}

fn build_sweep<'a>(
    lc: &'a LiftedCoefficients,
    ens: &'a Ensemble,
    noise: &'a NoiseBank,
    basis: Basis,
) -> Result<Sweep<'a>> {
    check_noise(ens, noise)?;
    let kk = ens.steps();
    let fits = (0..kk)
        .map(|k| StepFit::new(lc, ens, basis, k))
        .collect::<Result<Vec<_>>>()?;
    let (mean_ly, mean_my) = mean_cost_gradients(lc, ens);
    Ok(Sweep {
        lc,
        ens,
        noise,
        fits,
        mean_ly,
        mean_my,
    })
}

/// Solves the first-order adjoint with Picard iteration on the mean terms.
pub fn solve_first_order(
    lc: &LiftedCoefficients,
    ens: &Ensemble,
    noise: &NoiseBank,
    opts: &AdjointOptions,
) -> Result<AdjointPath> {
    let sw = build_sweep(lc, ens, noise, opts.basis)?;
    let (kk, np, w, dim) = (ens.steps(), ens.particles(), lc.dims().w, lc.grid.dim());
    let mut p = vec![0.0; (kk + 1) * np * dim];
    let mut p_pred = vec![0.0; kk * np * dim];
    let mut q = vec![0.0; kk * np * w * dim];
    let mut frozen = vec![vec![0.0; dim]; kk];
    let mut residuals = Vec::new();
    let mut converged = false;
    for it in 0..opts.max_iter.max(1) {
        let (next, r) = sw.run(Some(&frozen), &mut p, &mut p_pred, &mut q)?;
        frozen = next;
        residuals.push(r);
        if it >= 1 && r <= opts.tol {
            converged = true;
            break;
        }
    }
    let ratios: Vec<f64> = residuals
        .windows(2)
        .skip(1)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();
    let contraction_ok = ratios.iter().all(|r| *r <= opts.max_ratio);
    Ok(AdjointPath {
        grid: lc.grid,
        steps: kk,
        particles: np,
        w,
        p,
        p_pred,
        q,
        picard: PicardReport {
            residuals,
            ratios,
            converged,
            contraction_ok,
        },
    })
}

/// Solves the first-order adjoint with mean terms taken from the current
/// pass, which is the fixed point of the Picard iteration.
pub fn solve_first_order_direct(
    lc: &LiftedCoefficients,
    ens: &Ensemble,
    noise: &NoiseBank,
    basis: Basis,
) -> Result<AdjointPath> {
    let sw = build_sweep(lc, ens, noise, basis)?;
    let (kk, np, w, dim) = (ens.steps(), ens.particles(), lc.dims().w, lc.grid.dim());
    let mut p = vec![0.0; (kk + 1) * np * dim];
    let mut p_pred = vec![0.0; kk * np * dim];
    let mut q = vec![0.0; kk * np * w * dim];
    let (_, r) = sw.run(None, &mut p, &mut p_pred, &mut q)?;
    Ok(AdjointPath {
        grid: lc.grid,
        steps: kk,
        particles: np,
        w,
        p,
        p_pred,
        q,
        picard: PicardReport {
            residuals: vec![r],
            ratios: Vec::new(),
            converged: true,
            contraction_ok: true,
        },
    })
}

/// Whitened linearization of the lifted coefficients at one step.
#[derive(Clone, Debug)]
pub struct StepOperators {
    /// `S_1 + dt B_X`.
    pub a: DMatrix<f64>,
    /// `B_Y`.
    pub b_mean: DMatrix<f64>,
    /// `Sigma_X^j`.
    pub c: Vec<DMatrix<f64>>,
    /// `Sigma_Y^j`.
    pub c_mean: Vec<DMatrix<f64>>,
    /// `B_X`.
    pub b: DMatrix<f64>,
}

/// Second-order adjoint for models with deterministic derivatives.
#[derive(Clone, Debug)]
pub struct SecondOrderPath {
    pub grid: SegmentGrid,
    pub dt: f64,
    /// Whitened `P_k`, `k = 0..=K`.
    pub p: Vec<DMatrix<f64>>,
    /// Whitened second derivative of the Hamiltonian, `k < K`.
    pub h_xx: Vec<DMatrix<f64>>,
    pub ops: Vec<StepOperators>,
}

impl SecondOrderPath {
    /// Head block of `P_k`.
    pub fn head_block(&self, k: usize) -> DMatrix<f64> {
        let n = self.grid.n();
        let o = self.grid.head_offset();
        self.p[k].view((o, o), (n, n)).into_owned()
    }

    /// `P_k` as an operator in raw coordinates applied to `x`.
    pub fn apply_raw(&self, k: usize, x: &LiftedVector) -> Result<LiftedVector> {
        let xw = nalgebra::DVector::from_vec(x.whitened());
        let y = &self.p[k] * xw;
        LiftedVector::from_whitened(&self.grid, y.as_slice())
    }
}

fn relative_spread(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1.0_f64.max(x.abs()))
        .fold(0.0, f64::max)
}

/// Whitened step operators of particle `i` at step `k`.
pub fn step_operators(lc: &LiftedCoefficients, ens: &Ensemble, i: usize, k: usize) -> StepOperators {
    let d = lc.dims();
    let (n, w) = (d.n, d.w);
    let dt = ens.time.dt;
    let mut pt = lc.point();
    pt.set_mean(lc, ens.mean_lifted(k));
    pt.set_state(lc, ens.lifted(i, k));
    let mut jac = Jacobians::new(d);
    lc.jacobians(ens.time.t(k), &pt, ens.control.at(k), &mut jac);
    let b = lc.lifted_jacobian_whitened(jac.b(Slot::X), jac.b(Slot::Xt), lc.kernels.state(Coef::Drift));
    let b_mean = lc.lifted_jacobian_whitened(jac.b(Slot::Y), jac.b(Slot::Yt), lc.kernels.mean(Coef::Drift));
    let mut col_h = vec![0.0; n * n];
    let mut col_t = vec![0.0; n * n];
    let mut c = Vec::with_capacity(w);
    let mut c_mean = Vec::with_capacity(w);
    for j in 0..w {
        diffusion_column(jac.s(Slot::X), n, w, j, &mut col_h);
        diffusion_column(jac.s(Slot::Xt), n, w, j, &mut col_t);
        c.push(lc.lifted_jacobian_whitened(&col_h, &col_t, lc.kernels.state(Coef::Diffusion)));
        diffusion_column(jac.s(Slot::Y), n, w, j, &mut col_h);
        diffusion_column(jac.s(Slot::Yt), n, w, j, &mut col_t);
        c_mean.push(lc.lifted_jacobian_whitened(&col_h, &col_t, lc.kernels.mean(Coef::Diffusion)));
    }
    let a = lc.grid.shift_matrix_whitened() + &b * dt;
    StepOperators {
        a,
        b_mean,
        c,
        c_mean,
        b,
    }
}

/// Whitened `H_XX` of particle `i` at step `k`.
fn hamiltonian_hessian(
    lc: &LiftedCoefficients,
    ens: &Ensemble,
    first: &AdjointPath,
    i: usize,
    k: usize,
) -> DMatrix<f64> {
    let d = lc.dims();
    let (n, w) = (d.n, d.w);
    let o = lc.grid.head_offset();
    let t = ens.time.t(k);
    let u = ens.control.at(k);
    let mut pt = lc.point();
    pt.set_mean(lc, ens.mean_lifted(k));
    pt.set_state(lc, ens.lifted(i, k));
    let mut h = -lc.running_cost_hessian_whitened(t, &pt, u);
    let ph = &first.p_pred(k, i)[o..o + n];
    h += lc.drift_hessian_whitened(t, &pt, u, ph);
    let mut v = vec![0.0; n * w];
    for j in 0..w {
        let qh = &first.q(k, i, j)[o..o + n];
        for a in 0..n {
            v[a * w + j] = qh[a];
        }
    }
    h += lc.diffusion_hessian_whitened(t, &pt, u, &v);
    h
}

/// Particles used to verify that derivatives do not vary over the ensemble.
fn probe_particles(np: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..8).map(|s| s * np / 8).collect();
    v.push(np - 1);
    v.dedup();
    v
}

/// Solves the deterministic second-order adjoint.
pub fn solve_second_order(lc: &LiftedCoefficients, ens: &Ensemble, first: &AdjointPath) -> Result<SecondOrderPath> {
    if !lc.model.deterministic_derivatives() {
        return Err(Error::Unsupported(format!(
            "model `{}` does not declare state-independent derivatives",
            lc.model.name()
        )));
    }
    let kk = ens.steps();
    let dt = ens.time.dt;
    let probes = probe_particles(ens.particles());
    let mut ops = Vec::with_capacity(kk);
    let mut h_xx = Vec::with_capacity(kk);
    for k in 0..kk {
        let op = step_operators(lc, ens, probes[0], k);
        let h = hamiltonian_hessian(lc, ens, first, probes[0], k);
        for &i in &probes[1..] {
            let o2 = step_operators(lc, ens, i, k);
            let h2 = hamiltonian_hessian(lc, ens, first, i, k);
            let mut spread = relative_spread(op.a.as_slice(), o2.a.as_slice());
            for (x, y) in op.c.iter().zip(&o2.c) {
                spread = spread.max(relative_spread(x.as_slice(), y.as_slice()));
            }
            spread = spread.max(relative_spread(h.as_slice(), h2.as_slice()));
            if spread > 1e-9 {
                return Err(Error::Unsupported(format!(
                    "second-order adjoint needs deterministic derivatives; they vary over particles at step {k}"
                )));
            }
        }
        ops.push(op);
        h_xx.push(h);
    }
    let mut pt = lc.point();
    pt.set_mean(lc, ens.mean_lifted(kk));
    pt.set_state(lc, ens.lifted(probes[0], kk));
    let mut pk = -lc.terminal_cost_hessian_whitened(&pt);
    let mut p = vec![DMatrix::zeros(0, 0); kk + 1];
    p[kk] = pk.clone();
    for k in (0..kk).rev() {
        let op = &ops[k];
        let mut next = op.a.transpose() * &pk * &op.a;
        for c in &op.c {
            next += (c.transpose() * &pk * c) * dt;
        }
        next += &h_xx[k] * dt;
        symmetrize(&mut next);
        p[k] = next.clone();
        pk = next;
    }
    Ok(SecondOrderPath {
        grid: lc.grid,
        dt,
        p,
        h_xx,
        ops,
    })
}

/// Operator-valued dual family `p^s(r)` for a fixed `s`.
#[derive(Clone, Debug)]
pub struct DualFamilyPath {
    pub s: usize,
    /// Whitened `p^s(r)` for `r = 0..=K`, zero for `r > s`.
    pub p: Vec<DMatrix<f64>>,
}

/// Solves the dual family with terminal value `phi` (whitened) at step `s`.
pub fn solve_dual_family(ops: &[StepOperators], dt: f64, s: usize, phi: &DMatrix<f64>) -> Result<DualFamilyPath> {
    let kk = ops.len();
    if s > kk {
        return Err(Error::Argument(format!(
            "dual family terminal step {s} exceeds horizon {kk}"
        )));
    }
    let dim = phi.nrows();
    if phi.ncols() != dim {
        return Err(Error::Dimension("terminal operator must be square".into()));
    }
    let mut p = vec![DMatrix::zeros(dim, dim); kk + 1];
    p[s] = phi.transpose();
    for r in (0..s).rev() {
        let m = &ops[r].a + &ops[r].b_mean * dt;
        p[r] = m.transpose() * &p[r + 1];
    }
    Ok(DualFamilyPath { s, p })
}
