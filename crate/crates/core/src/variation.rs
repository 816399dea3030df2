//! Spike perturbations, first- and second-order variational processes and
//! the convergence-order probe.
//!
//! All processes share the noise of the unperturbed ensemble. The
//! variational equations are discretized with the same one-step scheme as
//! the state, so `X^eps - X - Y - Z` is an exact algebraic remainder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{AdmissibleSet, ControlPath, SpikeWindow, TimeGrid};
use crate::error::{arg_err, Error, Result};
use crate::forward::{Ensemble, InitialSegment};
use crate::model::{Coef, EvalPoint, Jacobians, LiftedCoefficients, Slot};
use crate::noise::NoiseBank;
use crate::par;
use crate::segment::{LiftedVector, SegmentGrid};
use crate::stats::{fit_loglog_slope, SlopeFit};

/// Processes driven by one spike perturbation.
#[derive(Clone, Debug)]
pub struct VariationBundle {
    pub ens: Arc<Ensemble>,
    pub control: ControlPath,
    pub window: SpikeWindow,
    pub eps: f64,
    stride: usize,
    /// Per particle: `[X^eps, Y, Z]` head histories.
    hist: Vec<f64>,
    /// Ensemble means of the three histories.
    mean: [Vec<f64>; 3],
}

/// Which process of a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proc {
    Perturbed = 0,
    Y = 1,
    Z = 2,
}

impl VariationBundle {
    pub fn grid(&self) -> &SegmentGrid {
        &self.ens.grid
    }

    pub fn particles(&self) -> usize {
        self.ens.particles()
    }

    pub fn steps(&self) -> usize {
        self.ens.steps()
    }

    fn block(&self, i: usize, p: Proc) -> &[f64] {
        let o = (3 * i + p as usize) * self.stride;
        &self.hist[o..o + self.stride]
    }

    /// Flattened lifted value of process `p` for particle `i` at step `k`.
    pub fn lifted(&self, p: Proc, i: usize, k: usize) -> &[f64] {
        let n = self.grid().n();
        &self.block(i, p)[k * n..(k + self.grid().m() + 1) * n]
    }

    pub fn mean_lifted(&self, p: Proc, k: usize) -> &[f64] {
        let n = self.grid().n();
        &self.mean[p as usize][k * n..(k + self.grid().m() + 1) * n]
    }

    pub fn y(&self, i: usize, k: usize) -> Result<LiftedVector> {
        LiftedVector::from_flat(self.grid(), self.lifted(Proc::Y, i, k).to_vec())
    }

    pub fn z(&self, i: usize, k: usize) -> Result<LiftedVector> {
        LiftedVector::from_flat(self.grid(), self.lifted(Proc::Z, i, k).to_vec())
    }

    /// `X^eps - X - Y` for particle `i` at step `k`.
    pub fn r1(&self, i: usize, k: usize) -> Result<LiftedVector> {
        let v: Vec<f64> = self
            .lifted(Proc::Perturbed, i, k)
            .iter()
            .zip(self.ens.lifted(i, k))
            .zip(self.lifted(Proc::Y, i, k))
            .map(|((a, b), c)| a - b - c)
            .collect();
        LiftedVector::from_flat(self.grid(), v)
    }

    /// `X^eps - X - Y - Z` for particle `i` at step `k`.
    pub fn r2(&self, i: usize, k: usize) -> Result<LiftedVector> {
        let v: Vec<f64> = self
            .r1(i, k)?
            .as_flat()
            .iter()
            .zip(self.lifted(Proc::Z, i, k))
            .map(|(a, z)| a - z)
            .collect();
        LiftedVector::from_flat(self.grid(), v)
    }

    /// Head history of process `p` for particle `i`, steps `-m..=K`.
    pub fn heads(&self, p: Proc, i: usize) -> &[f64] {
        self.block(i, p)
    }
}

/// Per-thread scratch for the linearized coefficients.
struct Scratch {
    p: EvalPoint,
    pe: EvalPoint,
    jac: Jacobians,
    jac_e: Jacobians,
    b: Vec<f64>,
    be: Vec<f64>,
    s: Vec<f64>,
    se: Vec<f64>,
    bxx: [Vec<f64>; 4],
    sxx: [Vec<f64>; 4],
    yb: Vec<f64>,
    ys: Vec<f64>,
    zb: Vec<f64>,
    zs: Vec<f64>,
}

impl Scratch {
    fn new(lc: &LiftedCoefficients) -> Self {
        let d = lc.dims();
        let (n, w) = (d.n, d.w);
        let z = |len: usize| vec![0.0; len];
        Self {
            p: lc.point(),
            pe: lc.point(),
            jac: Jacobians::new(d),
            jac_e: Jacobians::new(d),
            b: z(n),
            be: z(n),
            s: z(n * w),
            se: z(n * w),
            bxx: [z(n * n * n), z(n * n * n), z(n * n * n), z(n * n * n)],
            sxx: [z(n * w * n * n), z(n * w * n * n), z(n * w * n * n), z(n * w * n * n)],
            yb: z(n),
            ys: z(n),
            zb: z(n),
            zs: z(n),
        }
    }
}

const PAIRS: [(Slot, Slot); 4] = [
    (Slot::X, Slot::X),
    (Slot::X, Slot::Xt),
    (Slot::Xt, Slot::X),
    (Slot::Xt, Slot::Xt),
];

/// `sum_a d_h[r,a] v_a + d_t[r,a] vt_a` for row `r`.
#[inline]
pub(crate) fn lin(dh: &[f64], dt: &[f64], n: usize, r: usize, v: &[f64], vt: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in 0..n {
        s += dh[r * n + a] * v[a] + dt[r * n + a] * vt[a];
    }
    s
}

/// Quadratic form of row `r` of four `n x n` Hessian blocks at `(v, vt)`.
#[inline]
pub(crate) fn quad(h: &[Vec<f64>; 4], n: usize, r: usize, v: &[f64], vt: &[f64]) -> f64 {
    let mut s = 0.0;
    let args = [(v, v), (v, vt), (vt, v), (vt, vt)];
    for (blk, (x1, x2)) in h.iter().zip(args) {
        let base = r * n * n;
        for a in 0..n {
            for b in 0..n {
                s += blk[base + a * n + b] * x1[a] * x2[b];
            }
        }
    }
    s
}

/// Simulates `X^eps`, `Y^eps` and `Z^eps` for the spike `(v, tau, eps)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_variations(
    lc: &LiftedCoefficients,
    ens: &Arc<Ensemble>,
    xi: &InitialSegment,
    noise: &NoiseBank,
    v: &[f64],
    tau: f64,
    eps: f64,
    set: &AdmissibleSet,
) -> Result<VariationBundle> {
    let grid = lc.grid;
    let d = lc.dims();
    let (n, m, w) = (d.n, grid.m(), d.w);
    let time: TimeGrid = ens.time;
    let (ue, window) = ens.control.spike(&time, v, tau, eps, set)?;
    if noise.particles() != ens.particles() || noise.steps() != time.steps {
        return Err(arg_err("noise bank does not match the ensemble"));
    }
    let np = ens.particles();
    let kk = time.steps;
    let stride = (kk + m + 1) * n;
    let mut hist = vec![0.0; np * 3 * stride];
    let mut mean = [vec![0.0; stride], vec![0.0; stride], vec![0.0; stride]];
    for blk in hist.chunks_mut(3 * stride) {
        blk[..m * n].copy_from_slice(&xi.segment);
        blk[m * n..(m + 1) * n].copy_from_slice(&xi.head);
    }
    mean[0][..m * n].copy_from_slice(&xi.segment);
    mean[0][m * n..(m + 1) * n].copy_from_slice(&xi.head);
    let dt = time.dt;
    let kern = |c: Coef| lc.kernels.state(c);
    for k in 0..kk {
        let t = time.t(k);
        let u = ens.control.at(k);
        let u_e = ue.at(k);
        let spiking = window.contains(k);
        let lo = k * n;
        let hi = (k + m + 1) * n;
        let mut mp = lc.point();
        mp.set_mean(lc, ens.mean_lifted(k));
        let mut mpe = lc.point();
        mpe.set_mean(lc, &mean[0][lo..hi]);
        // mean pairings of Y and Z for the drift and diffusion kernels
        let mut ey = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut ez = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        ey[0].copy_from_slice(&mean[1][hi - n..hi]);
        ez[0].copy_from_slice(&mean[2][hi - n..hi]);
        lc.kernels
            .mean(Coef::Drift)
            .pair_into(&grid, &mean[1][lo..hi - n], &mut ey[1]);
        lc.kernels
            .mean(Coef::Diffusion)
            .pair_into(&grid, &mean[1][lo..hi - n], &mut ey[2]);
        lc.kernels
            .mean(Coef::Drift)
            .pair_into(&grid, &mean[2][lo..hi - n], &mut ez[1]);
        lc.kernels
            .mean(Coef::Diffusion)
            .pair_into(&grid, &mean[2][lo..hi - n], &mut ez[2]);
        let ens_ref = &**ens;
        let init = || {
            let mut sc = Scratch::new(lc);
            sc.p = mp.clone();
            sc.pe = mpe.clone();
            sc
        };
        par::for_each_block_with(&mut hist, 3 * stride, init, |sc, i, blk| {
            let (xe_h, rest) = blk.split_at_mut(stride);
            let (y_h, z_h) = rest.split_at_mut(stride);
            let dw = noise.dw(i, k);

            // perturbed state
            sc.pe.set_state(lc, &xe_h[lo..hi]);
            lc.eval_drift_diffusion(t, &sc.pe, u_e, &mut sc.be, &mut sc.se)?;
            for a in 0..n {
                let mut val = xe_h[hi - n + a] + sc.be[a] * dt;
                for j in 0..w {
                    val += sc.se[a * w + j] * dw[j];
                }
                if !val.is_finite() {
                    return Err(Error::Divergence { step: k + 1 });
                }
                xe_h[hi + a] = val;
            }

            // linearization along the unperturbed state
            sc.p.set_state(lc, ens_ref.lifted(i, k));
            lc.jacobians(t, &sc.p, u, &mut sc.jac);
            let ab = sc.p.args(Coef::Drift);
            let asg = sc.p.args(Coef::Diffusion);
            for (idx, (s1, s2)) in PAIRS.into_iter().enumerate() {
                lc.model.drift_d2(t, &ab, u, s1, s2, &mut sc.bxx[idx]);
                lc.model.diffusion_d2(t, &asg, u, s1, s2, &mut sc.sxx[idx]);
            }
            if spiking {
                lc.eval_drift_diffusion(t, &sc.p, u, &mut sc.b, &mut sc.s)?;
                let (mut b2, mut s2) = (vec![0.0; n], vec![0.0; n * w]);
                lc.eval_drift_diffusion(t, &sc.p, u_e, &mut b2, &mut s2)?;
                for a in 0..n {
                    sc.b[a] = b2[a] - sc.b[a];
                }
                for a in 0..n * w {
                    sc.s[a] = s2[a] - sc.s[a];
                }
                lc.jacobians(t, &sc.p, u_e, &mut sc.jac_e);
                for s in Slot::STATE {
                    let si = s as usize;
                    for (e, b0) in sc.jac_e.b[si].iter_mut().zip(&sc.jac.b[si]) {
                        *e -= b0;
                    }
                    for (e, s0) in sc.jac_e.s[si].iter_mut().zip(&sc.jac.s[si]) {
                        *e -= s0;
                    }
                }
            }

            let yw = &y_h[lo..hi];
            let zw = &z_h[lo..hi];
            kern(Coef::Drift).pair_into(&grid, &yw[..m * n], &mut sc.yb);
            kern(Coef::Diffusion).pair_into(&grid, &yw[..m * n], &mut sc.ys);
            kern(Coef::Drift).pair_into(&grid, &zw[..m * n], &mut sc.zb);
            kern(Coef::Diffusion).pair_into(&grid, &zw[..m * n], &mut sc.zs);
            let yh = &yw[m * n..];
            let zh = &zw[m * n..];
            let j = &sc.jac;
            let mut y_next = vec![0.0; n];
            let mut z_next = vec![0.0; n];
            for r in 0..n {
                let mut dy = lin(j.b(Slot::X), j.b(Slot::Xt), n, r, yh, &sc.yb)
                    + lin(j.b(Slot::Y), j.b(Slot::Yt), n, r, &ey[0], &ey[1]);
                let mut dz = lin(j.b(Slot::X), j.b(Slot::Xt), n, r, zh, &sc.zb)
                    + lin(j.b(Slot::Y), j.b(Slot::Yt), n, r, &ez[0], &ez[1])
                    + 0.5 * quad(&sc.bxx, n, r, yh, &sc.yb);
                if spiking {
                    dy += sc.b[r];
                    dz += lin(sc.jac_e.b(Slot::X), sc.jac_e.b(Slot::Xt), n, r, yh, &sc.yb);
                }
                let mut yv = yh[r] + dy * dt;
                let mut zv = zh[r] + dz * dt;
                for c in 0..w {
                    let row = r * w + c;
                    let mut gy = lin(j.s(Slot::X), j.s(Slot::Xt), n, row, yh, &sc.ys)
                        + lin(j.s(Slot::Y), j.s(Slot::Yt), n, row, &ey[0], &ey[2]);
                    let mut gz = lin(j.s(Slot::X), j.s(Slot::Xt), n, row, zh, &sc.zs)
                        + lin(j.s(Slot::Y), j.s(Slot::Yt), n, row, &ez[0], &ez[2])
                        + 0.5 * quad(&sc.sxx, n, row, yh, &sc.ys);
                    if spiking {
                        gy += sc.s[row];
                        gz += lin(sc.jac_e.s(Slot::X), sc.jac_e.s(Slot::Xt), n, row, yh, &sc.ys);
                    }
                    yv += gy * dw[c];
                    zv += gz * dw[c];
                }
                if !(yv.is_finite() && zv.is_finite()) {
                    return Err(Error::Divergence { step: k + 1 });
                }
                y_next[r] = yv;
                z_next[r] = zv;
            }
            y_h[hi..hi + n].copy_from_slice(&y_next);
            z_h[hi..hi + n].copy_from_slice(&z_next);
            Ok(())
        })?;
        for (p, mv) in mean.iter_mut().enumerate() {
            let o = hi;
            let h = &hist;
            let mh = par::mean_vec(np, n, |i, out| {
                let b = (3 * i + p) * stride + o;
                out.copy_from_slice(&h[b..b + n]);
            });
            mv[o..o + n].copy_from_slice(&mh);
        }
    }
    Ok(VariationBundle {
        ens: ens.clone(),
        control: ue,
        window,
        eps,
        stride,
        hist,
        mean,
    })
}

/// Squared lifted norms of every window of a head history.
fn window_norms_sq(heads: &[f64], n: usize, m: usize, dtheta: f64, out: &mut Vec<f64>) {
    let steps = heads.len() / n;
    out.clear();
    let sq: Vec<f64> = (0..steps)
        .map(|s| heads[s * n..(s + 1) * n].iter().map(|v| v * v).sum())
        .collect();
    let mut seg: f64 = sq[..m].iter().sum();
    for k in 0..(steps - m) {
        out.push(sq[k + m] + dtheta * seg);
        seg += sq[k + m] - sq[k];
    }
}

/// Expected order of a probed quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    Band { lo: f64, hi: f64 },
    AtLeast(f64),
}

impl Expected {
    pub fn accepts(&self, s: f64) -> bool {
        match *self {
            Expected::Band { lo, hi } => s >= lo && s <= hi,
            Expected::AtLeast(x) => s >= x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderStatus {
    Pass,
    Fail,
    DegenerateZero,
    FitFailed,
}

/// Fitted order of one quantity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantityOrder {
    pub quantity: String,
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    pub fit: Option<SlopeFit>,
    pub expected: Expected,
    pub status: OrderStatus,
}

/// Result of the order probe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderReport {
    pub j: u32,
    pub tau: f64,
    pub quantities: Vec<QuantityOrder>,
}

impl OrderReport {
    pub fn pass(&self) -> bool {
        self.quantities.iter().all(|q| q.status == OrderStatus::Pass)
    }
}

pub const QUANTITY_NAMES: [&str; 6] = ["X^eps-X", "Y", "Z", "E[Y]", "X^eps-X-Y", "X^eps-X-Y-Z"];

/// Expected slopes for moment index `j`.
pub fn expected_orders(j: u32) -> [Expected; 6] {
    let j = j as f64;
    let first = Expected::Band {
        lo: j - 0.2,
        hi: j + 0.2,
    };
    let second = Expected::Band {
        lo: 2.0 * j - 0.3,
        hi: 2.0 * j + 0.3,
    };
    [first, first, second, first, second, Expected::AtLeast(2.0 * j + 0.1)]
}

/// The six order quantities of a bundle, in [`QUANTITY_NAMES`] order.
pub fn order_quantities(b: &VariationBundle, j: u32) -> [f64; 6] {
    let g = *b.grid();
    let (n, m) = (g.n(), g.m());
    let np = b.particles();
    let jj = j as i32;
    let sums = par::sum_vec(np, 5, |i, out| {
        let xh = b.ens.heads(i);
        let xe = b.heads(Proc::Perturbed, i);
        let y = b.heads(Proc::Y, i);
        let z = b.heads(Proc::Z, i);
        let d1: Vec<f64> = xe.iter().zip(xh).map(|(a, c)| a - c).collect();
        let r1: Vec<f64> = d1.iter().zip(y).map(|(a, c)| a - c).collect();
        let r2: Vec<f64> = r1.iter().zip(z).map(|(a, c)| a - c).collect();
        let mut buf = Vec::new();
        for (slot, h) in [&d1[..], y, z, &r1[..], &r2[..]].into_iter().enumerate() {
            window_norms_sq(h, n, m, g.dtheta(), &mut buf);
            let sup = buf.iter().cloned().fold(0.0_f64, f64::max);
            out[slot] = sup.powi(jj);
        }
    });
    let inv = 1.0 / np as f64;
    let mut mean_sup = 0.0_f64;
    let mut buf = Vec::new();
    window_norms_sq(&b.mean[Proc::Y as usize], n, m, g.dtheta(), &mut buf);
    for v in &buf {
        mean_sup = mean_sup.max(v.sqrt());
    }
    [
        sums[0] * inv,
        sums[1] * inv,
        sums[2] * inv,
        mean_sup.powi(jj),
        sums[3] * inv,
        sums[4] * inv,
    ]
}

/// Fits the convergence order of every quantity over a list of spike widths.
#[allow(clippy::too_many_arguments)]
pub fn order_probe(
    lc: &LiftedCoefficients,
    ens: &Arc<Ensemble>,
    xi: &InitialSegment,
    noise: &NoiseBank,
    v: &[f64],
    tau: f64,
    eps_list: &[f64],
    j: u32,
    set: &AdmissibleSet,
) -> Result<OrderReport> {
    if j == 0 {
        return Err(arg_err("moment index j must be at least 1"));
    }
    if eps_list.len() < 3 {
        return Err(arg_err("order probe needs at least three spike widths"));
    }
    let mut table = (0..6).map(|_| Vec::with_capacity(eps_list.len())).collect::<Vec<_>>();
    for &eps in eps_list {
        let b = simulate_variations(lc, ens, xi, noise, v, tau, eps, set)?;
        for (col, q) in table.iter_mut().zip(order_quantities(&b, j)) {
            col.push(q);
        }
    }
    let expected = expected_orders(j);
    let quantities = table
        .into_iter()
        .enumerate()
        .map(|(idx, values)| {
            let (fit, status) = if values.iter().all(|v| *v == 0.0) {
                (None, OrderStatus::DegenerateZero)
            } else {
                match fit_loglog_slope(eps_list, &values) {
                    Ok(f) => {
                        let st = if expected[idx].accepts(f.slope) {
                            OrderStatus::Pass
                        } else {
                            OrderStatus::Fail
                        };
                        (Some(f), st)
                    }
                    Err(_) => (None, OrderStatus::FitFailed),
                }
            };
            QuantityOrder {
                quantity: QUANTITY_NAMES[idx].to_string(),
                eps: eps_list.to_vec(),
                values,
                fit,
                expected: expected[idx],
                status,
            }
        })
        .collect();
    Ok(OrderReport { j, tau, quantities })
}
