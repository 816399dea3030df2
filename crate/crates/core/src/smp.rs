//! Hamiltonian and maximum-principle residual, the duality relations between
//! variational processes and adjoints, the cost expansion, and exhaustive
//! search over piecewise-constant controls.
//!
//! Every identity is evaluated on the particles of one ensemble, with the
//! adjoints and variations sharing its noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adjoint::{mean_cost_gradients, solve_dual_family, AdjointPath, SecondOrderPath};
use crate::control::{AdmissibleSet, ControlPath, TimeGrid};
use crate::error::{arg_err, Error, Result};
use crate::forward::{evaluate_cost, par_map, simulate, Ensemble, Estimate, InitialSegment};
use crate::model::{Coef, EvalPoint, Jacobians, LiftedCoefficients, Slot};
use crate::noise::NoiseBank;
use crate::segment::{inner_flat, LiftedVector};
use crate::stats::{combined_stderr, fit_loglog_slope, SlopeFit, Verdict};
use crate::variation::{lin, quad, simulate_variations, Proc, VariationBundle};

/// Everything the Hamiltonian needs at one particle and step.
#[derive(Clone, Debug)]
pub struct HamiltonianContext {
    pub step: usize,
    pub t: f64,
    pub point: EvalPoint,
    pub u: Vec<f64>,
    pub p: LiftedVector,
    pub q: Vec<LiftedVector>,
    /// Whitened second-order adjoint.
    pub p2: Option<DMatrix<f64>>,
}

impl HamiltonianContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lc: &LiftedCoefficients,
        step: usize,
        t: f64,
        state: &LiftedVector,
        mean: &LiftedVector,
        u: &[f64],
        p: LiftedVector,
        q: Vec<LiftedVector>,
        p2: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let g = &lc.grid;
        let d = lc.dims();
        for v in [state, mean, &p].into_iter().chain(q.iter()) {
            g.check(v)?;
        }
        if q.len() != d.w {
            return Err(Error::Dimension(format!(
                "expected {} adjoint columns, got {}",
                d.w,
                q.len()
            )));
        }
        if u.len() != d.k {
            return Err(Error::Dimension("control has the wrong dimension".into()));
        }
        if let Some(m) = &p2 {
            if m.nrows() != g.dim() || m.ncols() != g.dim() {
                return Err(Error::Dimension("second-order adjoint has the wrong size".into()));
            }
        }
        let mut point = lc.point();
        point.set_state(lc, state.as_flat());
        point.set_mean(lc, mean.as_flat());
        Ok(Self {
            step,
            t,
            point,
            u: u.to_vec(),
            p,
            q,
            p2,
        })
    }

    /// Context of particle `i` at step `k < K`, with `p = E_k[p_{k+1}]` and
    /// `P = P_{k+1}`.
    pub fn from_paths(
        lc: &LiftedCoefficients,
        ens: &Ensemble,
        first: &AdjointPath,
        second: Option<&SecondOrderPath>,
        i: usize,
        k: usize,
    ) -> Result<Self> {
        if k >= ens.steps() || i >= ens.particles() {
            return Err(arg_err(format!("no adjoint for particle {i} at step {k}")));
        }
        check_adjoint(ens, first)?;
        let g = &lc.grid;
        let q = (0..first.w)
            .map(|j| first.q_lifted(k, i, j))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            lc,
            k,
            ens.time.t(k),
            &ens.lift_state(i, k)?,
            &LiftedVector::from_flat(g, ens.mean_lifted(k).to_vec())?,
            ens.control.at(k),
            LiftedVector::from_flat(g, first.p_pred(k, i).to_vec())?,
            q,
            second.map(|s| s.p[k + 1].clone()),
        )
    }
}

fn check_adjoint(ens: &Ensemble, first: &AdjointPath) -> Result<()> {
    if first.particles != ens.particles() || first.steps != ens.steps() || first.grid != ens.grid {
        return Err(Error::Config(
            "adjoint and ensemble were built on different particles or grids".into(),
        ));
    }
    Ok(())
}

/// `<b, p_head> + sum_j <sigma_j, q_j head> - l` at raw inputs.
fn hamiltonian_raw(
    lc: &LiftedCoefficients,
    t: f64,
    pt: &EvalPoint,
    u: &[f64],
    ph: &[f64],
    qh: &[&[f64]],
    sig: &mut [f64],
) -> Result<f64> {
    let n = ph.len();
    let w = qh.len();
    let mut b = vec![0.0; n];
    lc.eval_drift_diffusion(t, pt, u, &mut b, sig)?;
    let mut h: f64 = ph.iter().zip(&b).map(|(p, b)| p * b).sum();
    for (j, q) in qh.iter().enumerate() {
        for a in 0..n {
            h += q[a] * sig[a * w + j];
        }
    }
    let l = lc.running_cost(t, pt, u);
    if !l.is_finite() {
        return Err(Error::Evaluation {
            what: "running cost",
            t,
            u: u.to_vec(),
        });
    }
    Ok(h - l)
}

/// `sum_j ds_j^T P_hh ds_j` with `P_hh` row-major `n x n`.
fn trace_term(ds: &[f64], phh: &[f64], n: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..w {
        for a in 0..n {
            for b in 0..n {
                s += ds[a * w + j] * phh[a * n + b] * ds[b * w + j];
            }
        }
    }
    s
}

fn head_block(p: &DMatrix<f64>, o: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            out[a * n + b] = p[(o + a, o + b)];
        }
    }
    out
}

/// The Hamiltonian at `u_eval`.
pub fn hamiltonian(lc: &LiftedCoefficients, ctx: &HamiltonianContext, u_eval: &[f64]) -> Result<f64> {
    let d = lc.dims();
    let qh: Vec<&[f64]> = ctx.q.iter().map(|q| q.head()).collect();
    let mut sig = vec![0.0; d.n * d.w];
    hamiltonian_raw(lc, ctx.t, &ctx.point, u_eval, ctx.p.head(), &qh, &mut sig)
}

/// `H(u) - H(v) - 1/2 tr(dSigma^* P dSigma)` with `dSigma = Sigma(v) - Sigma(u)`.
pub fn smp_residual(lc: &LiftedCoefficients, ctx: &HamiltonianContext, v: &[f64]) -> Result<f64> {
    let p2 = ctx
        .p2
        .as_ref()
        .ok_or_else(|| Error::Config("the maximum-principle residual needs the second-order adjoint".into()))?;
    let d = lc.dims();
    let (n, w) = (d.n, d.w);
    let qh: Vec<&[f64]> = ctx.q.iter().map(|q| q.head()).collect();
    let mut su = vec![0.0; n * w];
    let mut sv = vec![0.0; n * w];
    let hu = hamiltonian_raw(lc, ctx.t, &ctx.point, &ctx.u, ctx.p.head(), &qh, &mut su)?;
    let hv = hamiltonian_raw(lc, ctx.t, &ctx.point, v, ctx.p.head(), &qh, &mut sv)?;
    let ds: Vec<f64> = sv.iter().zip(&su).map(|(a, b)| a - b).collect();
    let phh = head_block(p2, lc.grid.head_offset(), n);
    Ok(hu - hv - 0.5 * trace_term(&ds, &phh, n, w))
}

/// Ensemble-averaged residual at one step and candidate value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub step: usize,
    pub v: Vec<f64>,
    pub estimate: f64,
    pub stderr: f64,
}

/// Ensemble-averaged maximum-principle residuals for every listed step and
/// candidate value.
pub fn residual_table(
    lc: &LiftedCoefficients,
    ens: &Ensemble,
    first: &AdjointPath,
    second: &SecondOrderPath,
    candidates: &[Vec<f64>],
    steps: &[usize],
) -> Result<Vec<ResidualEntry>> {
    check_adjoint(ens, first)?;
    let d = lc.dims();
    let (n, w) = (d.n, d.w);
    let o = lc.grid.head_offset();
    let mut out = Vec::with_capacity(steps.len() * candidates.len());
    for &k in steps {
        if k >= ens.steps() {
            return Err(arg_err(format!("step {k} is past the last control step")));
        }
        let t = ens.time.t(k);
        let u = ens.control.at(k);
        let phh = head_block(&second.p[k + 1], o, n);
        let mut mp = lc.point();
        mp.set_mean(lc, ens.mean_lifted(k));
        let per: Vec<Result<Vec<f64>>> = par_map(ens.particles(), |i| {
            let mut pt = mp.clone();
            pt.set_state(lc, ens.lifted(i, k));
            let ph = &first.p_pred(k, i)[o..];
            let qh: Vec<&[f64]> = (0..w).map(|j| &first.q(k, i, j)[o..]).collect();
            let mut su = vec![0.0; n * w];
            let mut sv = vec![0.0; n * w];
            let hu = hamiltonian_raw(lc, t, &pt, u, ph, &qh, &mut su)?;
            candidates
                .iter()
                .map(|v| {
                    let hv = hamiltonian_raw(lc, t, &pt, v, ph, &qh, &mut sv)?;
                    let ds: Vec<f64> = sv.iter().zip(&su).map(|(a, b)| a - b).collect();
                    Ok(hu - hv - 0.5 * trace_term(&ds, &phh, n, w))
                })
                .collect()
        });
        let per = per.into_iter().collect::<Result<Vec<_>>>()?;
        for (c, v) in candidates.iter().enumerate() {
            let e = Estimate::from_samples(per.iter().map(|r| r[c]).collect());
            out.push(ResidualEntry {
                step: k,
                v: v.clone(),
                estimate: e.mean,
                stderr: e.stderr,
            });
        }
    }
    Ok(out)
}

/// Comparison of two Monte Carlo estimates of the same quantity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualityResidual {
    pub name: String,
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub residual: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl DualityResidual {
    fn new(name: &str, lhs: Estimate, rhs: Estimate) -> Self {
        let residual = lhs.mean - rhs.mean;
        let stderr = combined_stderr(lhs.stderr, rhs.stderr);
        let tolerance = 3.0 * stderr;
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            residual,
            stderr,
            tolerance,
            pass: residual.abs() <= tolerance,
        }
    }

    pub fn verdict(&self) -> Verdict {
        Verdict::within(self.name.clone(), self.residual, self.stderr, self.tolerance)
    }
}

/// Spike increments and second derivatives at one particle and step.
struct Linearizer<'a> {
    lc: &'a LiftedCoefficients,
    pt: EvalPoint,
    jac: Jacobians,
    jac_e: Jacobians,
    db: Vec<f64>,
    ds: Vec<f64>,
    tmp_b: Vec<f64>,
    tmp_s: Vec<f64>,
    bxx: [Vec<f64>; 4],
    sxx: [Vec<f64>; 4],
}

const PAIRS: [(Slot, Slot); 4] = [
    (Slot::X, Slot::X),
    (Slot::X, Slot::Xt),
    (Slot::Xt, Slot::X),
    (Slot::Xt, Slot::Xt),
];

impl<'a> Linearizer<'a> {
    fn new(lc: &'a LiftedCoefficients) -> Self {
        let d = lc.dims();
        let (n, w) = (d.n, d.w);
        let z = |len: usize| vec![0.0; len];
        Self {
            lc,
            pt: lc.point(),
            jac: Jacobians::new(d),
            jac_e: Jacobians::new(d),
            db: z(n),
            ds: z(n * w),
            tmp_b: z(n),
            tmp_s: z(n * w),
            bxx: [z(n * n * n), z(n * n * n), z(n * n * n), z(n * n * n)],
            sxx: [z(n * w * n * n), z(n * w * n * n), z(n * w * n * n), z(n * w * n * n)],
        }
    }

    /// Loads particle `i` at step `k`. Spike increments are zero outside the
    /// window; second derivatives are loaded only when `second` is set.
    fn load(&mut self, b: &VariationBundle, i: usize, k: usize, second: bool) -> Result<()> {
        let lc = self.lc;
        let ens = &b.ens;
        let t = ens.time.t(k);
        let u = ens.control.at(k);
        self.pt.set_mean(lc, ens.mean_lifted(k));
        self.pt.set_state(lc, ens.lifted(i, k));
        if second {
            lc.jacobians(t, &self.pt, u, &mut self.jac);
            let ab = self.pt.args(Coef::Drift);
            let asg = self.pt.args(Coef::Diffusion);
            for (idx, (s1, s2)) in PAIRS.into_iter().enumerate() {
                lc.model.drift_d2(t, &ab, u, s1, s2, &mut self.bxx[idx]);
                lc.model.diffusion_d2(t, &asg, u, s1, s2, &mut self.sxx[idx]);
            }
        }
        if b.window.contains(k) {
            let ue = b.control.at(k);
            lc.eval_drift_diffusion(t, &self.pt, u, &mut self.tmp_b, &mut self.tmp_s)?;
            lc.eval_drift_diffusion(t, &self.pt, ue, &mut self.db, &mut self.ds)?;
            for (x, y) in self.db.iter_mut().zip(&self.tmp_b) {
                *x -= y;
            }
            for (x, y) in self.ds.iter_mut().zip(&self.tmp_s) {
                *x -= y;
            }
            if second {
                lc.jacobians(t, &self.pt, ue, &mut self.jac_e);
                for s in Slot::STATE {
                    let si = s as usize;
                    for (e, x) in self.jac_e.b[si].iter_mut().zip(&self.jac.b[si]) {
                        *e -= x;
                    }
                    for (e, x) in self.jac_e.s[si].iter_mut().zip(&self.jac.s[si]) {
                        *e -= x;
                    }
                }
            }
        } else {
            self.db.fill(0.0);
            self.ds.fill(0.0);
            if second {
                for s in Slot::STATE {
                    self.jac_e.b[s as usize].fill(0.0);
                    self.jac_e.s[s as usize].fill(0.0);
                }
            }
        }
        Ok(())
    }
}

fn check_bundle_adjoint(b: &VariationBundle, first: &AdjointPath) -> Result<()> {
    check_adjoint(&b.ens, first)
}

/// Both first-order duality relations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FirstOrderDuality {
    pub y: DualityResidual,
    pub z: DualityResidual,
}

impl FirstOrderDuality {
    pub fn pass(&self) -> bool {
        self.y.pass && self.z.pass
    }
}

/// Checks `E<p_K, Y_K> = sum_k dt E[<L_X + E L_Y, Y_k> + <p, dB> + <q, dSigma>]`
/// and its counterpart for `Z` with the second-order drivers.
pub fn duality_check_first_order(
    lc: &LiftedCoefficients,
    b: &VariationBundle,
    first: &AdjointPath,
) -> Result<FirstOrderDuality> {
    check_bundle_adjoint(b, first)?;
    let g = lc.grid;
    let d = lc.dims();
    let (n, m, w) = (d.n, g.m(), d.w);
    let o = g.head_offset();
    let ens = &b.ens;
    let kk = ens.steps();
    let dt = ens.time.dt;
    let (mean_ly, _) = mean_cost_gradients(lc, ens);
    let kb = lc.kernels.state(Coef::Drift);
    let ks = lc.kernels.state(Coef::Diffusion);
    let rows: Vec<Result<[f64; 4]>> = par_map(ens.particles(), |i| {
        let mut lz = Linearizer::new(lc);
        let mut lx = vec![0.0; g.dim()];
        let (mut yb, mut ys) = (vec![0.0; n], vec![0.0; n]);
        let (mut ry, mut rz) = (0.0, 0.0);
        for k in 0..kk {
            lz.load(b, i, k, true)?;
            let t = ens.time.t(k);
            lc.cost_gradient(t, &lz.pt, ens.control.at(k), Coef::Running, false, &mut lx);
            for (x, e) in lx.iter_mut().zip(&mean_ly[k]) {
                *x += e;
            }
            let y = b.lifted(Proc::Y, i, k);
            let z = b.lifted(Proc::Z, i, k);
            let c = &first.p_pred(k, i)[o..];
            let mut sy = inner_flat(&g, &lx, y);
            let mut sz = inner_flat(&g, &lx, z);
            sy += c.iter().zip(&lz.db).map(|(p, x)| p * x).sum::<f64>();
            kb.pair_into(&g, &y[..m * n], &mut yb);
            ks.pair_into(&g, &y[..m * n], &mut ys);
            let yh = &y[o..];
            let spiking = b.window.contains(k);
            for r in 0..n {
                let mut f = 0.5 * quad(&lz.bxx, n, r, yh, &yb);
                if spiking {
                    f += lin(lz.jac_e.b(Slot::X), lz.jac_e.b(Slot::Xt), n, r, yh, &yb);
                }
                sz += c[r] * f;
            }
            for j in 0..w {
                let q = &first.q(k, i, j)[o..];
                for r in 0..n {
                    let row = r * w + j;
                    sy += q[r] * lz.ds[row];
                    let mut f = 0.5 * quad(&lz.sxx, n, row, yh, &ys);
                    if spiking {
                        f += lin(lz.jac_e.s(Slot::X), lz.jac_e.s(Slot::Xt), n, row, yh, &ys);
                    }
                    sz += q[r] * f;
                }
            }
            ry += dt * sy;
            rz += dt * sz;
        }
        let pk = first.p(kk, i);
        Ok([
            inner_flat(&g, pk, b.lifted(Proc::Y, i, kk)),
            ry,
            inner_flat(&g, pk, b.lifted(Proc::Z, i, kk)),
            rz,
        ])
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let col = |c: usize| Estimate::from_samples(rows.iter().map(|r| r[c]).collect());
    Ok(FirstOrderDuality {
        y: DualityResidual::new("first-order duality (Y)", col(0), col(1)),
        z: DualityResidual::new("first-order duality (Z)", col(2), col(3)),
    })
}

fn whitened(g: &crate::segment::SegmentGrid, x: &[f64]) -> DVector<f64> {
    let sq = g.dtheta().sqrt();
    let o = g.head_offset();
    DVector::from_iterator(
        x.len(),
        x.iter().enumerate().map(|(a, v)| if a < o { v * sq } else { *v }),
    )
}

/// Second-order duality at one spike width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SecondOrderDuality {
    pub eps: f64,
    /// `E<P_K Y_K, Y_K>`.
    pub lhs: Estimate,
    /// Exact discrete right-hand side, all terms.
    pub rhs_full: Estimate,
    /// `sum_k dt E[-H_XX[Y_k, Y_k] + tr(dSigma^* P_{k+1} dSigma)]`.
    pub rhs_leading: Estimate,
    /// `lhs - rhs_full`, which vanishes up to sampling error.
    pub full: DualityResidual,
    /// `lhs - rhs_leading`, which is `o(eps)`.
    pub leading: DualityResidual,
    /// Paired per-particle estimate of `lhs - rhs_leading`.
    pub residual: Estimate,
}

/// Evaluates both sides of the second-order duality for one bundle.
pub fn duality_check_second_order(
    lc: &LiftedCoefficients,
    b: &VariationBundle,
    second: &SecondOrderPath,
) -> Result<SecondOrderDuality> {
    let g = lc.grid;
    let ens = &b.ens;
    let kk = ens.steps();
    if second.p.len() != kk + 1 || second.grid != g {
        return Err(Error::Config("second-order adjoint does not match the bundle".into()));
    }
    let d = lc.dims();
    let (n, w) = (d.n, d.w);
    let o = g.head_offset();
    let dt = ens.time.dt;
    let ey: Vec<DVector<f64>> = (0..=kk).map(|k| whitened(&g, b.mean_lifted(Proc::Y, k))).collect();
    let phh: Vec<Vec<f64>> = (0..=kk).map(|k| head_block(&second.p[k], o, n)).collect();
    // deterministic parts of the forcing
    let fbar: Vec<DVector<f64>> = (0..kk).map(|k| &second.ops[k].b_mean * &ey[k] * dt).collect();
    let gbar: Vec<Vec<DVector<f64>>> = (0..kk)
        .map(|k| second.ops[k].c_mean.iter().map(|c| c * &ey[k]).collect())
        .collect();
    let rows: Vec<Result<[f64; 3]>> = par_map(ens.particles(), |i| {
        let mut lz = Linearizer::new(lc);
        let (mut full, mut lead) = (0.0, 0.0);
        for k in 0..kk {
            let op = &second.ops[k];
            let p = &second.p[k + 1];
            lz.load(b, i, k, false)?;
            let y = whitened(&g, b.lifted(Proc::Y, i, k));
            let hy = -(y.dot(&(&second.h_xx[k] * &y))) * dt;
            full += hy;
            lead += hy + dt * trace_term(&lz.ds, &phh[k + 1], n, w);
            let ay = &op.a * &y;
            let mut f = fbar[k].clone();
            for a in 0..n {
                f[o + a] += dt * lz.db[a];
            }
            let pf = p * &f;
            full += 2.0 * ay.dot(&pf) + f.dot(&pf);
            for j in 0..w {
                let cy = &op.c[j] * &y;
                let mut gj = gbar[k][j].clone();
                for a in 0..n {
                    gj[o + a] += lz.ds[a * w + j];
                }
                let pg = p * &gj;
                full += dt * (2.0 * cy.dot(&pg) + gj.dot(&pg));
            }
        }
        let yk = whitened(&g, b.lifted(Proc::Y, i, kk));
        let lhs = yk.dot(&(&second.p[kk] * &yk));
        Ok([lhs, full, lead])
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let col = |c: usize| Estimate::from_samples(rows.iter().map(|r| r[c]).collect());
    let (lhs, rhs_full, rhs_leading) = (col(0), col(1), col(2));
    Ok(SecondOrderDuality {
        eps: b.eps,
        full: DualityResidual::new("second-order duality (all terms)", lhs.clone(), rhs_full.clone()),
        leading: DualityResidual::new("second-order duality (leading order)", lhs.clone(), rhs_leading.clone()),
        residual: Estimate::from_samples(rows.iter().map(|r| r[0] - r[2]).collect()),
        lhs,
        rhs_full,
        rhs_leading,
    })
}

/// Decay of the leading-order second-order residual over spike widths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SecondOrderProbe {
    pub points: Vec<SecondOrderDuality>,
    pub fit: Option<SlopeFit>,
    pub slope_pass: bool,
}

impl SecondOrderProbe {
    /// Fits the decay of `|lhs - rhs_leading|` over the widths of `points`.
    pub fn from_points(points: Vec<SecondOrderDuality>) -> Self {
        let eps: Vec<f64> = points.iter().map(|p| p.eps).collect();
        let vals: Vec<f64> = points.iter().map(|p| p.residual.mean.abs()).collect();
        let fit = fit_loglog_slope(&eps, &vals).ok();
        let slope_pass = fit.as_ref().is_some_and(|f| f.slope > 1.0);
        Self {
            points,
            fit,
            slope_pass,
        }
    }

    /// The all-terms identity holds at every width.
    pub fn full_pass(&self) -> bool {
        !self.points.is_empty() && self.points.iter().all(|p| p.full.pass)
    }

    /// The leading-order residual decays faster than `eps`.
    pub fn decay_pass(&self) -> bool {
        self.slope_pass && self.full_pass()
    }

    /// The leading-order terms match the left-hand side at the smallest
    /// width. Only expected when the spike leaves the drift unchanged and
    /// perturbs the diffusion by a constant.
    pub fn leading_pass(&self) -> bool {
        let smallest = self.points.iter().min_by(|a, b| a.eps.total_cmp(&b.eps));
        self.full_pass() && smallest.is_some_and(|p| p.leading.pass)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn second_order_probe(
    lc: &LiftedCoefficients,
    ens: &std::sync::Arc<Ensemble>,
    xi: &InitialSegment,
    noise: &NoiseBank,
    second: &SecondOrderPath,
    v: &[f64],
    tau: f64,
    eps_list: &[f64],
    set: &AdmissibleSet,
) -> Result<SecondOrderProbe> {
    let points = eps_list
        .iter()
        .map(|&e| {
            let b = simulate_variations(lc, ens, xi, noise, v, tau, e, set)?;
            duality_check_second_order(lc, &b, second)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SecondOrderProbe::from_points(points))
}

/// Checks `E[phi Y_s] = sum_{r<s} dt p^s(r+1)^T G E[dB_r]` for a drift-only
/// spike, with `phi = B_X(s)`, on the summed head components.
pub fn dual_family_check(
    lc: &LiftedCoefficients,
    b: &VariationBundle,
    second: &SecondOrderPath,
    s_list: &[usize],
) -> Result<Vec<DualityResidual>> {
    let g = lc.grid;
    let ens = &b.ens;
    let kk = ens.steps();
    let d = lc.dims();
    let n = d.n;
    let o = g.head_offset();
    let dt = ens.time.dt;
    if second.ops.len() != kk || second.grid != g {
        return Err(Error::Config("second-order adjoint does not match the bundle".into()));
    }
    let mut out = Vec::with_capacity(s_list.len());
    for &s in s_list {
        if s == 0 || s >= kk {
            return Err(arg_err(format!("dual-family step {s} must lie in 1..{kk}")));
        }
        let phi = &second.ops[s].b;
        let fam = solve_dual_family(&second.ops, dt, s, phi)?;
        // coef[r][a] = sum_b (p^s(r+1)^T)[o + b, o + a]
        let coef: Vec<Vec<f64>> = (0..s)
            .map(|r| {
                let pt = fam.p[r + 1].transpose();
                (0..n).map(|a| (0..n).map(|bb| pt[(o + bb, o + a)]).sum()).collect()
            })
            .collect();
        let rows: Vec<Result<[f64; 2]>> = par_map(ens.particles(), |i| {
            let mut lz = Linearizer::new(lc);
            let mut rhs = 0.0;
            for (r, cf) in coef.iter().enumerate() {
                if !b.window.contains(r) {
                    continue;
                }
                lz.load(b, i, r, false)?;
                if lz.ds.iter().any(|x| *x != 0.0) {
                    return Err(arg_err("the dual-family check needs a drift-only spike"));
                }
                rhs += dt * cf.iter().zip(&lz.db).map(|(c, x)| c * x).sum::<f64>();
            }
            let y = whitened(&g, b.lifted(Proc::Y, i, s));
            let py = phi * y;
            let lhs: f64 = (0..n).map(|a| py[o + a]).sum();
            Ok([lhs, rhs])
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let col = |c: usize| Estimate::from_samples(rows.iter().map(|r| r[c]).collect());
        out.push(DualityResidual::new(
            &format!("dual family at step {s}"),
            col(0),
            col(1),
        ));
    }
    Ok(out)
}

/// Cost expansion at one spike width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostExpansionPoint {
    pub eps: f64,
    pub delta_j: Estimate,
    pub rhs: Estimate,
    /// Paired per-particle `delta_j - rhs`.
    pub residual: Estimate,
    pub tolerance: f64,
    pub tracks: bool,
}

/// Compares `J(u^eps) - J(u)` with its expansion in `Y` and `Z`.
pub fn cost_expansion_point(lc: &LiftedCoefficients, b: &VariationBundle) -> Result<CostExpansionPoint> {
    let g = lc.grid;
    let ens = &b.ens;
    let kk = ens.steps();
    let dt = ens.time.dt;
    let (mean_ly, mean_my) = mean_cost_gradients(lc, ens);
    let points = |k: usize| {
        let mut p = lc.point();
        p.set_mean(lc, ens.mean_lifted(k));
        let mut pe = lc.point();
        pe.set_mean(lc, b.mean_lifted(Proc::Perturbed, k));
        (p, pe)
    };
    let pts: Vec<(EvalPoint, EvalPoint)> = (0..=kk).map(points).collect();
    let rows: Vec<[f64; 2]> = par_map(ens.particles(), |i| {
        let mut grad = vec![0.0; g.dim()];
        let (mut dj, mut rhs) = (0.0, 0.0);
        let yz = |k: usize| -> Vec<f64> {
            b.lifted(Proc::Y, i, k)
                .iter()
                .zip(b.lifted(Proc::Z, i, k))
                .map(|(y, z)| y + z)
                .collect()
        };
        for k in 0..=kk {
            let (mut p, mut pe) = pts[k].clone();
            p.set_state(lc, ens.lifted(i, k));
            pe.set_state(lc, b.lifted(Proc::Perturbed, i, k));
            let y = b.lifted(Proc::Y, i, k);
            let s = yz(k);
            if k < kk {
                let t = ens.time.t(k);
                let u = ens.control.at(k);
                let ue = b.control.at(k);
                dj += dt * (lc.running_cost(t, &pe, ue) - lc.running_cost(t, &p, u));
                lc.cost_gradient(t, &p, u, Coef::Running, false, &mut grad);
                let mut r = inner_flat(&g, &grad, &s) + inner_flat(&g, &mean_ly[k], &s);
                r += 0.5 * lc.cost_quadratic(t, &p, u, Coef::Running, y);
                r += lc.running_cost(t, &p, ue) - lc.running_cost(t, &p, u);
                rhs += dt * r;
            } else {
                dj += lc.terminal_cost(&pe) - lc.terminal_cost(&p);
                lc.cost_gradient(0.0, &p, &[], Coef::Terminal, false, &mut grad);
                rhs += inner_flat(&g, &grad, &s) + inner_flat(&g, &mean_my, &s);
                rhs += 0.5 * lc.cost_quadratic(0.0, &p, &[], Coef::Terminal, y);
            }
        }
        [dj, rhs]
    });
    let col = |c: usize| Estimate::from_samples(rows.iter().map(|r| r[c]).collect());
    let (delta_j, rhs) = (col(0), col(1));
    let residual = Estimate::from_samples(rows.iter().map(|r| r[0] - r[1]).collect());
    let tolerance = 3.0 * combined_stderr(delta_j.stderr, rhs.stderr);
    Ok(CostExpansionPoint {
        eps: b.eps,
        tracks: (delta_j.mean - rhs.mean).abs() <= tolerance,
        delta_j,
        rhs,
        residual,
        tolerance,
    })
}

/// Cost expansion over several spike widths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostExpansionReport {
    pub points: Vec<CostExpansionPoint>,
    pub fit: Option<SlopeFit>,
    pub slope_pass: bool,
    pub pass: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn cost_expansion_check(
    lc: &LiftedCoefficients,
    ens: &std::sync::Arc<Ensemble>,
    xi: &InitialSegment,
    noise: &NoiseBank,
    v: &[f64],
    tau: f64,
    eps_list: &[f64],
    set: &AdmissibleSet,
) -> Result<CostExpansionReport> {
    let points = eps_list
        .iter()
        .map(|&e| {
            let b = simulate_variations(lc, ens, xi, noise, v, tau, e, set)?;
            cost_expansion_point(lc, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    let vals: Vec<f64> = points.iter().map(|p| p.residual.mean.abs()).collect();
    let fit = fit_loglog_slope(eps_list, &vals).ok();
    let slope_pass = fit.as_ref().is_some_and(|f| f.slope > 1.0);
    let pass = slope_pass && points.iter().all(|p| p.tracks);
    Ok(CostExpansionReport {
        points,
        fit,
        slope_pass,
        pass,
    })
}

/// Outcome of the exhaustive search over piecewise-constant controls.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub pieces: usize,
    pub values: Vec<Vec<f64>>,
    /// Index into `values` for every piece of the best control.
    pub choices: Vec<usize>,
    pub control: ControlPath,
    pub cost: f64,
    pub cost_stderr: f64,
    /// Sample-mean cost of every candidate, in lexicographic order of choices.
    pub costs: Vec<f64>,
}

const MAX_CANDIDATES: usize = 1 << 14;

/// Decodes candidate `idx` into per-piece choices (first piece most significant).
pub fn decode_choices(mut idx: usize, pieces: usize, base: usize) -> Vec<usize> {
    let mut out = vec![0; pieces];
    for p in (0..pieces).rev() {
        out[p] = idx % base;
        idx /= base;
    }
    out
}

/// Minimizes the sample-mean cost over all piecewise-constant controls with
/// values in `values`, using the same noise for every candidate.
pub fn exhaustive_search(
    lc: &LiftedCoefficients,
    xi: &InitialSegment,
    time: &TimeGrid,
    noise: &NoiseBank,
    values: &[Vec<f64>],
    pieces: usize,
) -> Result<SearchResult> {
    if values.is_empty() || pieces == 0 {
        return Err(arg_err("exhaustive search needs at least one value and one piece"));
    }
    let total = (values.len() as u128).pow(pieces as u32);
    if total > MAX_CANDIDATES as u128 {
        return Err(arg_err(format!(
            "{total} candidates exceed the search limit of {MAX_CANDIDATES}"
        )));
    }
    let mut costs = Vec::with_capacity(total as usize);
    let mut best: Option<(usize, Estimate)> = None;
    for idx in 0..total as usize {
        let ch = decode_choices(idx, pieces, values.len());
        let pv: Vec<Vec<f64>> = ch.iter().map(|&c| values[c].clone()).collect();
        let u = ControlPath::piecewise(&pv, time.steps)?;
        let ens = simulate(lc, xi, time, &u, noise)?;
        let j = evaluate_cost(lc, &ens);
        costs.push(j.mean);
        if best.as_ref().is_none_or(|(_, b)| j.mean < b.mean) {
            best = Some((idx, j));
        }
    }
    let (idx, j) = best.expect("at least one candidate");
    let choices = decode_choices(idx, pieces, values.len());
    let pv: Vec<Vec<f64>> = choices.iter().map(|&c| values[c].clone()).collect();
    Ok(SearchResult {
        pieces,
        values: values.to_vec(),
        control: ControlPath::piecewise(&pv, time.steps)?,
        choices,
        cost: j.mean,
        cost_stderr: j.stderr,
        costs,
    })
}

/// Steps strictly inside control pieces: the first and last step of every
/// piece are excluded.
pub fn interior_steps(steps: usize, pieces: usize) -> Vec<usize> {
    let per = steps / pieces.max(1);
    (0..steps)
        .filter(|k| {
            let r = k % per.max(1);
            per >= 3 && r != 0 && r != per - 1
        })
        .collect()
}

/// Maximum-principle verdict for one control.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmpControlCheck {
    pub choices: Vec<usize>,
    pub cost: f64,
    pub entries: Vec<ResidualEntry>,
    /// Entry with the smallest estimate.
    pub worst: ResidualEntry,
    /// Whether `u(t_k)` maximizes `H(v) + 1/2 tr(dSigma^* P dSigma)` at every
    /// tested step up to the tolerance.
    pub argmax_consistent: bool,
}

/// Full maximum-principle experiment: exhaustive search, residuals along the
/// optimum and along a control perturbed away from it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmpReport {
    pub search: SearchResult,
    pub optimal: SmpControlCheck,
    /// `3 sigma + 5 dt` at the worst entry of the optimal control.
    pub tolerance: f64,
    pub optimal_pass: bool,
    pub perturbed: SmpControlCheck,
    /// Some entry of the perturbed control lies below `-5 sigma`.
    pub perturbed_pass: bool,
}

impl SmpReport {
    pub fn pass(&self) -> bool {
        self.optimal_pass && self.perturbed_pass
    }
}

fn check_control(
    lc: &LiftedCoefficients,
    xi: &InitialSegment,
    time: &TimeGrid,
    noise: &NoiseBank,
    values: &[Vec<f64>],
    choices: &[usize],
    opts: &crate::adjoint::AdjointOptions,
) -> Result<SmpControlCheck> {
    let pv: Vec<Vec<f64>> = choices.iter().map(|&c| values[c].clone()).collect();
    let u = ControlPath::piecewise(&pv, time.steps)?;
    let ens = simulate(lc, xi, time, &u, noise)?;
    let cost = evaluate_cost(lc, &ens).mean;
    let first = crate::adjoint::solve_first_order(lc, &ens, noise, opts)?;
    let second = crate::adjoint::solve_second_order(lc, &ens, &first)?;
    let steps = interior_steps(time.steps, choices.len());
    if steps.is_empty() {
        return Err(arg_err("control pieces are too short to have interior steps"));
    }
    let entries = residual_table(lc, &ens, &first, &second, values, &steps)?;
    let worst = entries
        .iter()
        .min_by(|a, b| a.estimate.total_cmp(&b.estimate))
        .cloned()
        .expect("non-empty table");
    let argmax_consistent = entries.iter().all(|e| e.estimate >= -(3.0 * e.stderr + 5.0 * time.dt));
    Ok(SmpControlCheck {
        choices: choices.to_vec(),
        cost,
        entries,
        worst,
        argmax_consistent,
    })
}

/// Runs the maximum-principle experiment on a finite admissible set.
pub fn smp_check(
    lc: &LiftedCoefficients,
    xi: &InitialSegment,
    time: &TimeGrid,
    noise: &NoiseBank,
    set: &AdmissibleSet,
    pieces: usize,
    opts: &crate::adjoint::AdjointOptions,
) -> Result<SmpReport> {
    let values = set
        .points()
        .ok_or_else(|| Error::Config("the maximum-principle check needs a finite admissible set".into()))?
        .to_vec();
    if values.len() < 2 {
        return Err(Error::Config("the admissible set needs at least two points".into()));
    }
    let search = exhaustive_search(lc, xi, time, noise, &values, pieces)?;
    let optimal = check_control(lc, xi, time, noise, &values, &search.choices, opts)?;
    let tolerance = 3.0 * optimal.worst.stderr + 5.0 * time.dt;
    let optimal_pass = optimal.worst.estimate >= -tolerance;
    // move the middle piece to the value with the highest cost
    let piece = pieces / 2;
    let base = values.len();
    let mut pert = search.choices.clone();
    let mut worst_cost = f64::NEG_INFINITY;
    for c in 0..base {
        if c == search.choices[piece] {
            continue;
        }
        let mut ch = search.choices.clone();
        ch[piece] = c;
        let idx = ch.iter().fold(0usize, |acc, &x| acc * base + x);
        if search.costs[idx] > worst_cost {
            worst_cost = search.costs[idx];
            pert = ch;
        }
    }
    let perturbed = check_control(lc, xi, time, noise, &values, &pert, opts)?;
    let perturbed_pass = perturbed
        .entries
        .iter()
        .any(|e| e.estimate < -5.0 * e.stderr && e.estimate < 0.0);
    Ok(SmpReport {
        search,
        optimal,
        tolerance,
        optimal_pass,
        perturbed,
        perturbed_pass,
    })
}
