//! Tensor process of the first-order variation.
//!
//! Matrices are kept in whitened coordinates, where the Hilbert-space
//! adjoint is the transpose and the Frobenius norm is the Hilbert-Schmidt
//! norm. With `S` the one-step shift, `B = G beta` and `C_j = G gamma_j` the
//! state Jacobians, the Euler recursion of the tensor process is
//!
//! `T_{k+1} = S T S^* + dt (B T S^* + S T B^* + sum_j C_j T C_j^* + Phi_k)
//!            + sum_j dW_j (C_j T S^* + S T C_j^* + Psi_{j,k})`,
//!
//! which reproduces `E[Y_k (x) Y_k]` up to `O(dt)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::{diffusion_column, Coef, Jacobians, LiftedCoefficients, Slot};
use crate::noise::NoiseBank;
use crate::par;
use crate::segment::{DelayKernel, LiftedVector, SegmentGrid};
use crate::stats::{fit_loglog_slope, SlopeFit};
use crate::variation::{lin, Proc, VariationBundle};

/// Largest lifted dimension accepted for dense tensor matrices.
pub const MAX_TENSOR_DIM: usize = 64;

fn check_dim(g: &SegmentGrid) -> Result<()> {
    if g.dim() > MAX_TENSOR_DIM {
        return Err(Error::Config(format!(
            "lifted dimension {} exceeds the tensor limit {MAX_TENSOR_DIM}",
            g.dim()
        )));
    }
    Ok(())
}

/// Per-step tensor matrices of one particle.
#[derive(Clone, Debug)]
pub struct TensorPath {
    pub grid: SegmentGrid,
    whitened: Vec<DMatrix<f64>>,
}

impl TensorPath {
    pub fn steps(&self) -> usize {
        self.whitened.len() - 1
    }

    pub fn whitened(&self, k: usize) -> &DMatrix<f64> {
        &self.whitened[k]
    }

    /// Matrix in raw coordinates: `f (x) g` is stored as `g (Lambda f)^T`.
    pub fn raw(&self, k: usize) -> DMatrix<f64> {
        let w = self.grid.whitening();
        let mut m = self.whitened[k].clone();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                m[(r, c)] *= w[c] / w[r];
            }
        }
        m
    }

    /// Applies the operator at step `k` to `h`.
    pub fn apply(&self, k: usize, h: &LiftedVector) -> Result<LiftedVector> {
        self.grid.check(h)?;
        let x = nalgebra::DVector::from_vec(h.whitened());
        LiftedVector::from_whitened(&self.grid, (&self.whitened[k] * x).as_slice())
    }

    /// Largest `|T - T^T|` entry over all steps.
    pub fn symmetry_defect(&self) -> f64 {
        self.whitened
            .iter()
            .map(|m| (m - m.transpose()).amax())
            .fold(0.0, f64::max)
    }
}

/// `Y_k (x) Y_k` for every step of particle `i`.
pub fn outer_product_path(b: &VariationBundle, i: usize) -> Result<TensorPath> {
    let g = *b.grid();
    check_dim(&g)?;
    if i >= b.particles() {
        return Err(arg_err(format!("no particle {i}")));
    }
    let whitened = (0..=b.steps())
        .map(|k| {
            let y = nalgebra::DVector::from_vec(whiten(&g, b.lifted(Proc::Y, i, k)));
            &y * y.transpose()
        })
        .collect();
    Ok(TensorPath { grid: g, whitened })
}

/// `sum_j C_j M C_j^*` for whitened operators.
pub fn trace_conjugation(c: &[DMatrix<f64>], m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if m.ncols() != d || c.iter().any(|x| x.nrows() != d || x.ncols() != d) {
        return Err(Error::Dimension(
            "trace conjugation needs square operators of one size".into(),
        ));
    }
    let mut out = DMatrix::zeros(d, d);
    for x in c {
        out += x * m * x.transpose();
    }
    Ok(out)
}

fn whiten(g: &SegmentGrid, x: &[f64]) -> Vec<f64> {
    let sq = g.dtheta().sqrt();
    let o = g.head_offset();
    x.iter()
        .enumerate()
        .map(|(a, v)| if a < o { v * sq } else { *v })
        .collect()
}

/// Whitened rows of `z -> d_head z + d_tilde I(z)` (`rows x dim`).
fn rows_whitened(g: &SegmentGrid, kern: &DelayKernel, d_head: &[f64], d_tilde: &[f64], out: &mut [f64]) {
    let (n, m, dim) = (g.n(), g.m(), g.dim());
    let o = g.head_offset();
    let sq = g.dtheta().sqrt();
    let rows = out.len() / dim;
    for r in 0..rows {
        for a in 0..n {
            out[r * dim + o + a] = d_head[r * n + a];
            let c = d_tilde[r * n + a] * sq;
            for (j, f) in kern.values().iter().enumerate().take(m) {
                out[r * dim + j * n + a] = c * f;
            }
        }
    }
}

/// Whitened one-step shift as an index map: `(S x)_r = scale[r] * x[src[r]]`.
fn shift_map(g: &SegmentGrid) -> (Vec<usize>, Vec<f64>) {
    let (n, m) = (g.n(), g.m());
    let o = g.head_offset();
    let sq = g.dtheta().sqrt();
    let mut src = vec![0; g.dim()];
    let mut scale = vec![1.0; g.dim()];
    for j in 0..m {
        for a in 0..n {
            let r = j * n + a;
            if j + 1 < m {
                src[r] = (j + 1) * n + a;
            } else {
                src[r] = o + a;
                scale[r] = sq;
            }
        }
    }
    for a in 0..n {
        src[o + a] = o + a;
    }
    (src, scale)
}

/// Coefficients of one particle at one step, in whitened form.
struct StepData {
    /// `beta`, `n x dim`.
    beta: Vec<f64>,
    /// `gamma_j`, `w` blocks of `n x dim`.
    gamma: Vec<f64>,
    /// Head of the drift forcing `B_Y E[Y] + dB`.
    a: Vec<f64>,
    /// Head of the noise forcing `Sigma_Y^j E[Y] + dSigma_j`, `w x n`.
    gf: Vec<f64>,
    /// `S Y_k` and `gamma_j Y_k` (`w x n`).
    sy: Vec<f64>,
    cy: Vec<f64>,
}

struct Stepper<'a> {
    lc: &'a LiftedCoefficients,
    b: &'a VariationBundle,
    noise: &'a NoiseBank,
    g: SegmentGrid,
    n: usize,
    w: usize,
    dim: usize,
    src: Vec<usize>,
    scale: Vec<f64>,
    /// Mean of `Y`: head and pairings with the drift and diffusion mean kernels.
    ey: Vec<[Vec<f64>; 3]>,
}

impl<'a> Stepper<'a> {
    fn new(lc: &'a LiftedCoefficients, b: &'a VariationBundle, noise: &'a NoiseBank) -> Result<Self> {
        let g = lc.grid;
        if noise.particles() != b.particles() || noise.steps() != b.steps() {
            return Err(arg_err("noise bank does not match the bundle"));
        }
        if *b.grid() != g {
            return Err(Error::Config("bundle and coefficients use different grids".into()));
        }
        check_dim(&g)?;
        let d = lc.dims();
        let (n, m) = (d.n, g.m());
        let (src, scale) = shift_map(&g);
        let ey = (0..b.steps())
            .map(|k| {
                let my = b.mean_lifted(Proc::Y, k);
                let mut e = [my[m * n..].to_vec(), vec![0.0; n], vec![0.0; n]];
                lc.kernels.mean(Coef::Drift).pair_into(&g, &my[..m * n], &mut e[1]);
                lc.kernels.mean(Coef::Diffusion).pair_into(&g, &my[..m * n], &mut e[2]);
                e
            })
            .collect();
        Ok(Self {
            lc,
            b,
            noise,
            g,
            n,
            w: d.w,
            dim: g.dim(),
            src,
            scale,
            ey,
        })
    }

    fn data(&self) -> StepData {
        let (n, w, dim) = (self.n, self.w, self.dim);
        StepData {
            beta: vec![0.0; n * dim],
            gamma: vec![0.0; w * n * dim],
            a: vec![0.0; n],
            gf: vec![0.0; w * n],
            sy: vec![0.0; dim],
            cy: vec![0.0; w * n],
        }
    }

    fn load(&self, i: usize, k: usize, sd: &mut StepData) -> Result<()> {
        let lc = self.lc;
        let b = self.b;
        let ens = &b.ens;
        let (n, w, dim) = (self.n, self.w, self.dim);
        let g = &self.g;
        let t = ens.time.t(k);
        let u = ens.control.at(k);
        let mut pt = lc.point();
        pt.set_mean(lc, ens.mean_lifted(k));
        pt.set_state(lc, ens.lifted(i, k));
        let mut jac = Jacobians::new(lc.dims());
        lc.jacobians(t, &pt, u, &mut jac);
        rows_whitened(
            g,
            lc.kernels.state(Coef::Drift),
            jac.b(Slot::X),
            jac.b(Slot::Xt),
            &mut sd.beta,
        );
        let mut ch = vec![0.0; n * n];
        let mut ct = vec![0.0; n * n];
        for j in 0..w {
            diffusion_column(jac.s(Slot::X), n, w, j, &mut ch);
            diffusion_column(jac.s(Slot::Xt), n, w, j, &mut ct);
            rows_whitened(
                g,
                lc.kernels.state(Coef::Diffusion),
                &ch,
                &ct,
                &mut sd.gamma[j * n * dim..(j + 1) * n * dim],
            );
        }
        let (mut db, mut ds) = (vec![0.0; n], vec![0.0; n * w]);
        if b.window.contains(k) {
            let (mut b0, mut s0) = (vec![0.0; n], vec![0.0; n * w]);
            lc.eval_drift_diffusion(t, &pt, u, &mut b0, &mut s0)?;
            lc.eval_drift_diffusion(t, &pt, b.control.at(k), &mut db, &mut ds)?;
            for (x, y) in db.iter_mut().zip(&b0) {
                *x -= y;
            }
            for (x, y) in ds.iter_mut().zip(&s0) {
                *x -= y;
            }
        }
        let ey = &self.ey[k];
        for r in 0..n {
            sd.a[r] = lin(jac.b(Slot::Y), jac.b(Slot::Yt), n, r, &ey[0], &ey[1]) + db[r];
            for j in 0..w {
                let row = r * w + j;
                sd.gf[j * n + r] = lin(jac.s(Slot::Y), jac.s(Slot::Yt), n, row, &ey[0], &ey[2]) + ds[row];
            }
        }
        let y = whiten(g, b.lifted(Proc::Y, i, k));
        for r in 0..dim {
            sd.sy[r] = self.scale[r] * y[self.src[r]];
        }
        for j in 0..w {
            for r in 0..n {
                let row = &sd.gamma[(j * n + r) * dim..(j * n + r + 1) * dim];
                sd.cy[j * n + r] = row.iter().zip(&y).map(|(a, b)| a * b).sum();
            }
        }
        Ok(())
    }

    /// One step of the recursion from `y` into `out` (both `dim x dim`).
    fn step(&self, sd: &StepData, dt: f64, dw: &[f64], y: &[f64], out: &mut [f64], tmp: &mut [f64]) {
        let (n, w, dim) = (self.n, self.w, self.dim);
        let o = self.g.head_offset();
        let (src, sc) = (&self.src, &self.scale);
        for r in 0..dim {
            let yr = &y[src[r] * dim..(src[r] + 1) * dim];
            for c in 0..dim {
                out[r * dim + c] = sc[r] * sc[c] * yr[src[c]];
            }
        }
        // tmp = rows * y, then shifted columns
        let rows_times_y = |rows: &[f64], tmp: &mut [f64]| {
            for i in 0..n {
                let row = &rows[i * dim..(i + 1) * dim];
                let t = &mut tmp[i * dim..(i + 1) * dim];
                t.fill(0.0);
                for (l, &bl) in row.iter().enumerate() {
                    if bl != 0.0 {
                        for (tc, yc) in t.iter_mut().zip(&y[l * dim..(l + 1) * dim]) {
                            *tc += bl * yc;
                        }
                    }
                }
            }
        };
        let add_row_col = |out: &mut [f64], i: usize, c: usize, v: f64| {
            out[(o + i) * dim + c] += v;
            out[c * dim + o + i] += v;
        };
        rows_times_y(&sd.beta, tmp);
        for i in 0..n {
            for c in 0..dim {
                let v = dt * (sc[c] * tmp[i * dim + src[c]] + sd.a[i] * sd.sy[c]);
                add_row_col(out, i, c, v);
            }
        }
        for j in 0..w {
            let gam = &sd.gamma[j * n * dim..(j + 1) * n * dim];
            rows_times_y(gam, tmp);
            let gf = &sd.gf[j * n..(j + 1) * n];
            let cy = &sd.cy[j * n..(j + 1) * n];
            for i in 0..n {
                for l in 0..n {
                    let mut s = 0.0;
                    let ti = &tmp[i * dim..(i + 1) * dim];
                    for (a, b) in ti.iter().zip(&gam[l * dim..(l + 1) * dim]) {
                        s += a * b;
                    }
                    s += gf[i] * cy[l] + cy[i] * gf[l] + gf[i] * gf[l];
                    out[(o + i) * dim + o + l] += dt * s;
                }
                for c in 0..dim {
                    let v = dw[j] * (sc[c] * tmp[i * dim + src[c]] + gf[i] * sd.sy[c]);
                    add_row_col(out, i, c, v);
                }
            }
        }
        for r in 0..dim {
            for c in (r + 1)..dim {
                let s = 0.5 * (out[r * dim + c] + out[c * dim + r]);
                out[r * dim + c] = s;
                out[c * dim + r] = s;
            }
        }
    }

    /// Runs the recursion for particle `i`, calling `visit(k, T_k)` at every step.
    fn run(&self, i: usize, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
        let dim = self.dim;
        let ens = &self.b.ens;
        let dt = ens.time.dt;
        let mut cur = vec![0.0; dim * dim];
        let mut next = vec![0.0; dim * dim];
        let mut tmp = vec![0.0; self.n * dim];
        let mut sd = self.data();
        visit(0, &cur);
        for k in 0..ens.steps() {
            self.load(i, k, &mut sd)?;
            let dw = self.noise.dw(i, k);
            self.step(&sd, dt, dw, &cur, &mut next, &mut tmp);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step: k + 1 });
            }
            std::mem::swap(&mut cur, &mut next);
            visit(k + 1, &cur);
        }
        Ok(())
    }
}

/// Euler recursion of the tensor process for particle `i`.
pub fn evolve_tensor_mild(
    lc: &LiftedCoefficients,
    b: &VariationBundle,
    noise: &NoiseBank,
    i: usize,
) -> Result<TensorPath> {
    if i >= b.particles() {
        return Err(arg_err(format!("no particle {i}")));
    }
    let st = Stepper::new(lc, b, noise)?;
    let dim = st.dim;
    let mut whitened = Vec::with_capacity(b.steps() + 1);
    st.run(i, |_, m| whitened.push(DMatrix::from_row_slice(dim, dim, m)))?;
    Ok(TensorPath {
        grid: lc.grid,
        whitened,
    })
}

/// Drift and noise forcing of the tensor recursion for particle `i`.
#[derive(Clone, Debug)]
pub struct TensorForcing {
    /// `Phi_k`, whitened.
    pub phi: Vec<DMatrix<f64>>,
    /// `Psi_{j,k}`, indexed `[k][j]`.
    pub psi: Vec<Vec<DMatrix<f64>>>,
}

pub fn tensor_forcing(
    lc: &LiftedCoefficients,
    b: &VariationBundle,
    noise: &NoiseBank,
    i: usize,
) -> Result<TensorForcing> {
    if i >= b.particles() {
        return Err(arg_err(format!("no particle {i}")));
    }
    let st = Stepper::new(lc, b, noise)?;
    let (n, w, dim) = (st.n, st.w, st.dim);
    let o = lc.grid.head_offset();
    let mut sd = st.data();
    let mut phi = Vec::with_capacity(b.steps());
    let mut psi = Vec::with_capacity(b.steps());
    for k in 0..b.steps() {
        st.load(i, k, &mut sd)?;
        let sy = nalgebra::DVector::from_column_slice(&sd.sy);
        let head = |v: &[f64]| {
            let mut x = nalgebra::DVector::zeros(dim);
            for a in 0..n {
                x[o + a] = v[a];
            }
            x
        };
        let a = head(&sd.a);
        let mut f = &a * sy.transpose() + &sy * a.transpose();
        let mut ps = Vec::with_capacity(w);
        for j in 0..w {
            let gj = head(&sd.gf[j * n..(j + 1) * n]);
            let cj = head(&sd.cy[j * n..(j + 1) * n]);
            f += &gj * cj.transpose() + &cj * gj.transpose() + &gj * gj.transpose();
            ps.push(&gj * sy.transpose() + &sy * gj.transpose());
        }
        phi.push(f);
        psi.push(ps);
    }
    Ok(TensorForcing { phi, psi })
}

/// Ensemble comparison of the outer product and the tensor recursion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorIdentity {
    pub dt: f64,
    /// `||E[Y (x) Y] - E[T]||_HS` per step.
    pub norms: Vec<f64>,
    /// Root-sum-square standard error of the two estimates, per step.
    pub stderrs: Vec<f64>,
    /// Largest norm and its step.
    pub discrepancy: f64,
    pub step_of_max: usize,
    pub stderr: f64,
}

impl TensorIdentity {
    /// Discrepancy within three standard errors.
    pub fn within_3_sigma(&self) -> bool {
        self.discrepancy <= 3.0 * self.stderr
    }
}

/// Estimates `max_k ||E_N[Y_k (x) Y_k] - E_N[T_k]||` over the ensemble.
pub fn tensor_identity_check(
    lc: &LiftedCoefficients,
    b: &VariationBundle,
    noise: &NoiseBank,
) -> Result<TensorIdentity> {
    let st = Stepper::new(lc, b, noise)?;
    let dim = st.dim;
    let np = b.particles();
    let kk = b.steps();
    let tri = dim * (dim + 1) / 2;
    let per_step = 4 * tri;
    let failed = std::sync::Mutex::new(None);
    let sums = par::accumulate(np, (kk + 1) * per_step, |i, acc| {
        let g = &st.g;
        let r = st.run(i, |k, m| {
            let y = whiten(g, b.lifted(Proc::Y, i, k));
            let a = &mut acc[k * per_step..(k + 1) * per_step];
            let mut e = 0;
            for r in 0..dim {
                for c in r..dim {
                    let outer = y[r] * y[c];
                    let mild = m[r * dim + c];
                    a[e] += outer;
                    a[tri + e] += mild;
                    a[2 * tri + e] += outer * outer;
                    a[3 * tri + e] += mild * mild;
                    e += 1;
                }
            }
        });
        if let Err(err) = r {
            let mut f = failed.lock().expect("poisoned");
            match &*f {
                Some((j, _)) if *j <= i => {}
                _ => *f = Some((i, err)),
            }
        }
    });
    if let Some((_, e)) = failed.into_inner().expect("poisoned") {
        return Err(e);
    }
    let nf = np as f64;
    let mut norms = Vec::with_capacity(kk + 1);
    let mut stderrs = Vec::with_capacity(kk + 1);
    for k in 0..=kk {
        let a = &sums[k * per_step..(k + 1) * per_step];
        let (mut d2, mut s2) = (0.0, 0.0);
        let mut e = 0;
        for r in 0..dim {
            for c in r..dim {
                let wgt = if r == c { 1.0 } else { 2.0 };
                let mo = a[e] / nf;
                let mm = a[tri + e] / nf;
                let vo = (a[2 * tri + e] / nf - mo * mo).max(0.0) / (nf - 1.0).max(1.0);
                let vm = (a[3 * tri + e] / nf - mm * mm).max(0.0) / (nf - 1.0).max(1.0);
                d2 += wgt * (mo - mm) * (mo - mm);
                s2 += wgt * (vo + vm);
                e += 1;
            }
        }
        norms.push(d2.sqrt());
        stderrs.push(s2.sqrt());
    }
    let (step_of_max, discrepancy) =
        norms
            .iter()
            .cloned()
            .enumerate()
            .fold((0, 0.0), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
    Ok(TensorIdentity {
        dt: b.ens.time.dt,
        stderr: stderrs[step_of_max],
        norms,
        stderrs,
        discrepancy,
        step_of_max,
    })
}

/// Refinement study over several time steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorRefinement {
    pub levels: Vec<TensorIdentity>,
    pub fit: Option<SlopeFit>,
    pub slope_band: (f64, f64),
    pub slope_pass: bool,
    pub finest_pass: bool,
}

impl TensorRefinement {
    pub fn from_levels(levels: Vec<TensorIdentity>) -> Self {
        let dts: Vec<f64> = levels.iter().map(|l| l.dt).collect();
        let vals: Vec<f64> = levels.iter().map(|l| l.discrepancy).collect();
        let fit = fit_loglog_slope(&dts, &vals).ok();
        let slope_band = (0.7, 1.3);
        let slope_pass = fit
            .as_ref()
            .is_some_and(|f| f.slope >= slope_band.0 && f.slope <= slope_band.1);
        let finest_pass = levels
            .iter()
            .min_by(|a, b| a.dt.total_cmp(&b.dt))
            .is_some_and(|l| l.within_3_sigma());
        Self {
            levels,
            fit,
            slope_band,
            slope_pass,
            finest_pass,
        }
    }

    pub fn pass(&self) -> bool {
        self.slope_pass && self.finest_pass
    }
}
