//! Discretized lifted state space `R^n x L^2([-d,0]; R^n)`.
//!
//! A lifted vector is stored as `m + 1` node blocks of length `n`.
//! Blocks `0..m` hold the segment samples at `theta_j = -d + j*dtheta`
//! (left-endpoint quadrature) and block `m` holds the head `x(0)`.
//! This matches the layout of a trajectory history window, so lifting a
//! path at step `k` is a plain slice copy.
//!
//! The inner product weights the head by one and every segment node by
//! `dtheta`. Operator-valued objects (second-order adjoints, tensors) use
//! whitened coordinates in which the segment nodes are scaled by
//! `sqrt(dtheta)`; there the adjoint of a matrix is its transpose.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};

/// Uniform grid on the delay interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentGrid {
    n: usize,
    m: usize,
    delay: f64,
    dtheta: f64,
}

impl SegmentGrid {
    pub fn new(n: usize, m: usize, delay: f64) -> Result<Self> {
        if n == 0 {
            return Err(arg_err("state dimension n must be positive"));
        }
        if m == 0 {
            return Err(arg_err("segment grid needs at least one node"));
        }
        if !(delay.is_finite() && delay > 0.0) {
            return Err(arg_err(format!("delay must be positive, got {delay}")));
        }
        Ok(Self {
            n,
            m,
            delay,
            dtheta: delay / m as f64,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn dtheta(&self) -> f64 {
        self.dtheta
    }

    /// Length of a flattened lifted vector.
    pub fn dim(&self) -> usize {
        (self.m + 1) * self.n
    }

    /// Offset of the head block inside a flattened lifted vector.
    pub fn head_offset(&self) -> usize {
        self.m * self.n
    }

    /// Position of segment node `j`.
    pub fn node(&self, j: usize) -> f64 {
        -self.delay + j as f64 * self.dtheta
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|j| self.node(j)).collect()
    }

    pub fn zero(&self) -> LiftedVector {
        LiftedVector {
            grid: *self,
            data: vec![0.0; self.dim()],
        }
    }

    pub fn check(&self, v: &LiftedVector) -> Result<()> {
        if v.grid != *self {
            return Err(dim_err("lifted vector belongs to a different grid"));
        }
        Ok(())
    }

    /// Embedding `G x = (x, 0)`.
    pub fn embed(&self, x: &[f64]) -> Result<LiftedVector> {
        if x.len() != self.n {
            return Err(dim_err(format!("expected {} components, got {}", self.n, x.len())));
        }
        let mut v = self.zero();
        v.head_mut().copy_from_slice(x);
        Ok(v)
    }

    /// Whitening scale for each flattened coordinate.
    pub fn whitening(&self) -> Vec<f64> {
        let s = self.dtheta.sqrt();
        let mut w = vec![s; self.dim()];
        for v in &mut w[self.head_offset()..] {
            *v = 1.0;
        }
        w
    }

    /// Matrix of `S_1` in whitened coordinates.
    pub fn shift_matrix_whitened(&self) -> DMatrix<f64> {
        let (n, m) = (self.n, self.m);
        let d = self.dim();
        let mut s = DMatrix::zeros(d, d);
        for b in 0..m {
            for i in 0..n {
                if b + 1 < m {
                    s[(b * n + i, (b + 1) * n + i)] = 1.0;
                } else {
                    s[(b * n + i, m * n + i)] = self.dtheta.sqrt();
                }
            }
        }
        for i in 0..n {
            s[(m * n + i, m * n + i)] = 1.0;
        }
        s
    }
}

/// Element of the discretized lifted space.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedVector {
    grid: SegmentGrid,
    data: Vec<f64>,
}

impl LiftedVector {
    /// Builds a vector from its head and row-major segment samples (`m*n`).
    pub fn new(grid: &SegmentGrid, head: &[f64], segment: &[f64]) -> Result<Self> {
        if head.len() != grid.n || segment.len() != grid.m * grid.n {
            return Err(dim_err(format!(
                "expected head of {} and segment of {} values, got {} and {}",
                grid.n,
                grid.m * grid.n,
                head.len(),
                segment.len()
            )));
        }
        let mut data = Vec::with_capacity(grid.dim());
        data.extend_from_slice(segment);
        data.extend_from_slice(head);
        Ok(Self { grid: *grid, data })
    }

    /// Wraps a flattened vector laid out as `[segment..., head]`.
    pub fn from_flat(grid: &SegmentGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.dim() {
            return Err(dim_err(format!("expected {} values, got {}", grid.dim(), data.len())));
        }
        Ok(Self { grid: *grid, data })
    }

    pub fn from_whitened(grid: &SegmentGrid, w: &[f64]) -> Result<Self> {
        if w.len() != grid.dim() {
            return Err(dim_err(format!("expected {} values, got {}", grid.dim(), w.len())));
        }
        let s = grid.dtheta.sqrt();
        let mut data = w.to_vec();
        for v in &mut data[..grid.head_offset()] {
            *v /= s;
        }
        Ok(Self { grid: *grid, data })
    }

    pub fn grid(&self) -> &SegmentGrid {
        &self.grid
    }

    pub fn head(&self) -> &[f64] {
        &self.data[self.grid.head_offset()..]
    }

    pub fn head_mut(&mut self) -> &mut [f64] {
        let o = self.grid.head_offset();
        &mut self.data[o..]
    }

    /// Row-major segment samples, node-major.
    pub fn segment(&self) -> &[f64] {
        &self.data[..self.grid.head_offset()]
    }

    pub fn segment_mut(&mut self) -> &mut [f64] {
        let o = self.grid.head_offset();
        &mut self.data[..o]
    }

    pub fn node(&self, j: usize) -> &[f64] {
        let n = self.grid.n;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn whitened(&self) -> Vec<f64> {
        let s = self.grid.dtheta.sqrt();
        let o = self.grid.head_offset();
        let mut w = self.data.clone();
        for v in &mut w[..o] {
            *v *= s;
        }
        w
    }

    pub fn inner(&self, other: &LiftedVector) -> Result<f64> {
        self.grid.check(other)?;
        Ok(inner_flat(&self.grid, &self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        inner_flat(&self.grid, &self.data, &self.data).sqrt()
    }

    /// Sup norm of the difference to another vector on the same grid.
    pub fn max_abs_diff(&self, other: &LiftedVector) -> Result<f64> {
        self.grid.check(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs())))
    }

    pub fn add_scaled(&mut self, a: f64, other: &LiftedVector) -> Result<()> {
        self.grid.check(other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn shift(&self, k: usize) -> LiftedVector {
        let mut out = self.grid.zero();
        shift_flat(&self.grid, k, &self.data, &mut out.data);
        out
    }

    pub fn shift_adjoint(&self, k: usize) -> LiftedVector {
        let mut out = self.grid.zero();
        shift_adjoint_flat(&self.grid, k, &self.data, &mut out.data);
        out
    }

    /// Projection onto the head, the adjoint of the embedding.
    pub fn project_head(&self) -> Vec<f64> {
        self.head().to_vec()
    }
}

/// Weighted inner product of two flattened vectors.
pub fn inner_flat(grid: &SegmentGrid, x: &[f64], y: &[f64]) -> f64 {
    let o = grid.head_offset();
    let seg: f64 = x[..o].iter().zip(&y[..o]).map(|(a, b)| a * b).sum();
    let head: f64 = x[o..].iter().zip(&y[o..]).map(|(a, b)| a * b).sum();
    head + grid.dtheta * seg
}

/// `out = S_k x` on flattened vectors.
pub fn shift_flat(grid: &SegmentGrid, k: usize, x: &[f64], out: &mut [f64]) {
    let (n, m) = (grid.n, grid.m);
    for j in 0..=m {
        let src = if j == m { m } else { (j + k).min(m) };
        out[j * n..(j + 1) * n].copy_from_slice(&x[src * n..(src + 1) * n]);
    }
}

/// `out = S_k^* y` on flattened vectors.
pub fn shift_adjoint_flat(grid: &SegmentGrid, k: usize, y: &[f64], out: &mut [f64]) {
    let (n, m) = (grid.n, grid.m);
    let o = grid.head_offset();
    out[o..].copy_from_slice(&y[o..]);
    for j in m.saturating_sub(k)..m {
        for i in 0..n {
            out[o + i] += grid.dtheta * y[j * n + i];
        }
    }
    for j in 0..m {
        for i in 0..n {
            out[j * n + i] = if j >= k { y[(j - k) * n + i] } else { 0.0 };
        }
    }
}

/// Scalar weight function on the segment grid, applied componentwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayKernel {
    values: Vec<f64>,
}

impl DelayKernel {
    pub fn zero(grid: &SegmentGrid) -> Self {
        Self {
            values: vec![0.0; grid.m],
        }
    }

    pub fn from_fn(grid: &SegmentGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: grid.nodes().into_iter().map(f).collect(),
        }
    }

    pub fn from_values(grid: &SegmentGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.m {
            return Err(dim_err(format!("kernel needs {} values, got {}", grid.m, values.len())));
        }
        Ok(Self { values })
    }

    /// Discrete point evaluation at `theta = -d`.
    pub fn point_at_delay(grid: &SegmentGrid) -> Self {
        let mut values = vec![0.0; grid.m];
        values[0] = 1.0 / grid.dtheta;
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// `out_i = dtheta * sum_j f_j seg_{j,i}` for a row-major segment.
    pub fn pair_into(&self, grid: &SegmentGrid, seg: &[f64], out: &mut [f64]) {
        let n = grid.n;
        out[..n].fill(0.0);
        for (j, f) in self.values.iter().enumerate() {
            if *f != 0.0 {
                let row = &seg[j * n..(j + 1) * n];
                for i in 0..n {
                    out[i] += f * row[i];
                }
            }
        }
        for v in &mut out[..n] {
            *v *= grid.dtheta;
        }
    }

    pub fn pairing(&self, v: &LiftedVector) -> Vec<f64> {
        let mut out = vec![0.0; v.grid.n];
        self.pair_into(&v.grid, v.segment(), &mut out);
        out
    }

    /// Accumulates the Riesz representer of `c . I(z)` into a flattened vector:
    /// segment node `j` receives `f_j * c`.
    pub fn add_representer(&self, grid: &SegmentGrid, c: &[f64], out: &mut [f64]) {
        let n = grid.n;
        for (j, f) in self.values.iter().enumerate() {
            if *f != 0.0 {
                for i in 0..n {
                    out[j * n + i] += f * c[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g(n: usize, m: usize, d: f64) -> SegmentGrid {
        SegmentGrid::new(n, m, d).unwrap()
    }

    #[test]
    fn inner_product_weights_nodes() {
        let gr = g(1, 2, 1.0);
        let x = LiftedVector::new(&gr, &[1.0], &[0.0, 0.0]).unwrap();
        let y = LiftedVector::new(&gr, &[2.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(x.inner(&y).unwrap(), 2.0);
        let x = LiftedVector::new(&gr, &[0.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(x.inner(&x).unwrap(), 1.0);
    }

    #[test]
    fn shift_moves_head_into_segment() {
        let gr = g(1, 2, 1.0);
        let x = LiftedVector::new(&gr, &[5.0], &[1.0, 2.0]).unwrap();
        let s = x.shift(1);
        assert_eq!(s.head(), &[5.0]);
        assert_eq!(s.segment(), &[2.0, 5.0]);
        let s3 = x.shift(3);
        assert_eq!(s3.segment(), &[5.0, 5.0]);
        assert_eq!(x.shift(0), x);
    }

    #[test]
    fn shift_adjoint_example() {
        let gr = g(1, 2, 1.0);
        let y = LiftedVector::new(&gr, &[0.0], &[0.0, 1.0]).unwrap();
        let a = y.shift_adjoint(1);
        assert_abs_diff_eq!(a.head()[0], 0.5);
        assert_eq!(a.segment(), &[0.0, 0.0]);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let a = g(1, 2, 1.0).zero();
        let b = g(1, 3, 1.0).zero();
        assert!(matches!(a.inner(&b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(SegmentGrid::new(0, 2, 1.0).is_err());
        assert!(SegmentGrid::new(1, 0, 1.0).is_err());
        assert!(SegmentGrid::new(1, 2, 0.0).is_err());
    }

    #[test]
    fn whitened_shift_matrix_matches_shift() {
        let gr = g(2, 3, 0.6);
        let x = LiftedVector::new(&gr, &[1.0, -2.0], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let s = gr.shift_matrix_whitened();
        let xw = nalgebra::DVector::from_vec(x.whitened());
        let sx = LiftedVector::from_whitened(&gr, (s * xw).as_slice()).unwrap();
        assert!(sx.max_abs_diff(&x.shift(1)).unwrap() < 1e-14);
    }

    #[test]
    fn kernel_pairing_and_representer_agree() {
        let gr = g(2, 4, 1.0);
        let f = DelayKernel::from_fn(&gr, |t| (2.0 * t).exp());
        let x = LiftedVector::new(&gr, &[0.0, 0.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = [0.7, -1.3];
        let mut r = gr.zero().into_flat();
        f.add_representer(&gr, &c, &mut r);
        let r = LiftedVector::from_flat(&gr, r).unwrap();
        let i = f.pairing(&x);
        assert_abs_diff_eq!(r.inner(&x).unwrap(), c[0] * i[0] + c[1] * i[1], epsilon = 1e-12);
    }
}
