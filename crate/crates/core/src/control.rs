//! Time grid, admissible sets and open-loop controls.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Uniform time grid `t_k = k * dt`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Grid on `[0, horizon]` with the given step, which must divide the horizon.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && horizon > 0.0) {
            return Err(arg_err("time step and horizon must be positive"));
        }
        let steps = steps_of(horizon, dt)
            .ok_or_else(|| arg_err(format!("time step {dt} does not divide horizon {horizon}")))?;
        Ok(Self { dt, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Number of steps of length `dt` in `len`, if it is an integer.
pub fn steps_of(len: f64, dt: f64) -> Option<usize> {
    let r = len / dt;
    let k = r.round();
    if (r - k).abs() <= 1e-9 * k.max(1.0) && k >= 0.0 {
        Some(k as usize)
    } else {
        None
    }
}

/// Admissible control set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissibleSet {
    Points(Vec<Vec<f64>>),
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl AdmissibleSet {
    pub fn contains(&self, u: &[f64]) -> bool {
        match self {
            AdmissibleSet::Points(ps) => ps.iter().any(|p| p.as_slice() == u),
            AdmissibleSet::Box { lo, hi } => {
                u.len() == lo.len() && u.iter().zip(lo.iter().zip(hi)).all(|(x, (a, b))| *a <= *x && *x <= *b)
            }
        }
    }

    /// Finite list of points, if the set is finite.
    pub fn points(&self) -> Option<&[Vec<f64>]> {
        match self {
            AdmissibleSet::Points(ps) => Some(ps),
            AdmissibleSet::Box { .. } => None,
        }
    }
}

/// Deterministic control sampled at the left endpoint of each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    k: usize,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn constant(u: &[f64], steps: usize) -> Self {
        let mut values = Vec::with_capacity(u.len() * steps);
        for _ in 0..steps {
            values.extend_from_slice(u);
        }
        Self { k: u.len(), values }
    }

    /// Equal-length pieces covering all steps.
    pub fn piecewise(pieces: &[Vec<f64>], steps: usize) -> Result<Self> {
        let p = pieces.len();
        if p == 0 || !steps.is_multiple_of(p) {
            return Err(arg_err(format!("{p} control pieces do not divide {steps} steps")));
        }
        let k = pieces[0].len();
        if pieces.iter().any(|u| u.len() != k) {
            return Err(arg_err("control pieces have different dimensions"));
        }
        let per = steps / p;
        let mut values = Vec::with_capacity(k * steps);
        for s in 0..steps {
            values.extend_from_slice(&pieces[s / per]);
        }
        Ok(Self { k, values })
    }

    pub fn from_values(k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || !values.len().is_multiple_of(k) {
            return Err(arg_err("control values do not match control dimension"));
        }
        Ok(Self { k, values })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn at(&self, step: usize) -> &[f64] {
        &self.values[step * self.k..(step + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn check_admissible(&self, set: &AdmissibleSet) -> Result<()> {
        for s in 0..self.steps() {
            if !set.contains(self.at(s)) {
                return Err(arg_err(format!(
                    "control value {:?} at step {s} is not admissible",
                    self.at(s)
                )));
            }
        }
        Ok(())
    }

    /// Needle perturbation equal to `v` on `[tau, tau + eps)`.
    pub fn spike(
        &self,
        grid: &TimeGrid,
        v: &[f64],
        tau: f64,
        eps: f64,
        set: &AdmissibleSet,
    ) -> Result<(Self, SpikeWindow)> {
        let w = SpikeWindow::new(grid, tau, eps)?;
        if w.end() > self.steps() {
            return Err(arg_err(format!(
                "spike window [{tau}, {}) leaves the horizon",
                tau + eps
            )));
        }
        if v.len() != self.k {
            return Err(arg_err("spike value has the wrong dimension"));
        }
        if !set.contains(v) {
            return Err(arg_err(format!("spike value {v:?} is not admissible")));
        }
        let mut out = self.clone();
        for s in w.start..w.end() {
            out.values[s * self.k..(s + 1) * self.k].copy_from_slice(v);
        }
        Ok((out, w))
    }
}

/// Steps `start..start + len` covered by a needle perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeWindow {
    pub start: usize,
    pub len: usize,
}

impl SpikeWindow {
    pub fn new(grid: &TimeGrid, tau: f64, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(arg_err("spike width must be positive"));
        }
        if tau < 0.0 {
            return Err(arg_err("spike start must be non-negative"));
        }
        let start =
            steps_of(tau, grid.dt).ok_or_else(|| arg_err(format!("spike start {tau} is not on the time grid")))?;
        let len = steps_of(eps, grid.dt).filter(|l| *l > 0).ok_or_else(|| {
            arg_err(format!(
                "spike width {eps} is not a multiple of the time step {}",
                grid.dt
            ))
        })?;
        if start + len > grid.steps {
            return Err(arg_err(format!(
                "spike window [{tau}, {}) leaves the horizon",
                tau + eps
            )));
        }
        Ok(Self { start, len })
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, step: usize) -> bool {
        step >= self.start && step < self.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_replaces_window() {
        let g = TimeGrid::new(1.0, 0.125).unwrap();
        let u = ControlPath::constant(&[0.0], g.steps);
        let set = AdmissibleSet::Points(vec![vec![0.0], vec![1.0]]);
        let (s, w) = u.spike(&g, &[1.0], 0.25, 0.25, &set).unwrap();
        assert_eq!(w, SpikeWindow { start: 2, len: 2 });
        let v: Vec<f64> = (0..8).map(|k| s.at(k)[0]).collect();
        assert_eq!(v, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn spike_errors() {
        let g = TimeGrid::new(1.0, 0.125).unwrap();
        let u = ControlPath::constant(&[0.0], g.steps);
        let set = AdmissibleSet::Points(vec![vec![0.0], vec![1.0]]);
        assert!(u.spike(&g, &[1.0], 0.25, 0.1, &set).is_err());
        assert!(u.spike(&g, &[1.0], 0.875, 0.25, &set).is_err());
        assert!(u.spike(&g, &[2.0], 0.25, 0.25, &set).is_err());
    }

    #[test]
    fn piecewise_and_box() {
        let u = ControlPath::piecewise(&[vec![1.0], vec![-1.0]], 4).unwrap();
        assert_eq!(u.values(), &[1.0, 1.0, -1.0, -1.0]);
        assert!(ControlPath::piecewise(&vec![vec![1.0]; 3], 4).is_err());
        let b = AdmissibleSet::Box {
            lo: vec![-1.0],
            hi: vec![1.0],
        };
        assert!(u.check_admissible(&b).is_ok());
        assert!(!b.contains(&[1.5]));
    }
}
