//! JSON experiment configuration.
//!
//! A file holds either one experiment or `{"experiments": [...]}`. Every
//! field except `name` and `model` has a default; unknown fields are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::AdjointOptions;
use crate::control::{steps_of, AdmissibleSet, ControlPath, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::InitialSegment;
use crate::model::{builtin, KernelSet, LiftedCoefficients};
use crate::noise::NoiseBank;
use crate::regression::Basis;
use crate::segment::{DelayKernel, SegmentGrid};
use crate::tensor::MAX_TENSOR_DIM;

use super::Pipeline;

/// Discretization of the state and the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub w: usize,
    pub m: usize,
    pub delay: f64,
    pub horizon: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n: 1,
            w: 1,
            m: 8,
            delay: 0.25,
            horizon: 0.5,
        }
    }
}

impl GridSpec {
    pub fn dt(&self) -> f64 {
        self.delay / self.m as f64
    }
}

/// Shape of one delay kernel on `[-d, 0]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    #[default]
    Zero,
    /// Constant density `1/d`.
    Uniform,
    /// Unit mass at `theta = -d`.
    PointAtDelay,
    /// `rate * exp(rate * theta) / (1 - exp(-rate * d))`.
    Exponential { rate: f64 },
}

impl KernelSpec {
    fn build(&self, g: &SegmentGrid) -> Result<DelayKernel> {
        let d = g.delay();
        Ok(match self {
            KernelSpec::Zero => DelayKernel::zero(g),
            KernelSpec::Uniform => DelayKernel::from_fn(g, |_| 1.0 / d),
            KernelSpec::PointAtDelay => DelayKernel::point_at_delay(g),
            KernelSpec::Exponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::Config(format!(
                        "exponential kernel rate {rate} must be positive"
                    )));
                }
                let z = 1.0 - (-rate * d).exp();
                DelayKernel::from_fn(g, |th| rate * (rate * th).exp() / z)
            }
        })
    }
}

/// Kernels in the order drift, diffusion, running cost, terminal cost.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsSpec {
    #[serde(default)]
    pub state: [KernelSpec; 4],
    #[serde(default)]
    pub mean: [KernelSpec; 4],
}

/// Which property of the second-order identity decides the check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrderCheck {
    /// Leading-order residual slope in `eps` above one.
    Decay,
    /// Leading-order match at the smallest width.
    Leading,
}

/// Reference control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSpec {
    Constant(Vec<f64>),
    /// Equal-length constant pieces.
    Piecewise(Vec<Vec<f64>>),
}

/// Needle perturbation and the widths it is probed at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSpec {
    pub v: Vec<f64>,
    pub tau: f64,
    pub eps: Vec<f64>,
}

/// Settings of the tensor refinement study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    /// Node counts of the refinement levels; the delay is kept fixed.
    pub levels: Vec<usize>,
    pub tau: f64,
    pub eps: f64,
}

/// One experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: String,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub seed: u64,
    /// Constant initial segment; zero when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Zero control when absent.
    #[serde(default)]
    pub control: Option<ControlSpec>,
    /// `{0, 1}` in every control coordinate when absent.
    #[serde(default)]
    pub admissible: Option<AdmissibleSet>,
    #[serde(default)]
    pub kernels: KernelsSpec,
    #[serde(default)]
    pub spike: Option<SpikeSpec>,
    #[serde(default)]
    pub basis: Basis,
    #[serde(default)]
    pub picard: AdjointOptions,
    /// Pipelines run by `all`.
    #[serde(default)]
    pub checks: Vec<Pipeline>,
    /// Verdict of the second-order identity run by `duality`, if any.
    #[serde(default)]
    pub second_order: Option<SecondOrderCheck>,
    /// Terminal steps of the dual family checked by `duality`.
    #[serde(default)]
    pub dual_family_steps: Vec<usize>,
    /// Number of control pieces searched by `smp-check`.
    #[serde(default = "default_pieces")]
    pub smp_pieces: usize,
    #[serde(default)]
    pub tensor: Option<TensorSpec>,
    /// Moment index of the order probe.
    #[serde(default = "default_moment")]
    pub order_moment: u32,
}

fn default_particles() -> usize {
    10_000
}

fn default_pieces() -> usize {
    4
}

fn default_moment() -> u32 {
    1
}

/// Parses a configuration document.
pub fn parse_configs(text: &str) -> Result<Vec<ExperimentConfig>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let list = if value.get("experiments").is_some() {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Many {
            experiments: Vec<ExperimentConfig>,
        }
        serde_json::from_value::<Many>(value)
            .map_err(|e| Error::Config(e.to_string()))?
            .experiments
    } else {
        vec![serde_json::from_value::<ExperimentConfig>(value).map_err(|e| Error::Config(e.to_string()))?]
    };
    if list.is_empty() {
        return Err(Error::Config("no experiments in configuration".into()));
    }
    let mut names: Vec<&str> = list.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("experiment names must be unique".into()));
    }
    for c in &list {
        c.validate()?;
    }
    Ok(list)
}

pub fn load_configs(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let text = std::fs::read_to_string(path)?;
    parse_configs(&text)
}

fn on_grid(what: &str, x: f64, dt: f64) -> Result<usize> {
    steps_of(x, dt).ok_or_else(|| Error::Config(format!("{what} {x} is not a multiple of the time step {dt}")))
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks the configuration without running anything.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("experiment `{}`: {m}", self.name)));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad("name must be non-empty and use only letters, digits, `_` or `-`".into());
        }
        let g = &self.grid;
        if g.n == 0 || g.w == 0 || g.m == 0 {
            return bad("grid sizes must be positive".into());
        }
        if !(g.delay > 0.0 && g.horizon > 0.0) {
            return bad("delay and horizon must be positive".into());
        }
        let dt = g.dt();
        let steps = on_grid("horizon", g.horizon, dt)?;
        if self.particles < 2 {
            return bad("at least two particles are needed".into());
        }
        let model = builtin::build(&self.model, &self.params, g.n, g.horizon)?;
        let d = model.dims();
        if d.w != g.w {
            return bad(format!(
                "model `{}` has {} noise columns, grid says {}",
                self.model, d.w, g.w
            ));
        }
        if let Some(x) = &self.initial {
            if x.len() != g.n {
                return bad("initial value has the wrong dimension".into());
            }
        }
        let set = self.admissible_set(d.k);
        match &self.control {
            Some(ControlSpec::Constant(u)) if u.len() != d.k => return bad("control has the wrong dimension".into()),
            Some(ControlSpec::Piecewise(p)) if p.is_empty() || p.iter().any(|u| u.len() != d.k) => {
                return bad("piecewise control pieces have the wrong dimension".into())
            }
            Some(ControlSpec::Piecewise(p)) if steps % p.len() != 0 => {
                return bad("piece count must divide the number of steps".into())
            }
            _ => {}
        }
        if let Some(s) = &self.spike {
            if s.v.len() != d.k || !set.contains(&s.v) {
                return bad(format!("spike value {:?} is not admissible", s.v));
            }
            let start = on_grid("spike start", s.tau, dt)?;
            for &e in &s.eps {
                let l = on_grid("spike width", e, dt)?;
                if l == 0 || start + l > steps {
                    return bad(format!("spike [{}, {}) does not fit the horizon", s.tau, s.tau + e));
                }
            }
        }
        let needs_spike = [Pipeline::Orders, Pipeline::Duality, Pipeline::CostExpansion];
        if let Some(p) = self.checks.iter().find(|p| needs_spike.contains(p)) {
            match &self.spike {
                Some(s) if s.eps.len() >= 3 || *p == Pipeline::Duality && !s.eps.is_empty() => {}
                _ => return bad(format!("pipeline {} needs a spike with enough widths", p.name())),
            }
        }
        if self.checks.contains(&Pipeline::All) {
            return bad("`all` cannot be listed as a check".into());
        }
        if self.checks.contains(&Pipeline::Tensor) {
            let Some(t) = &self.tensor else {
                return bad("pipeline tensor needs a `tensor` section".into());
            };
            if t.levels.len() < 3 {
                return bad("the tensor refinement needs at least three levels".into());
            }
            for &m in &t.levels {
                if (m + 1) * g.n > MAX_TENSOR_DIM {
                    return bad(format!(
                        "tensor level m={m} exceeds the dimension limit {MAX_TENSOR_DIM}"
                    ));
                }
                let dtl = g.delay / m as f64;
                let st = on_grid("horizon", g.horizon, dtl)?;
                let a = on_grid("tensor spike start", t.tau, dtl)?;
                let b = on_grid("tensor spike width", t.eps, dtl)?;
                if b == 0 || a + b > st {
                    return bad("tensor spike does not fit the horizon".into());
                }
            }
            if self.spike.as_ref().is_none_or(|s| s.v.is_empty()) {
                return bad("pipeline tensor takes the spike value from `spike.v`".into());
            }
        }
        if self.checks.contains(&Pipeline::SmpCheck) {
            if set.points().is_none_or(|p| p.len() < 2) {
                return bad("smp-check needs a finite admissible set with two or more points".into());
            }
            if self.smp_pieces == 0 || steps % self.smp_pieces != 0 || steps / self.smp_pieces < 3 {
                return bad("smp pieces must divide the steps into pieces of three or more steps".into());
            }
        }
        for &s in &self.dual_family_steps {
            if s == 0 || s > steps {
                return bad(format!("dual family step {s} is outside 1..={steps}"));
            }
        }
        Ok(())
    }

    pub fn admissible_set(&self, k: usize) -> AdmissibleSet {
        self.admissible.clone().unwrap_or_else(|| {
            if k == 1 {
                AdmissibleSet::Points(vec![vec![0.0], vec![1.0]])
            } else {
                AdmissibleSet::Box {
                    lo: vec![0.0; k],
                    hi: vec![1.0; k],
                }
            }
        })
    }

    /// Builds the simulation inputs, optionally with another node count.
    pub fn instance(&self, m: Option<usize>) -> Result<Instance> {
        let mut gs = self.grid.clone();
        if let Some(m) = m {
            gs.m = m;
        }
        let grid = SegmentGrid::new(gs.n, gs.m, gs.delay)?;
        let model = builtin::build(&self.model, &self.params, gs.n, gs.horizon)?;
        let k = model.dims().k;
        let mut ks = KernelSet::zero(&grid);
        for (dst, spec) in ks.state.iter_mut().zip(&self.kernels.state) {
            *dst = spec.build(&grid)?;
        }
        for (dst, spec) in ks.mean.iter_mut().zip(&self.kernels.mean) {
            *dst = spec.build(&grid)?;
        }
        let lc = LiftedCoefficients::new(model, ks, grid)?;
        let time = TimeGrid::new(gs.horizon, gs.dt())?;
        let x0 = self.initial.clone().unwrap_or_else(|| vec![0.0; gs.n]);
        let xi = InitialSegment::constant(&grid, &x0);
        let control = match &self.control {
            None => ControlPath::constant(&vec![0.0; k], time.steps),
            Some(ControlSpec::Constant(u)) => ControlPath::constant(u, time.steps),
            Some(ControlSpec::Piecewise(p)) => ControlPath::piecewise(p, time.steps)?,
        };
        let set = self.admissible_set(k);
        control.check_admissible(&set)?;
        let noise = NoiseBank::new(self.seed, self.particles, &time, gs.w)?;
        Ok(Instance {
            lc,
            time,
            xi,
            control,
            set,
            noise,
        })
    }
}

/// Everything a pipeline needs to simulate.
pub struct Instance {
    pub lc: LiftedCoefficients,
    pub time: TimeGrid,
    pub xi: InitialSegment,
    pub control: ControlPath,
    pub set: AdmissibleSet,
    pub noise: NoiseBank,
}
