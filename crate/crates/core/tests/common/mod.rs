#![allow(dead_code)]

use std::sync::Arc;

use mfdelay::harness::config::{parse_configs, ExperimentConfig, Instance};
use mfdelay::model::{Args, Coefficients, ModelDims, Slot};

/// Scalar model `dx = (a x + bu u) dt + s0 dW` with running cost `l0`
/// and no terminal cost.
#[derive(Clone, Debug)]
pub struct Toy {
    pub a: f64,
    pub bu: f64,
    pub s0: f64,
    pub l0: f64,
}

impl Coefficients for Toy {
    fn name(&self) -> &str {
        "toy"
    }
    fn dims(&self) -> ModelDims {
        ModelDims { n: 1, w: 1, k: 1 }
    }
    fn drift(&self, _t: f64, a: &Args, u: &[f64], out: &mut [f64]) {
        out[0] = self.a * a.x[0] + self.bu * u[0];
    }
    fn diffusion(&self, _t: f64, _a: &Args, _u: &[f64], out: &mut [f64]) {
        out[0] = self.s0;
    }
    fn running_cost(&self, _t: f64, _a: &Args, _u: &[f64]) -> f64 {
        self.l0
    }
    fn terminal_cost(&self, _a: &Args) -> f64 {
        0.0
    }
    fn drift_d1(&self, _t: f64, _a: &Args, _u: &[f64], s: Slot, out: &mut [f64]) {
        out[0] = if s == Slot::X { self.a } else { 0.0 };
    }
    fn diffusion_d1(&self, _t: f64, _a: &Args, _u: &[f64], _s: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn running_cost_d1(&self, _t: f64, _a: &Args, _u: &[f64], _s: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_cost_d1(&self, _a: &Args, _s: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_d2(&self, _t: f64, _a: &Args, _u: &[f64], _s1: Slot, _s2: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_d2(&self, _t: f64, _a: &Args, _u: &[f64], _s1: Slot, _s2: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn running_cost_d2(&self, _t: f64, _a: &Args, _u: &[f64], _s1: Slot, _s2: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_cost_d2(&self, _a: &Args, _s1: Slot, _s2: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn deterministic_derivatives(&self) -> bool {
        true
    }
}

pub fn toy(a: f64, bu: f64, s0: f64, l0: f64) -> Arc<dyn Coefficients> {
    Arc::new(Toy { a, bu, s0, l0 })
}

pub fn config(value: serde_json::Value) -> ExperimentConfig {
    parse_configs(&value.to_string()).expect("valid config").remove(0)
}

pub fn instance(value: serde_json::Value) -> (ExperimentConfig, Instance) {
    let cfg = config(value);
    let inst = cfg.instance(None).expect("instance builds");
    (cfg, inst)
}

/// Small LQ delay experiment with kernels on every state coefficient.
pub fn lq_delay(particles: usize, params: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "name": "t",
        "model": "lq_delay",
        "params": params,
        "grid": {"n": 1, "w": 1, "m": 8, "delay": 0.25, "horizon": 0.5},
        "particles": particles,
        "seed": 3,
        "initial": [0.5],
        "kernels": {"state": ["uniform", "uniform", "uniform", "uniform"],
                    "mean": ["uniform", "uniform", "zero", "zero"]},
        "spike": {"v": [1.0], "tau": 0.125, "eps": [0.03125, 0.0625, 0.125]}
    })
}
