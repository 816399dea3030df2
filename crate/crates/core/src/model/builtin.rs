//! Built-in coefficient models.
//!
//! All models act componentwise: component `i` of the state only sees
//! component `i` of its delay pairing and of the mean, the noise is
//! diagonal (`w = n`) and a single scalar control enters every component.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Args, Coefficients, ModelDims, Slot};
use crate::error::{Error, Result};

/// Piecewise-constant linear tilt `c(t) u` of the running cost.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    pub horizon: f64,
    pub values: Vec<f64>,
}

impl Tilt {
    pub fn at(&self, t: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let p = self.values.len();
        let idx = ((t / self.horizon) * p as f64 + 1e-9).floor();
        self.values[(idx.max(0.0) as usize).min(p - 1)]
    }
}

/// Parameters of the linear-quadratic delay model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqParams {
    pub a: f64,
    pub a1: f64,
    pub bu: f64,
    pub s0: f64,
    pub s1: f64,
    pub s1t: f64,
    pub su: f64,
    pub sxu: f64,
    pub q: f64,
    pub qt: f64,
    pub r: f64,
    pub g: f64,
    pub g1: f64,
    pub gt: f64,
    /// Strength of every mean-field term.
    pub coupling: f64,
    pub ay: f64,
    pub ayt: f64,
    pub sy: f64,
    pub qy: f64,
    pub gy: f64,
    pub gy1: f64,
    pub tilt: Vec<f64>,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a: -0.5,
            a1: 0.3,
            bu: 1.0,
            s0: 0.3,
            s1: 0.2,
            s1t: 0.0,
            su: 0.0,
            sxu: 0.0,
            q: 1.0,
            qt: 0.0,
            r: 0.1,
            g: 1.0,
            g1: 0.0,
            gt: 0.0,
            coupling: 0.0,
            ay: 1.0,
            ayt: 0.0,
            sy: 0.0,
            qy: 1.0,
            gy: 1.0,
            gy1: 0.0,
            tilt: Vec::new(),
        }
    }
}

/// Linear dynamics with quadratic costs, optionally with mean-field terms.
#[derive(Clone, Debug)]
pub struct LinearQuadratic {
    name: String,
    n: usize,
    p: LqParams,
    tilt: Tilt,
}

impl LinearQuadratic {
    pub fn new(name: &str, n: usize, p: LqParams, horizon: f64) -> Self {
        let tilt = Tilt {
            horizon,
            values: p.tilt.clone(),
        };
        Self {
            name: name.to_string(),
            n,
            p,
            tilt,
        }
    }

    pub fn params(&self) -> &LqParams {
        &self.p
    }
}

fn diag(out: &mut [f64], n: usize, v: impl Fn(usize) -> f64) {
    out.fill(0.0);
    for i in 0..n {
        out[i * n + i] = v(i);
    }
}

fn diag3(out: &mut [f64], n: usize, v: impl Fn(usize) -> f64) {
    out.fill(0.0);
    for i in 0..n {
        out[(i * n + i) * n + i] = v(i);
    }
}

impl Coefficients for LinearQuadratic {
    fn name(&self) -> &str {
        &self.name
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            n: self.n,
            w: self.n,
            k: 1,
        }
    }

    fn drift(&self, _t: f64, a: &Args, u: &[f64], out: &mut [f64]) {
        let p = &self.p;
        for i in 0..self.n {
            out[i] = p.a * a.x[i] + p.a1 * a.xt[i] + p.bu * u[0] + p.coupling * (p.ay * a.y[i] + p.ayt * a.yt[i]);
        }
    }

    fn diffusion(&self, _t: f64, a: &Args, u: &[f64], out: &mut [f64]) {
        let p = &self.p;
        diag(out, self.n, |i| {
            p.s0 + p.s1 * a.x[i] + p.s1t * a.xt[i] + p.su * u[0] + p.sxu * u[0] * a.x[i] + p.coupling * p.sy * a.y[i]
        });
    }

    fn running_cost(&self, t: f64, a: &Args, u: &[f64]) -> f64 {
        let p = &self.p;
        let mut s = 0.5 * p.r * u[0] * u[0] + self.tilt.at(t) * u[0];
        for i in 0..self.n {
            s += 0.5 * p.q * a.x[i] * a.x[i]
                + 0.5 * p.qt * a.xt[i] * a.xt[i]
                + 0.5 * p.coupling * p.qy * a.y[i] * a.y[i];
        }
        s
    }

    fn terminal_cost(&self, a: &Args) -> f64 {
        let p = &self.p;
        let mut s = 0.0;
        for i in 0..self.n {
            s += 0.5 * p.g * a.x[i] * a.x[i] + p.g1 * a.x[i] + 0.5 * p.gt * a.xt[i] * a.xt[i];
            s += p.coupling * (0.5 * p.gy * a.y[i] * a.y[i] + p.gy1 * a.y[i]);
        }
        s
    }

    fn drift_d1(&self, _t: f64, _a: &Args, _u: &[f64], s: Slot, out: &mut [f64]) {
        let p = &self.p;
        let v = match s {
            Slot::X => p.a,
            Slot::Xt => p.a1,
            Slot::Y => p.coupling * p.ay,
            Slot::Yt => p.coupling * p.ayt,
        };
        diag(out, self.n, |_| v);
    }

    fn diffusion_d1(&self, _t: f64, _a: &Args, u: &[f64], s: Slot, out: &mut [f64]) {
        let p = &self.p;
        let v = match s {
            Slot::X => p.s1 + p.sxu * u[0],
            Slot::Xt => p.s1t,
            Slot::Y => p.coupling * p.sy,
            Slot::Yt => 0.0,
        };
        diag3(out, self.n, |_| v);
    }

    fn running_cost_d1(&self, _t: f64, a: &Args, _u: &[f64], s: Slot, out: &mut [f64]) {
        let p = &self.p;
        for i in 0..self.n {
            out[i] = match s {
                Slot::X => p.q * a.x[i],
                Slot::Xt => p.qt * a.xt[i],
                Slot::Y => p.coupling * p.qy * a.y[i],
                Slot::Yt => 0.0,
            };
        }
    }

    fn terminal_cost_d1(&self, a: &Args, s: Slot, out: &mut [f64]) {
        let p = &self.p;
        for i in 0..self.n {
            out[i] = match s {
                Slot::X => p.g * a.x[i] + p.g1,
                Slot::Xt => p.gt * a.xt[i],
                Slot::Y => p.coupling * (p.gy * a.y[i] + p.gy1),
                Slot::Yt => 0.0,
            };
        }
    }

    fn drift_d2(&self, _t: f64, _a: &Args, _u: &[f64], _s1: Slot, _s2: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_d2(&self, _t: f64, _a: &Args, _u: &[f64], _s1: Slot, _s2: Slot, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn running_cost_d2(&self, _t: f64, _a: &Args, _u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]) {
        let v = match (s1, s2) {
            (Slot::X, Slot::X) => self.p.q,
            (Slot::Xt, Slot::Xt) => self.p.qt,
            _ => 0.0,
        };
        diag(out, self.n, |_| v);
    }

    fn terminal_cost_d2(&self, _a: &Args, s1: Slot, s2: Slot, out: &mut [f64]) {
        let v = match (s1, s2) {
            (Slot::X, Slot::X) => self.p.g,
            (Slot::Xt, Slot::Xt) => self.p.gt,
            _ => 0.0,
        };
        diag(out, self.n, |_| v);
    }

    fn deterministic_derivatives(&self) -> bool {
        true
    }
}

/// Parameters of the smooth nonlinear model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothParams {
    pub a: f64,
    pub a1: f64,
    pub ay: f64,
    pub ayt: f64,
    pub bu: f64,
    pub bxu: f64,
    pub s0: f64,
    pub s1: f64,
    pub sy: f64,
    pub su: f64,
    pub sxu: f64,
    pub q: f64,
    pub qt: f64,
    pub qy: f64,
    pub r: f64,
    pub g: f64,
    pub gt: f64,
    pub gy: f64,
    pub g1: f64,
    pub tilt: Vec<f64>,
}

impl Default for SmoothParams {
    fn default() -> Self {
        Self {
            a: -1.0,
            a1: 0.5,
            ay: 0.5,
            ayt: 0.2,
            bu: 1.0,
            bxu: 0.5,
            s0: 0.4,
            s1: 0.2,
            sy: 0.1,
            su: 0.1,
            sxu: 0.3,
            q: 1.0,
            qt: 0.3,
            qy: 0.5,
            r: 0.1,
            g: 1.0,
            gt: 0.2,
            gy: 0.5,
            g1: 0.1,
            tilt: Vec::new(),
        }
    }
}

/// Bounded nonlinear dynamics built from `tanh` with `log cosh` costs.
#[derive(Clone, Debug)]
pub struct SmoothNonlinear {
    n: usize,
    p: SmoothParams,
    tilt: Tilt,
}

impl SmoothNonlinear {
    pub fn new(n: usize, p: SmoothParams, horizon: f64) -> Self {
        let tilt = Tilt {
            horizon,
            values: p.tilt.clone(),
        };
        Self { n, p, tilt }
    }
}

fn th(x: f64) -> (f64, f64, f64) {
    let t = x.tanh();
    let s2 = 1.0 - t * t;
    (t, s2, -2.0 * t * s2)
}

fn lcosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl Coefficients for SmoothNonlinear {
    fn name(&self) -> &str {
        "smooth_nonlinear"
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            n: self.n,
            w: self.n,
            k: 1,
        }
    }

    fn drift(&self, _t: f64, a: &Args, u: &[f64], out: &mut [f64]) {
        let p = &self.p;
        for i in 0..self.n {
            let tx = a.x[i].tanh();
            out[i] = p.a * tx
                + p.a1 * a.xt[i].tanh()
                + p.ay * a.y[i].tanh()
                + p.ayt * a.yt[i]
                + p.bu * u[0]
                + p.bxu * u[0] * tx;
        }
    }

    fn diffusion(&self, _t: f64, a: &Args, u: &[f64], out: &mut [f64]) {
        let p = &self.p;
        diag(out, self.n, |i| {
            let tx = a.x[i].tanh();
            p.s0 + p.s1 * tx + p.sy * a.y[i].tanh() + p.su * u[0] + p.sxu * u[0] * tx
        });
    }

    fn running_cost(&self, t: f64, a: &Args, u: &[f64]) -> f64 {
        let p = &self.p;
        let mut s = 0.5 * p.r * u[0] * u[0] + self.tilt.at(t) * u[0];
        for i in 0..self.n {
            s += p.q * lcosh(a.x[i]) + p.qt * lcosh(a.xt[i]) + p.qy * lcosh(a.y[i]);
        }
        s
    }

    fn terminal_cost(&self, a: &Args) -> f64 {
        let p = &self.p;
        let mut s = 0.0;
        for i in 0..self.n {
            s += p.g * lcosh(a.x[i]) + p.gt * lcosh(a.xt[i]) + p.gy * lcosh(a.y[i]) + p.g1 * a.x[i];
        }
        s
    }

    fn drift_d1(&self, _t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]) {
        let p = &self.p;
        diag(out, self.n, |i| match s {
            Slot::X => (p.a + p.bxu * u[0]) * th(a.x[i]).1,
            Slot::Xt => p.a1 * th(a.xt[i]).1,
            Slot::Y => p.ay * th(a.y[i]).1,
            Slot::Yt => p.ayt,
        });
    }

    fn diffusion_d1(&self, _t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]) {
        let p = &self.p;
        diag3(out, self.n, |i| match s {
            Slot::X => (p.s1 + p.sxu * u[0]) * th(a.x[i]).1,
            Slot::Xt => 0.0,
            Slot::Y => p.sy * th(a.y[i]).1,
            Slot::Yt => 0.0,
        });
    }

    fn running_cost_d1(&self, _t: f64, a: &Args, _u: &[f64], s: Slot, out: &mut [f64]) {
        let p = &self.p;
        for i in 0..self.n {
            out[i] = match s {
                Slot::X => p.q * a.x[i].tanh(),
                Slot::Xt => p.qt * a.xt[i].tanh(),
                Slot::Y => p.qy * a.y[i].tanh(),
                Slot::Yt => 0.0,
            };
        }
    }

    fn terminal_cost_d1(&self, a: &Args, s: Slot, out: &mut [f64]) {
        let p = &self.p;
        for i in 0..self.n {
            out[i] = match s {
                Slot::X => p.g * a.x[i].tanh() + p.g1,
                Slot::Xt => p.gt * a.xt[i].tanh(),
                Slot::Y => p.gy * a.y[i].tanh(),
                Slot::Yt => 0.0,
            };
        }
    }

    fn drift_d2(&self, _t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]) {
        let p = &self.p;
        diag3(out, self.n, |i| match (s1, s2) {
            (Slot::X, Slot::X) => (p.a + p.bxu * u[0]) * th(a.x[i]).2,
            (Slot::Xt, Slot::Xt) => p.a1 * th(a.xt[i]).2,
            _ => 0.0,
        });
    }

    fn diffusion_d2(&self, _t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]) {
        let p = &self.p;
        let (n, w) = (self.n, self.n);
        out.fill(0.0);
        if (s1, s2) == (Slot::X, Slot::X) {
            for i in 0..n {
                out[((i * w + i) * n + i) * n + i] = (p.s1 + p.sxu * u[0]) * th(a.x[i]).2;
            }
        }
    }

    fn running_cost_d2(&self, _t: f64, a: &Args, _u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]) {
        let p = &self.p;
        diag(out, self.n, |i| match (s1, s2) {
            (Slot::X, Slot::X) => p.q * th(a.x[i]).1,
            (Slot::Xt, Slot::Xt) => p.qt * th(a.xt[i]).1,
            _ => 0.0,
        });
    }

    fn terminal_cost_d2(&self, a: &Args, s1: Slot, s2: Slot, out: &mut [f64]) {
        let p = &self.p;
        diag(out, self.n, |i| match (s1, s2) {
            (Slot::X, Slot::X) => p.g * th(a.x[i]).1,
            (Slot::Xt, Slot::Xt) => p.gt * th(a.xt[i]).1,
            _ => 0.0,
        });
    }
}

/// Wraps a model and corrupts its drift Jacobian in the head slot.
pub struct NegativeControl {
    inner: Arc<dyn Coefficients>,
    offset: f64,
}

impl NegativeControl {
    pub fn new(inner: Arc<dyn Coefficients>, offset: f64) -> Self {
        Self { inner, offset }
    }
}

impl Coefficients for NegativeControl {
    fn name(&self) -> &str {
        "negative_control"
    }
    fn dims(&self) -> ModelDims {
        self.inner.dims()
    }
    fn drift(&self, t: f64, a: &Args, u: &[f64], out: &mut [f64]) {
        self.inner.drift(t, a, u, out)
    }
    fn diffusion(&self, t: f64, a: &Args, u: &[f64], out: &mut [f64]) {
        self.inner.diffusion(t, a, u, out)
    }
    fn running_cost(&self, t: f64, a: &Args, u: &[f64]) -> f64 {
        self.inner.running_cost(t, a, u)
    }
    fn terminal_cost(&self, a: &Args) -> f64 {
        self.inner.terminal_cost(a)
    }
    fn drift_d1(&self, t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]) {
        self.inner.drift_d1(t, a, u, s, out);
        if s == Slot::X {
            let n = self.dims().n;
            for i in 0..n {
                out[i * n + i] += self.offset;
            }
        }
    }
    fn diffusion_d1(&self, t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]) {
        self.inner.diffusion_d1(t, a, u, s, out)
    }
    fn running_cost_d1(&self, t: f64, a: &Args, u: &[f64], s: Slot, out: &mut [f64]) {
        self.inner.running_cost_d1(t, a, u, s, out)
    }
    fn terminal_cost_d1(&self, a: &Args, s: Slot, out: &mut [f64]) {
        self.inner.terminal_cost_d1(a, s, out)
    }
    fn drift_d2(&self, t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]) {
        self.inner.drift_d2(t, a, u, s1, s2, out)
    }
    fn diffusion_d2(&self, t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]) {
        self.inner.diffusion_d2(t, a, u, s1, s2, out)
    }
    fn running_cost_d2(&self, t: f64, a: &Args, u: &[f64], s1: Slot, s2: Slot, out: &mut [f64]) {
        self.inner.running_cost_d2(t, a, u, s1, s2, out)
    }
    fn terminal_cost_d2(&self, a: &Args, s1: Slot, s2: Slot, out: &mut [f64]) {
        self.inner.terminal_cost_d2(a, s1, s2, out)
    }
    fn deterministic_derivatives(&self) -> bool {
        self.inner.deterministic_derivatives()
    }
}

/// Names accepted by [`build`].
pub const MODEL_NAMES: [&str; 4] = ["lq_delay", "lq_meanfield", "smooth_nonlinear", "negative_control"];

/// Builds a named model from JSON parameters.
pub fn build(name: &str, params: &serde_json::Value, n: usize, horizon: f64) -> Result<Arc<dyn Coefficients>> {
    let params = if params.is_null() {
        serde_json::Value::Object(Default::default())
    } else {
        params.clone()
    };
    let bad = |e: serde_json::Error| Error::Config(format!("parameters of model `{name}`: {e}"));
    match name {
        "lq_delay" => {
            let p: LqParams = serde_json::from_value(params).map_err(bad)?;
            if p.coupling != 0.0 {
                return Err(Error::Config(
                    "lq_delay has no mean-field coupling; use lq_meanfield".into(),
                ));
            }
            Ok(Arc::new(LinearQuadratic::new(name, n, p, horizon)))
        }
        "lq_meanfield" => {
            let mut p: LqParams = serde_json::from_value(params.clone()).map_err(bad)?;
            if params.get("coupling").is_none() {
                p.coupling = 0.1;
            }
            Ok(Arc::new(LinearQuadratic::new(name, n, p, horizon)))
        }
        "smooth_nonlinear" => {
            let p: SmoothParams = serde_json::from_value(params).map_err(bad)?;
            Ok(Arc::new(SmoothNonlinear::new(n, p, horizon)))
        }
        "negative_control" => {
            let mut obj = params.as_object().cloned().unwrap_or_default();
            let offset = obj.remove("offset").and_then(|v| v.as_f64()).unwrap_or(0.5);
            let inner = obj
                .remove("inner")
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_else(|| "smooth_nonlinear".into());
            if inner == "negative_control" {
                return Err(Error::Config("negative_control cannot wrap itself".into()));
            }
            let inner = build(&inner, &serde_json::Value::Object(obj), n, horizon)?;
            Ok(Arc::new(NegativeControl::new(inner, offset)))
        }
        other => Err(Error::Config(format!(
            "unknown model `{other}`; expected one of {MODEL_NAMES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_derivatives;

    fn controls() -> Vec<Vec<f64>> {
        vec![vec![-1.0], vec![0.0], vec![0.7]]
    }

    #[test]
    fn builtin_derivatives_pass_check() {
        for name in ["lq_delay", "lq_meanfield", "smooth_nonlinear"] {
            for n in [1, 2] {
                let m = build(name, &serde_json::json!({"tilt": [0.1, -0.2]}), n, 1.0).unwrap();
                let r = check_derivatives(m.as_ref(), &controls(), 1.0, 6, 3).unwrap();
                assert!(r.pass, "{name} n={n}: {r:?}");
            }
        }
    }

    #[test]
    fn negative_control_is_flagged() {
        let m = build("negative_control", &serde_json::Value::Null, 1, 1.0).unwrap();
        let r = check_derivatives(m.as_ref(), &controls(), 1.0, 4, 3).unwrap();
        assert!(!r.pass);
        assert!(r.worst.starts_with("drift dX"), "{}", r.worst);
    }

    #[test]
    fn tilt_is_piecewise_constant() {
        let t = Tilt {
            horizon: 0.5,
            values: vec![1.0, -1.0, 2.0, -2.0],
        };
        assert_eq!(t.at(0.0), 1.0);
        assert_eq!(t.at(0.125), -1.0);
        assert_eq!(t.at(0.49), -2.0);
        assert_eq!(t.at(0.5), -2.0);
    }

    #[test]
    fn log_cosh_is_stable() {
        assert!((lcosh(0.3) - 0.3_f64.cosh().ln()).abs() < 1e-15);
        assert!(lcosh(800.0).is_finite());
    }

    #[test]
    fn unknown_model_is_config_error() {
        assert!(matches!(
            build("nope", &serde_json::Value::Null, 1, 1.0),
            Err(Error::Config(_))
        ));
    }
}
