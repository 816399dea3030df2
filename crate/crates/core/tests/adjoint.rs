mod common;

use mfdelay::adjoint::{
    solve_dual_family, solve_first_order, solve_first_order_direct, solve_second_order, AdjointOptions,
};
use mfdelay::control::{ControlPath, TimeGrid};
use mfdelay::forward::{simulate, InitialSegment};
use mfdelay::model::{KernelSet, LiftedCoefficients};
use mfdelay::noise::NoiseBank;
use mfdelay::regression::Basis;
use mfdelay::segment::SegmentGrid;
use mfdelay::Error;
use nalgebra::DMatrix;
use serde_json::json;

fn meanfield(particles: usize, coupling: f64) -> serde_json::Value {
    json!({
        "name": "mf", "model": "lq_meanfield",
        "params": {"sxu": 0.3, "su": 0.5, "coupling": coupling},
        "grid": {"n": 1, "w": 1, "m": 8, "delay": 0.25, "horizon": 0.5},
        "particles": particles, "seed": 4, "initial": [0.5],
        "kernels": {"state": ["uniform", "uniform", "uniform", "uniform"],
                    "mean": ["uniform", "uniform", "zero", "zero"]}
    })
}

#[test]
fn zero_costs_give_zero_adjoint() {
    let grid = SegmentGrid::new(1, 8, 0.25).unwrap();
    let lc = LiftedCoefficients::new(common::toy(-0.5, 1.0, 0.3, 0.0), KernelSet::zero(&grid), grid).unwrap();
    let time = TimeGrid::new(0.5, grid.dtheta()).unwrap();
    let noise = NoiseBank::new(1, 100, &time, 1).unwrap();
    let xi = InitialSegment::constant(&grid, &[1.0]);
    let ens = simulate(&lc, &xi, &time, &ControlPath::constant(&[0.0], time.steps), &noise).unwrap();
    let adj = solve_first_order(&lc, &ens, &noise, &AdjointOptions::default()).unwrap();
    for k in 0..=time.steps {
        for i in 0..100 {
            assert!(adj.p(k, i).iter().all(|v| *v == 0.0));
            if k < time.steps {
                assert!(adj.q(k, i, 0).iter().all(|v| *v == 0.0));
            }
        }
    }
}

#[test]
fn deterministic_linear_adjoint_matches_backward_recursion() {
    let (a, q, g) = (-0.5, 1.0, 1.0);
    let spec = json!({
        "name": "ode", "model": "lq_delay",
        "params": {"a": a, "a1": 0.0, "bu": 1.0, "s0": 0.0, "s1": 0.0, "q": q, "g": g},
        "grid": {"n": 1, "w": 1, "m": 8, "delay": 0.25, "horizon": 0.5},
        "particles": 4, "seed": 1, "initial": [0.8], "control": {"constant": [1.0]}
    });
    let (_, inst) = common::instance(spec);
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise).unwrap();
    let adj = solve_first_order(&inst.lc, &ens, &inst.noise, &AdjointOptions::default()).unwrap();
    let (kk, dt) = (inst.time.steps, inst.time.dt);
    let o = inst.lc.grid.head_offset();
    let mut x = vec![0.8];
    for _ in 0..kk {
        let last = *x.last().unwrap();
        x.push(last + dt * (a * last + 1.0));
    }
    let mut p = -g * x[kk];
    for k in (0..=kk).rev() {
        if k < kk {
            p = (1.0 + a * dt) * p - dt * q * x[k];
        }
        for i in 0..4 {
            let got = adj.p(k, i);
            assert!((got[o] - p).abs() < 1e-10, "step {k}: {} vs {p}", got[o]);
            assert!(got[..o].iter().all(|v| v.abs() < 1e-12));
        }
    }
}

#[test]
fn picard_fixed_point_matches_direct_solve() {
    let (_, inst) = common::instance(meanfield(4000, 0.1));
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise).unwrap();
    let opts = AdjointOptions {
        max_iter: 30,
        tol: 1e-12,
        ..AdjointOptions::default()
    };
    let pic = solve_first_order(&inst.lc, &ens, &inst.noise, &opts).unwrap();
    let direct = solve_first_order_direct(&inst.lc, &ens, &inst.noise, Basis::Linear).unwrap();
    assert!(pic.picard.converged);
    let mut diff = 0.0_f64;
    for k in 0..=inst.time.steps {
        for i in (0..4000).step_by(97) {
            for (x, y) in pic.p(k, i).iter().zip(direct.p(k, i)) {
                diff = diff.max((x - y).abs());
            }
        }
    }
    assert!(diff < 1e-9, "max difference {diff}");
}

#[test]
fn without_mean_field_picard_stops_after_one_correction() {
    let (_, inst) = common::instance(common::lq_delay(2000, json!({"sxu": 0.3, "su": 0.5})));
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise).unwrap();
    let adj = solve_first_order(&inst.lc, &ens, &inst.noise, &AdjointOptions::default()).unwrap();
    assert_eq!(adj.picard.iterations(), 2);
    assert!(adj.picard.residuals[1] == 0.0);
    assert!(adj.picard.pass());
}

#[test]
fn weak_coupling_contracts_and_strong_coupling_does_not() {
    let opts = AdjointOptions {
        max_iter: 10,
        tol: 1e-8,
        max_ratio: 0.5,
        ..AdjointOptions::default()
    };
    let (_, weak) = common::instance(meanfield(2000, 0.1));
    let ens = simulate(&weak.lc, &weak.xi, &weak.time, &weak.control, &weak.noise).unwrap();
    let rep = solve_first_order(&weak.lc, &ens, &weak.noise, &opts).unwrap().picard;
    assert!(rep.pass(), "{rep:?}");
    assert!(rep.ratios.iter().all(|r| *r <= 0.5));

    let (_, strong) = common::instance(meanfield(2000, 40.0));
    let ens = simulate(&strong.lc, &strong.xi, &strong.time, &strong.control, &strong.noise).unwrap();
    let rep = solve_first_order(&strong.lc, &ens, &strong.noise, &opts)
        .unwrap()
        .picard;
    assert!(!rep.pass(), "{rep:?}");
}

#[test]
fn second_order_adjoint_terminal_value_and_symmetry() {
    let (g, gt) = (1.0, 0.5);
    let spec = json!({
        "name": "p2", "model": "lq_delay",
        "params": {"sxu": 0.3, "su": 0.5, "g": g, "gt": gt},
        "grid": {"n": 1, "w": 1, "m": 8, "delay": 0.25, "horizon": 0.5},
        "particles": 500, "seed": 4, "initial": [0.5],
        "kernels": {"state": ["uniform", "uniform", "uniform", "uniform"]}
    });
    let (_, inst) = common::instance(spec);
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise).unwrap();
    let first = solve_first_order(&inst.lc, &ens, &inst.noise, &AdjointOptions::default()).unwrap();
    let second = solve_second_order(&inst.lc, &ens, &first).unwrap();
    let grid = inst.lc.grid;
    let (m, dth, d) = (grid.m(), grid.dtheta(), grid.delay());
    let mut expected = DMatrix::zeros(m + 1, m + 1);
    expected[(m, m)] = -g;
    for j in 0..m {
        for l in 0..m {
            expected[(j, l)] = -gt * dth / (d * d);
        }
    }
    let pk = &second.p[inst.time.steps];
    assert!((pk - &expected).abs().max() < 1e-12);
    for p in &second.p {
        assert!((p - p.transpose()).abs().max() < 1e-10);
    }
    let head = second.head_block(0);
    assert!(head[(0, 0)] < 0.0);
}

#[test]
fn dual_family_is_zero_after_its_terminal_step() {
    let (_, inst) = common::instance(common::lq_delay(200, json!({"sxu": 0.3})));
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise).unwrap();
    let first = solve_first_order(&inst.lc, &ens, &inst.noise, &AdjointOptions::default()).unwrap();
    let second = solve_second_order(&inst.lc, &ens, &first).unwrap();
    let s = 6;
    let phi = second.ops[s].b.clone();
    let fam = solve_dual_family(&second.ops, inst.time.dt, s, &phi).unwrap();
    for (r, p) in fam.p.iter().enumerate() {
        if r > s {
            assert!(p.iter().all(|v| *v == 0.0));
        }
    }
    assert_eq!(fam.p[s], phi.transpose());
    assert!(solve_dual_family(&second.ops, inst.time.dt, inst.time.steps + 1, &phi).is_err());
}

#[test]
fn second_order_adjoint_needs_deterministic_derivatives() {
    let spec = json!({
        "name": "s", "model": "smooth_nonlinear",
        "grid": {"n": 1, "w": 1, "m": 8, "delay": 0.25, "horizon": 0.5},
        "particles": 200, "seed": 2, "initial": [0.5],
        "kernels": {"state": ["uniform", "uniform", "uniform", "uniform"]}
    });
    let (_, inst) = common::instance(spec);
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise).unwrap();
    let first = solve_first_order(&inst.lc, &ens, &inst.noise, &AdjointOptions::default()).unwrap();
    assert!(matches!(
        solve_second_order(&inst.lc, &ens, &first),
        Err(Error::Unsupported(_))
    ));
}
