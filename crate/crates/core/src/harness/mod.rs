//! Experiment orchestration behind the `mfdelay` command.
//!
//! Every pipeline reads an [`ExperimentConfig`], runs one family of checks
//! and returns [`ReportRecord`]s plus CSV tables. Numeric outputs depend only
//! on the configuration; wall-clock times are written to a separate file.

pub mod config;
pub mod report;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adjoint::{solve_first_order, solve_second_order, AdjointOptions};
use crate::error::{Error, Result};
use crate::forward::{evaluate_cost, simulate};
use crate::smp::{
    cost_expansion_check, dual_family_check, duality_check_first_order, duality_check_second_order, smp_check,
    DualityResidual, SecondOrderProbe,
};
use crate::tensor::{tensor_identity_check, TensorRefinement};
use crate::variation::{order_probe, simulate_variations, OrderStatus};

pub use config::{load_configs, parse_configs, ExperimentConfig, Instance, SecondOrderCheck};
pub use report::{ErrorReport, ReportRecord, Table};

use report::{num, write_json};

/// Named pipeline of the command-line interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Simulate,
    Orders,
    Adjoint,
    Duality,
    Tensor,
    SmpCheck,
    CostExpansion,
    All,
}

impl Pipeline {
    pub const CHECKS: [Pipeline; 7] = [
        Pipeline::Simulate,
        Pipeline::Orders,
        Pipeline::Adjoint,
        Pipeline::Duality,
        Pipeline::Tensor,
        Pipeline::SmpCheck,
        Pipeline::CostExpansion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Simulate => "simulate",
            Pipeline::Orders => "orders",
            Pipeline::Adjoint => "adjoint",
            Pipeline::Duality => "duality",
            Pipeline::Tensor => "tensor",
            Pipeline::SmpCheck => "smp-check",
            Pipeline::CostExpansion => "cost-expansion",
            Pipeline::All => "all",
        }
    }
}

/// Records and tables of one pipeline on one experiment.
#[derive(Clone, Debug, Default)]
pub struct PipelineOutput {
    pub records: Vec<ReportRecord>,
    pub tables: Vec<Table>,
}

impl PipelineOutput {
    pub fn pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Also write every particle's head path from `simulate`.
    pub dump_trajectories: bool,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    digest: String,
    out: PipelineOutput,
}

impl Ctx<'_> {
    fn record(&mut self, check: &str, pass: bool, outputs: serde_json::Value) {
        self.out.records.push(ReportRecord {
            experiment: self.cfg.name.clone(),
            check: check.to_string(),
            config_digest: self.digest.clone(),
            pass,
            outputs,
        });
    }

    fn adjoint_options(&self) -> AdjointOptions {
        AdjointOptions {
            basis: self.cfg.basis,
            ..self.cfg.picard
        }
    }
}

fn spike(cfg: &ExperimentConfig) -> Result<&config::SpikeSpec> {
    cfg.spike
        .as_ref()
        .ok_or_else(|| Error::Config(format!("experiment `{}` has no spike section", cfg.name)))
}

/// Runs one pipeline (not `all`) on one experiment.
pub fn run_pipeline(cfg: &ExperimentConfig, pipeline: Pipeline, opts: &RunOptions) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut cx = Ctx {
        cfg,
        digest: cfg.digest(),
        out: PipelineOutput::default(),
    };
    match pipeline {
        Pipeline::Simulate => run_simulate(&mut cx, opts)?,
        Pipeline::Orders => run_orders(&mut cx)?,
        Pipeline::Adjoint => run_adjoint(&mut cx)?,
        Pipeline::Duality => run_duality(&mut cx)?,
        Pipeline::Tensor => run_tensor(&mut cx)?,
        Pipeline::SmpCheck => run_smp(&mut cx)?,
        Pipeline::CostExpansion => run_cost_expansion(&mut cx)?,
        Pipeline::All => return Err(Error::Argument("`all` expands to the configured checks".into())),
    }
    Ok(cx.out)
}

fn run_simulate(cx: &mut Ctx, opts: &RunOptions) -> Result<()> {
    let inst = cx.cfg.instance(None)?;
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise)?;
    let cost = evaluate_cost(&inst.lc, &ens);
    let n = inst.lc.dims().n;
    let heads: Vec<String> = (0..n).map(|a| format!("mean_head_{a}")).collect();
    let mut header = vec!["step", "t"];
    header.extend(heads.iter().map(String::as_str));
    let mut t = Table::new("mean_path.csv", &header);
    let path = ens.mean_path();
    for (k, h) in path.iter().enumerate() {
        let mut row = vec![k.to_string(), num(inst.time.t(k))];
        row.extend(h.iter().map(|v| num(*v)));
        t.push(row);
    }
    cx.out.tables.push(t);
    if opts.dump_trajectories {
        let cols: Vec<String> = (0..n).map(|a| format!("head_{a}")).collect();
        let mut header = vec!["particle", "step", "t"];
        header.extend(cols.iter().map(String::as_str));
        let mut t = Table::new("trajectories.csv", &header);
        for i in 0..ens.particles() {
            for k in 0..=inst.time.steps {
                let mut row = vec![i.to_string(), k.to_string(), num(inst.time.t(k))];
                row.extend(ens.head(i, k).iter().map(|v| num(*v)));
                t.push(row);
            }
        }
        cx.out.tables.push(t);
    }
    let finite = path.iter().flatten().all(|v| v.is_finite()) && cost.mean.is_finite();
    cx.record(
        "simulate",
        finite,
        json!({
            "particles": ens.particles(),
            "steps": inst.time.steps,
            "cost": {"mean": cost.mean, "stderr": cost.stderr},
            "final_mean_head": path.last(),
        }),
    );
    Ok(())
}

fn run_orders(cx: &mut Ctx) -> Result<()> {
    let inst = cx.cfg.instance(None)?;
    let sp = spike(cx.cfg)?;
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise)?;
    let rep = order_probe(
        &inst.lc,
        &ens,
        &inst.xi,
        &inst.noise,
        &sp.v,
        sp.tau,
        &sp.eps,
        cx.cfg.order_moment,
        &inst.set,
    )?;
    let mut t = Table::new("orders.csv", &["quantity", "eps", "value"]);
    for q in &rep.quantities {
        for (e, v) in q.eps.iter().zip(&q.values) {
            t.push(vec![q.quantity.clone(), num(*e), num(*v)]);
        }
        cx.record(
            &format!("order/{}", q.quantity),
            q.status == OrderStatus::Pass,
            serde_json::to_value(q)?,
        );
    }
    cx.out.tables.push(t);
    Ok(())
}

fn run_adjoint(cx: &mut Ctx) -> Result<()> {
    let inst = cx.cfg.instance(None)?;
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise)?;
    let first = solve_first_order(&inst.lc, &ens, &inst.noise, &cx.adjoint_options())?;
    let pr = &first.picard;
    let mut t = Table::new("picard.csv", &["iteration", "residual", "ratio"]);
    for (i, r) in pr.residuals.iter().enumerate() {
        let ratio = if i >= 1 {
            num(r / pr.residuals[i - 1])
        } else {
            String::new()
        };
        t.push(vec![(i + 1).to_string(), num(*r), ratio]);
    }
    cx.out.tables.push(t);
    let np = ens.particles();
    let o = inst.lc.grid.head_offset();
    let n = inst.lc.dims().n;
    let mut pt = Table::new("adjoint_mean.csv", &["step", "component", "mean_p_head"]);
    for k in 0..=inst.time.steps {
        for a in 0..n {
            let s: f64 = (0..np).map(|i| first.p(k, i)[o + a]).sum();
            pt.push(vec![k.to_string(), a.to_string(), num(s / np as f64)]);
        }
    }
    cx.out.tables.push(pt);
    cx.record(
        "picard",
        pr.pass(),
        json!({
            "iterations": pr.iterations(),
            "max_iter": cx.cfg.picard.max_iter,
            "tol": cx.cfg.picard.tol,
            "max_ratio": cx.cfg.picard.max_ratio,
            "report": pr,
        }),
    );
    Ok(())
}

fn residual_row(t: &mut Table, eps: f64, r: &DualityResidual) {
    t.push(vec![
        num(eps),
        r.name.clone(),
        num(r.lhs.mean),
        num(r.lhs.stderr),
        num(r.rhs.mean),
        num(r.rhs.stderr),
        num(r.residual),
        num(r.tolerance),
        r.pass.to_string(),
    ]);
}

fn residual_json(eps: f64, r: &DualityResidual) -> serde_json::Value {
    json!({
        "eps": eps,
        "lhs": {"mean": r.lhs.mean, "stderr": r.lhs.stderr},
        "rhs": {"mean": r.rhs.mean, "stderr": r.rhs.stderr},
        "residual": r.residual,
        "stderr": r.stderr,
        "tolerance": r.tolerance,
    })
}

fn run_duality(cx: &mut Ctx) -> Result<()> {
    let cfg = cx.cfg;
    let inst = cfg.instance(None)?;
    let sp = spike(cfg)?;
    let lc = &inst.lc;
    let ens = simulate(lc, &inst.xi, &inst.time, &inst.control, &inst.noise)?;
    let first = solve_first_order(lc, &ens, &inst.noise, &cx.adjoint_options())?;
    let second = if cfg.second_order.is_some() || !cfg.dual_family_steps.is_empty() {
        Some(solve_second_order(lc, &ens, &first)?)
    } else {
        None
    };
    let mut t = Table::new(
        "duality.csv",
        &[
            "eps",
            "identity",
            "lhs",
            "lhs_stderr",
            "rhs",
            "rhs_stderr",
            "residual",
            "tolerance",
            "pass",
        ],
    );
    let mut points = Vec::new();
    for &eps in &sp.eps {
        let b = simulate_variations(lc, &ens, &inst.xi, &inst.noise, &sp.v, sp.tau, eps, &inst.set)?;
        let fo = duality_check_first_order(lc, &b, &first)?;
        for (tag, r) in [("y", &fo.y), ("z", &fo.z)] {
            residual_row(&mut t, eps, r);
            cx.record(&format!("first_order_{tag}"), r.pass, residual_json(eps, r));
        }
        if let Some(s) = &second {
            if cfg.second_order.is_some() {
                let so = duality_check_second_order(lc, &b, s)?;
                residual_row(&mut t, eps, &so.full);
                residual_row(&mut t, eps, &so.leading);
                points.push(so);
            }
            if !cfg.dual_family_steps.is_empty() {
                for (s_step, r) in
                    cfg.dual_family_steps
                        .iter()
                        .zip(dual_family_check(lc, &b, s, &cfg.dual_family_steps)?)
                {
                    residual_row(&mut t, eps, &r);
                    let mut v = residual_json(eps, &r);
                    v["s"] = json!(s_step);
                    cx.record(&format!("dual_family/s={s_step}"), r.pass, v);
                }
            }
        }
    }
    if let (Some(mode), false) = (cfg.second_order, points.is_empty()) {
        let probe = SecondOrderProbe::from_points(points);
        let pts: Vec<_> = probe
            .points
            .iter()
            .map(|p| {
                json!({
                    "eps": p.eps,
                    "full": residual_json(p.eps, &p.full),
                    "leading": residual_json(p.eps, &p.leading),
                    "paired_residual": {"mean": p.residual.mean, "stderr": p.residual.stderr},
                })
            })
            .collect();
        let (name, pass) = match mode {
            SecondOrderCheck::Decay => ("second_order_decay", probe.decay_pass()),
            SecondOrderCheck::Leading => ("second_order_leading", probe.leading_pass()),
        };
        cx.record(
            name,
            pass,
            json!({
                "points": pts,
                "fit": probe.fit,
                "slope_pass": probe.slope_pass,
                "full_pass": probe.full_pass(),
            }),
        );
    }
    cx.out.tables.push(t);
    Ok(())
}

fn run_tensor(cx: &mut Ctx) -> Result<()> {
    let cfg = cx.cfg;
    let ts = cfg
        .tensor
        .as_ref()
        .ok_or_else(|| Error::Config(format!("experiment `{}` has no tensor section", cfg.name)))?;
    let v = &spike(cfg)?.v;
    let mut levels = Vec::with_capacity(ts.levels.len());
    for &m in &ts.levels {
        let inst = cfg.instance(Some(m))?;
        let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise)?;
        let b = simulate_variations(&inst.lc, &ens, &inst.xi, &inst.noise, v, ts.tau, ts.eps, &inst.set)?;
        levels.push(tensor_identity_check(&inst.lc, &b, &inst.noise)?);
    }
    let rep = TensorRefinement::from_levels(levels);
    let mut t = Table::new("tensor.csv", &["m", "dt", "discrepancy", "stderr", "step_of_max"]);
    for (m, l) in ts.levels.iter().zip(&rep.levels) {
        t.push(vec![
            m.to_string(),
            num(l.dt),
            num(l.discrepancy),
            num(l.stderr),
            l.step_of_max.to_string(),
        ]);
    }
    cx.out.tables.push(t);
    let lv: Vec<_> = rep
        .levels
        .iter()
        .map(|l| json!({"dt": l.dt, "discrepancy": l.discrepancy, "stderr": l.stderr, "step_of_max": l.step_of_max}))
        .collect();
    cx.record(
        "tensor_refinement",
        rep.pass(),
        json!({
            "levels": lv,
            "fit": rep.fit,
            "slope_band": rep.slope_band,
            "slope_pass": rep.slope_pass,
            "finest_pass": rep.finest_pass,
        }),
    );
    Ok(())
}

fn run_smp(cx: &mut Ctx) -> Result<()> {
    let cfg = cx.cfg;
    let inst = cfg.instance(None)?;
    let rep = smp_check(
        &inst.lc,
        &inst.xi,
        &inst.time,
        &inst.noise,
        &inst.set,
        cfg.smp_pieces,
        &cx.adjoint_options(),
    )?;
    let base = rep.search.values.len();
    let mut ct = Table::new("smp_costs.csv", &["candidate", "choices", "cost"]);
    for (idx, c) in rep.search.costs.iter().enumerate() {
        let ch = crate::smp::decode_choices(idx, rep.search.pieces, base);
        let s: Vec<String> = ch.iter().map(|x| x.to_string()).collect();
        ct.push(vec![idx.to_string(), s.join(" "), num(*c)]);
    }
    let mut rt = Table::new("smp_residuals.csv", &["control", "step", "v", "estimate", "stderr"]);
    for (tag, chk) in [("optimal", &rep.optimal), ("perturbed", &rep.perturbed)] {
        for e in &chk.entries {
            let v: Vec<String> = e.v.iter().map(|x| num(*x)).collect();
            rt.push(vec![
                tag.into(),
                e.step.to_string(),
                v.join(" "),
                num(e.estimate),
                num(e.stderr),
            ]);
        }
    }
    cx.out.tables.push(ct);
    cx.out.tables.push(rt);
    let summary = |c: &crate::smp::SmpControlCheck| {
        json!({
            "choices": c.choices,
            "cost": c.cost,
            "worst": c.worst,
            "argmax_consistent": c.argmax_consistent,
        })
    };
    cx.record(
        "smp_optimal",
        rep.optimal_pass,
        json!({
            "search": {"choices": rep.search.choices, "cost": rep.search.cost, "cost_stderr": rep.search.cost_stderr},
            "optimal": summary(&rep.optimal),
            "tolerance": rep.tolerance,
        }),
    );
    cx.record(
        "smp_perturbed",
        rep.perturbed_pass,
        json!({"perturbed": summary(&rep.perturbed)}),
    );
    Ok(())
}

fn run_cost_expansion(cx: &mut Ctx) -> Result<()> {
    let inst = cx.cfg.instance(None)?;
    let sp = spike(cx.cfg)?;
    let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise)?;
    let rep = cost_expansion_check(&inst.lc, &ens, &inst.xi, &inst.noise, &sp.v, sp.tau, &sp.eps, &inst.set)?;
    let mut t = Table::new(
        "cost_expansion.csv",
        &[
            "eps",
            "delta_j",
            "delta_j_stderr",
            "rhs",
            "rhs_stderr",
            "residual",
            "residual_stderr",
            "tolerance",
            "tracks",
        ],
    );
    for p in &rep.points {
        t.push(vec![
            num(p.eps),
            num(p.delta_j.mean),
            num(p.delta_j.stderr),
            num(p.rhs.mean),
            num(p.rhs.stderr),
            num(p.residual.mean),
            num(p.residual.stderr),
            num(p.tolerance),
            p.tracks.to_string(),
        ]);
    }
    cx.out.tables.push(t);
    cx.record("cost_expansion", rep.pass, serde_json::to_value(&rep)?);
    Ok(())
}

/// Pipelines to run on `cfg` for a command-line request.
pub fn selected(cfg: &ExperimentConfig, pipeline: Pipeline) -> Vec<Pipeline> {
    match pipeline {
        Pipeline::All => Pipeline::CHECKS
            .into_iter()
            .filter(|p| cfg.checks.contains(p))
            .collect(),
        Pipeline::Simulate => vec![Pipeline::Simulate],
        p if cfg.checks.contains(&p) => vec![p],
        _ => Vec::new(),
    }
}

/// Wall-clock time of one pipeline, kept out of the numeric reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub experiment: String,
    pub pipeline: String,
    pub config_digest: String,
    pub seconds: f64,
}

/// Result of a command-line run.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub records: Vec<ReportRecord>,
    pub timings: Vec<Timing>,
}

impl RunSummary {
    pub fn pass(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.pass)
    }
}

/// Runs `pipeline` on every experiment and writes reports under `out`.
///
/// Layout: `out/<experiment>/<pipeline>.json` and the pipeline's CSV files,
/// `out/summary.json` with every record and `out/timing.json`.
pub fn run_all(
    configs: &[ExperimentConfig],
    pipeline: Pipeline,
    out: &Path,
    opts: &RunOptions,
) -> std::result::Result<RunSummary, (Error, Option<String>)> {
    let mut summary = RunSummary::default();
    let mut ran = false;
    std::fs::create_dir_all(out).map_err(|e| (e.into(), None))?;
    for cfg in configs {
        let dir = out.join(&cfg.name);
        let digest = cfg.digest();
        let wrap = |e: Error| (e, Some(cfg.name.clone()));
        for p in selected(cfg, pipeline) {
            ran = true;
            log::info!("{}: {}", cfg.name, p.name());
            let t0 = Instant::now();
            let res = run_pipeline(cfg, p, opts).map_err(wrap)?;
            std::fs::create_dir_all(&dir).map_err(|e| wrap(e.into()))?;
            write_json(&dir.join(format!("{}.json", p.name())), &res.records).map_err(wrap)?;
            for t in &res.tables {
                t.write(&dir, &digest).map_err(wrap)?;
            }
            summary.timings.push(Timing {
                experiment: cfg.name.clone(),
                pipeline: p.name().to_string(),
                config_digest: digest.clone(),
                seconds: t0.elapsed().as_secs_f64(),
            });
            summary.records.extend(res.records);
        }
    }
    if !ran {
        return Err((
            Error::Config(format!("no experiment enables pipeline {}", pipeline.name())),
            None,
        ));
    }
    let brief: Vec<_> = summary
        .records
        .iter()
        .map(
            |r| json!({"experiment": r.experiment, "check": r.check, "config_digest": r.config_digest, "pass": r.pass}),
        )
        .collect();
    write_json(
        &out.join("summary.json"),
        &json!({"pipeline": pipeline.name(), "pass": summary.pass(), "records": brief}),
    )
    .map_err(|e| (e, None))?;
    write_json(&out.join("timing.json"), &summary.timings).map_err(|e| (e, None))?;
    Ok(summary)
}

/// Writes the error report next to the other outputs.
pub fn write_error(out: &Path, report: &ErrorReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("error.json"), report)
}
