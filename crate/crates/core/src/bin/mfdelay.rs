//! Command-line front end: `mfdelay <pipeline> --config <path>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfdelay::harness::{load_configs, run_all, write_error, ErrorReport, Pipeline, RunOptions};

#[derive(Parser, Debug)]
#[command(
    name = "mfdelay",
    version,
    about = "Simulation and verification runs for mean-field delay control problems"
)]
struct Cli {
    /// Pipeline to run.
    #[arg(value_enum)]
    pipeline: Pipeline,
    /// JSON configuration: one experiment or {"experiments": [...]}.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed of every experiment.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "MFDELAY_THREADS")]
    threads: Option<usize>,
    /// Write every particle's path from `simulate`.
    #[arg(long)]
    dump_trajectories: bool,
}

fn fail(out: &std::path::Path, report: ErrorReport) -> ExitCode {
    let text = serde_json::to_string(&serde_json::json!({ "error": report })).expect("error report serializes");
    eprintln!("{text}");
    if let Err(e) = write_error(out, &report) {
        log::warn!("could not write error.json: {e}");
    }
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let mut configs = match load_configs(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail(&cli.out, ErrorReport::new(&e, None, None)),
    };
    if let Some(s) = cli.seed {
        for c in &mut configs {
            c.seed = s;
        }
    }
    let opts = RunOptions {
        dump_trajectories: cli.dump_trajectories,
    };
    match run_all(&configs, cli.pipeline, &cli.out, &opts) {
        Ok(summary) => {
            for r in &summary.records {
                println!("{} {}/{}", if r.pass { "PASS" } else { "FAIL" }, r.experiment, r.check);
            }
            if summary.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err((e, name)) => {
            let digest = name
                .as_deref()
                .and_then(|n| configs.iter().find(|c| c.name == n))
                .map(|c| c.digest());
            fail(&cli.out, ErrorReport::new(&e, name.as_deref(), digest.as_deref()))
        }
    }
}
