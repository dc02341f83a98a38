//! `richid`: run the learner stage by stage or end to end.
//!
//! Stages communicate through files in the output directory, so
//! `phase1 → phase2 → phase3 → eval` reproduces `pipeline` exactly.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use richid_core::pipeline::{self, Resolved};
use richid_core::sim::rollout::trajectories_to_csv;
use richid_core::{Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "richid", version, about = "Learn LQR controllers from rich observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the configured policy and write trajectories.csv.
    Simulate(Common),
    /// Fit the coarse decoder; writes phase1.csv.
    Phase1(Common),
    /// Identify dynamics, noise and cost from phase1.csv; writes sysid.csv.
    Phase2(Common),
    /// Learn the policy from sysid.csv; writes policy.csv and clip_events.csv.
    Phase3(Common),
    /// Evaluate the saved policy; writes report.csv and decoder_errors.csv.
    Eval(Common),
    /// All phases followed by evaluation.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the config instance.
    #[arg(long, value_name = "NAME")]
    instance: Option<String>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(name) = &self.instance {
            cfg.instance = name.clone();
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| Error::InvalidInput("no output directory: pass --out or set out_dir".into()))?;
        Ok((cfg, out))
    }
}

fn prepare(common: &Common) -> Result<(ExperimentConfig, Resolved, PathBuf)> {
    let (cfg, out) = common.load()?;
    let r = pipeline::resolve(&cfg)?;
    fs::create_dir_all(&out)?;
    Ok((cfg, r, out))
}

fn simulate(common: &Common) -> Result<()> {
    let (cfg, out) = common.load()?;
    let trajs = pipeline::simulate(&cfg)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(pipeline::TRAJECTORIES_FILE), trajectories_to_csv(&trajs))?;
    println!("wrote {} trajectories to {}", trajs.len(), out.display());
    Ok(())
}

fn phase1(common: &Common) -> Result<()> {
    let (cfg, r, out) = prepare(common)?;
    let (p1, _) = pipeline::with_threads(cfg.threads, || r.run_phase1())??;
    p1.to_bundle().save(&out.join(pipeline::PHASE1_FILE))?;
    println!("kappa0 = {}, kappa1 = {}", p1.kappa0, p1.kappa1);
    Ok(())
}

fn phase2(common: &Common) -> Result<()> {
    let (cfg, r, out) = prepare(common)?;
    let p1 = pipeline::load_phase1(&r, &out)?;
    let est = pipeline::with_threads(cfg.threads, || -> Result<_> {
        let data = r.collect_id_data()?;
        r.run_phase2(&p1, &data)
    })??;
    est.to_bundle().save(&out.join(pipeline::SYSID_FILE))?;
    println!("identified dynamics written to {}", out.join(pipeline::SYSID_FILE).display());
    Ok(())
}

fn phase3(common: &Common) -> Result<()> {
    let (cfg, r, out) = prepare(common)?;
    let est = pipeline::load_sysid(&out)?;
    let p3 = pipeline::with_threads(cfg.threads, || r.run_phase3(&est))??;
    pipeline::save_phase3(&out, &p3)?;
    println!("clip fraction {:.3e} ({} of {})", p3.clip_fraction(), p3.clip_events.len(), p3.clip_evaluated);
    Ok(())
}

fn evaluate(common: &Common) -> Result<()> {
    let started = Instant::now();
    let (cfg, r, out) = prepare(common)?;
    let p1 = pipeline::load_phase1(&r, &out)?;
    let est = pipeline::load_sysid(&out)?;
    let (policy, stats) = pipeline::load_policy(&r, &out)?;
    let mut report = pipeline::with_threads(cfg.threads, || {
        pipeline::evaluate(&r, cfg.n_eval, n_align(&cfg), &p1, &est, &policy, stats)
    })??;
    report.wall_clock_s = started.elapsed().as_secs_f64();
    pipeline::save_report(&out, &report)?;
    print!("{}", report.report_csv());
    Ok(())
}

fn n_align(cfg: &ExperimentConfig) -> usize {
    cfg.n_align.unwrap_or(richid_core::config::DEFAULT_N_ALIGN)
}

fn run_all(common: &Common) -> Result<()> {
    let (cfg, out) = common.load()?;
    let res = pipeline::run_pipeline(&cfg, Some(&out))?;
    print!("{}", res.report.report_csv());
    log::info!("pipeline finished in {:.1}s", res.report.wall_clock_s);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Phase1(c) => phase1(c),
        Command::Phase2(c) => phase2(c),
        Command::Phase3(c) => phase3(c),
        Command::Eval(c) => evaluate(c),
        Command::Pipeline(c) => run_all(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
