//! End-to-end orchestration: configuration → phases → evaluation → CSV artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::config::{ExperimentConfig, SimPolicy};
use crate::control::{self, WitnessKind};
use crate::error::{Error, Result, Stage};
use crate::eval::{self, Alignment, CostEstimate};
use crate::linalg;
use crate::matrix_csv::{format_f64, MatrixBundle};
use crate::phase1::{self, BurnIn, IdData, Phase1Config, Phase1Output, DEFAULT_KAPPA0_CAP};
use crate::phase2::{self, SysIdEstimates};
use crate::phase3::{self, build_noise_shaping, ClipEvent, LearnedPolicy, Phase3Config, Phase3Output};
use crate::rng;
use crate::sim::catalog::{derive_bounds, make_benchmark_instance, BenchmarkInstance, ParameterBounds};
use crate::sim::policy::PolicyDef;
use crate::sim::rollout::{rollout, rollout_with, trajectories_to_csv, RolloutOptions, Trajectory};

pub const REPORT_FILE: &str = "report.csv";
pub const DECODER_ERRORS_FILE: &str = "decoder_errors.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const PHASE1_FILE: &str = "phase1.csv";
pub const SYSID_FILE: &str = "sysid.csv";
pub const POLICY_FILE: &str = "policy.csv";
pub const CLIP_EVENTS_FILE: &str = "clip_events.csv";
pub const TIMING_FILE: &str = "timing.csv";

const MAX_TRAJECTORY_EXPORT: usize = 1000;

/// Everything derived from a config before any simulation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub instance: BenchmarkInstance,
    pub bounds: ParameterBounds,
    pub phase1: Phase1Config,
    pub phase3: Phase3Config,
    pub seed: u64,
}

pub fn resolve(cfg: &ExperimentConfig) -> Result<Resolved> {
    cfg.validate()?;
    let instance = make_benchmark_instance(&cfg.instance)?;
    let (dx, du) = (instance.spec.dx(), instance.spec.du());
    let kappa = cfg.kappa.unwrap_or(instance.kappa);
    let derived = if kappa == instance.kappa && WitnessKind::from(cfg.witness) == WitnessKind::Identity {
        instance.bounds
    } else {
        derive_bounds(&instance.spec, kappa, cfg.witness.into())?
    };
    let bounds = ParameterBounds {
        psi_star: cfg.psi_star.unwrap_or(derived.psi_star),
        alpha_star: cfg.alpha_star.unwrap_or(derived.alpha_star),
        gamma_star: cfg.gamma_star.unwrap_or(derived.gamma_star),
    };

    let mut p1 = Phase1Config::new(cfg.n_id, kappa, bounds);
    if let Some(r) = cfg.r_id {
        p1.r_id = r;
    }
    p1.burn_in = match cfg.kappa0 {
        Some(k) => BurnIn::Fixed(k),
        None => BurnIn::Formula { cap: cfg.kappa0_cap.unwrap_or(DEFAULT_KAPPA0_CAP) },
    };
    p1.validate(du)?;

    let mut p3 = Phase3Config::new(cfg.n_op, cfg.horizon, kappa, 1.0, dx, du, bounds.psi_star);
    if let Some(b) = cfg.b_bar {
        p3.b_bar = b;
    }
    if let Some(n) = cfg.n_init {
        p3.n_init = n;
    }
    if let Some(r) = cfg.r_op {
        p3.r_op = r;
    }
    p3.sigma = match (cfg.sigma, cfg.epsilon) {
        (Some(s), _) => s,
        (None, Some(eps)) => (eps / p3.b_bar).min(1.0),
        (None, None) => return Err(Error::InvalidInput("either sigma or epsilon must be set".into())),
    };
    p3.validate()?;
    Ok(Resolved { instance, bounds, phase1: p1, phase3: p3, seed: cfg.seed })
}

impl Resolved {
    fn stage_seed(&self, label: &str) -> u64 {
        rng::derive_seed(self.seed, label)
    }

    pub fn run_phase1(&self) -> Result<(Phase1Output, IdData)> {
        let inst = &self.instance;
        phase1::run_phase1(&inst.spec, &inst.emission, &inst.class, &self.phase1, self.stage_seed("phase1"))
            .map_err(|e| e.at(Stage::Phase1, None))
    }

    /// Re-collects the (deterministic) identification data without refitting.
    pub fn collect_id_data(&self) -> Result<IdData> {
        let inst = &self.instance;
        phase1::collect_id_data(&inst.spec, &inst.emission, &self.phase1, self.stage_seed("phase1"))
            .map_err(|e| e.at(Stage::Phase1, None))
    }

    pub fn run_phase2(&self, p1: &Phase1Output, data: &IdData) -> Result<SysIdEstimates> {
        phase2::run_phase2(&data.batches[2], p1.decoder.as_ref(), self.instance.spec.r()).map_err(|e| e.at(Stage::Phase2, None))
    }

    pub fn run_phase3(&self, est: &SysIdEstimates) -> Result<Phase3Output> {
        let inst = &self.instance;
        phase3::compute_policy(&inst.spec, &inst.emission, &inst.class, est, &self.phase3, self.stage_seed("phase3"))
    }

    /// `S_id` from ground truth.
    pub fn identified_basis(&self, p1: &Phase1Output) -> Result<DMatrix<f64>> {
        phase1::identified_basis(&self.instance.spec, p1, self.phase1.kappa)
    }
}

/// Training-side statistics carried alongside a learned policy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingStats {
    pub clip_count: u64,
    pub clip_evaluated: u64,
    pub trajectories: u64,
}

impl TrainingStats {
    pub fn from_output(out: &Phase3Output) -> Self {
        Self { clip_count: out.clip_events.len() as u64, clip_evaluated: out.clip_evaluated, trajectories: out.trajectories_used as u64 }
    }

    fn insert_into(&self, b: &mut MatrixBundle) {
        b.insert_scalar("train.clip_count", self.clip_count as f64);
        b.insert_scalar("train.clip_evaluated", self.clip_evaluated as f64);
        b.insert_scalar("train.trajectories", self.trajectories as f64);
    }

    fn read(b: &MatrixBundle) -> Result<Self> {
        if !b.contains("train.clip_count") {
            return Ok(Self::default());
        }
        Ok(Self {
            clip_count: b.scalar("train.clip_count")? as u64,
            clip_evaluated: b.scalar("train.clip_evaluated")? as u64,
            trajectories: b.scalar("train.trajectories")? as u64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub instance: String,
    pub learned: CostEstimate,
    pub optimal: CostEstimate,
    pub zero: CostEstimate,
    /// `J(π̂) − J(π_∞)` with its paired standard error.
    pub gap: f64,
    pub gap_stderr: f64,
    pub zero_gap: f64,
    pub zero_gap_stderr: f64,
    /// `E‖f̂_t − S_id x_t‖²` along the learned policy, `t = 0..=T`.
    pub decoder_errors: Vec<f64>,
    /// Coarse decoder against `f⋆`.
    pub alignment: Alignment,
    pub s_id: DMatrix<f64>,
    /// Operator-norm errors of `(Â, B̂, Σ̂_w, Q̂)` in the identified basis.
    pub sysid_errors: [f64; 4],
    pub kappa0: usize,
    pub kappa1: usize,
    pub sigma: f64,
    pub b_bar: f64,
    pub lambda_m: f64,
    pub training: TrainingStats,
    pub eval_clip_count: u64,
    pub eval_clip_evaluated: u64,
    pub samples_phase1: u64,
    pub samples_eval: u64,
    /// Excluded from `report.csv` so reports stay reproducible.
    pub wall_clock_s: f64,
}

fn fraction(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn training_clip_fraction(&self) -> f64 {
        fraction(self.training.clip_count, self.training.clip_evaluated)
    }

    pub fn eval_clip_fraction(&self) -> f64 {
        fraction(self.eval_clip_count, self.eval_clip_evaluated)
    }

    /// `(metric, value)` rows in their fixed order.
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let f = format_f64;
        vec![
            ("instance", self.instance.clone()),
            ("J_learned", f(self.learned.mean)),
            ("J_learned_stderr", f(self.learned.stderr)),
            ("J_optimal", f(self.optimal.mean)),
            ("J_optimal_stderr", f(self.optimal.stderr)),
            ("J_zero", f(self.zero.mean)),
            ("J_zero_stderr", f(self.zero.stderr)),
            ("gap", f(self.gap)),
            ("gap_stderr", f(self.gap_stderr)),
            ("zero_gap", f(self.zero_gap)),
            ("zero_gap_stderr", f(self.zero_gap_stderr)),
            ("align_residual", f(self.alignment.residual)),
            ("align_sigma_min", f(self.alignment.sigma_min)),
            ("align_op_norm", f(self.alignment.op_norm)),
            ("S_id_sigma_min", f(linalg::sigma_min(&self.s_id))),
            ("sysid_err_A", f(self.sysid_errors[0])),
            ("sysid_err_B", f(self.sysid_errors[1])),
            ("sysid_err_sigma_w", f(self.sysid_errors[2])),
            ("sysid_err_Q", f(self.sysid_errors[3])),
            ("kappa0", self.kappa0.to_string()),
            ("kappa1", self.kappa1.to_string()),
            ("sigma", f(self.sigma)),
            ("b_bar", f(self.b_bar)),
            ("lambda_M", f(self.lambda_m)),
            ("train_clip_count", self.training.clip_count.to_string()),
            ("train_clip_evaluated", self.training.clip_evaluated.to_string()),
            ("train_clip_fraction", f(self.training_clip_fraction())),
            ("eval_clip_count", self.eval_clip_count.to_string()),
            ("eval_clip_evaluated", self.eval_clip_evaluated.to_string()),
            ("eval_clip_fraction", f(self.eval_clip_fraction())),
            ("samples_phase1", self.samples_phase1.to_string()),
            ("samples_phase3", self.training.trajectories.to_string()),
            ("samples_eval", self.samples_eval.to_string()),
        ]
    }

    pub fn report_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn decoder_errors_csv(&self) -> String {
        let mut out = String::from("t,mse\n");
        for (t, e) in self.decoder_errors.iter().enumerate() {
            let _ = writeln!(out, "{t},{}", format_f64(*e));
        }
        out
    }
}

/// Observation samples from the coarse decoder's training distribution.
fn alignment_sample(r: &Resolved, kappa1: usize, n: usize) -> Result<Vec<Trajectory>> {
    let inst = &r.instance;
    let policy = PolicyDef::open_loop(inst.spec.du(), 1.0)?;
    let opts = RolloutOptions { record_from: kappa1, first_index: 0 };
    rollout_with(&inst.spec, &inst.emission, &policy, kappa1.max(1), n, r.stage_seed("align"), opts)
}

/// Evaluates `policy` against `π_∞` and the zero policy on paired noise.
pub fn evaluate(
    r: &Resolved,
    n_eval: usize,
    n_align: usize,
    p1: &Phase1Output,
    est: &SysIdEstimates,
    policy: &LearnedPolicy,
    training: TrainingStats,
) -> Result<EvalReport> {
    let started = Instant::now();
    let inst = &r.instance;
    let (spec, em) = (&inst.spec, &inst.emission);
    let horizon = r.phase3.horizon;
    let wrap = |e: Error| e.at(Stage::Eval, None);
    let seed = r.stage_seed("eval");

    let s_id = r.identified_basis(p1).map_err(wrap)?;
    let target = SysIdEstimates::in_basis(spec, &s_id).map_err(wrap)?;
    let sysid_errors = est.errors(&target);

    let optimal = control::optimal_policy(spec, em).map_err(wrap)?;
    let zero = PolicyDef::zero(spec.du());
    let stack_eval =
        eval::evaluate_stack(spec, em, policy, &policy.stack, &s_id, horizon, n_eval, seed).map_err(wrap)?;
    let opt_costs = eval::rollout_costs(spec, em, &optimal, horizon, n_eval, seed).map_err(wrap)?;
    let zero_costs = eval::rollout_costs(spec, em, &zero, horizon, n_eval, seed).map_err(wrap)?;
    let vs_opt = eval::paired_from_costs(&stack_eval.costs, &opt_costs);
    let zero_vs_opt = eval::paired_from_costs(&zero_costs, &opt_costs);

    let align_trajs = alignment_sample(r, p1.kappa1, n_align).map_err(wrap)?;
    let ys: Vec<_> = align_trajs.iter().map(|tr| tr.y(p1.kappa1)).collect();
    let alignment = eval::align_decoder(p1.decoder.as_ref(), inst.emission.true_decoder().as_ref(), &ys).map_err(wrap)?;

    let lambda_m = build_noise_shaping(&est.a_hat, &est.b_hat, &est.sigma_w_hat, r.phase3.sigma, r.phase3.kappa)
        .map(|s| s.lambda_m)
        .map_err(wrap)?;

    Ok(EvalReport {
        instance: inst.name.clone(),
        learned: vs_opt.first,
        optimal: vs_opt.second,
        zero: zero_vs_opt.first,
        gap: vs_opt.gap,
        gap_stderr: vs_opt.gap_stderr,
        zero_gap: zero_vs_opt.gap,
        zero_gap_stderr: zero_vs_opt.gap_stderr,
        decoder_errors: stack_eval.decoder_errors,
        alignment,
        s_id,
        sysid_errors,
        kappa0: p1.kappa0,
        kappa1: p1.kappa1,
        sigma: policy.sigma,
        b_bar: policy.stack.b_bar,
        lambda_m,
        training,
        eval_clip_count: stack_eval.clipped,
        eval_clip_evaluated: stack_eval.evaluated,
        samples_phase1: 3 * r.phase1.n_id as u64,
        samples_eval: 3 * n_eval as u64 + n_align as u64,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

pub fn clip_events_csv(events: &[ClipEvent]) -> String {
    let mut out = String::from("iteration,t,traj,norm\n");
    for e in events {
        let _ = writeln!(out, "{},{},{},{}", e.iteration, e.t, e.trajectory, format_f64(e.norm));
    }
    out
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub resolved: Resolved,
    pub phase1: Phase1Output,
    pub sysid: SysIdEstimates,
    pub phase3: Phase3Output,
    pub report: EvalReport,
}

fn write(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::write(dir.join(name), text)?;
    }
    Ok(())
}

/// Runs `f` on a dedicated pool when `threads` is set.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Phases I → II → III, then evaluation. Artifacts are written to `out`
/// as each stage finishes, so a failure leaves the earlier ones on disk.
pub fn run_pipeline(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PipelineResult> {
    let started = Instant::now();
    let r = resolve(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    with_threads(cfg.threads, || -> Result<PipelineResult> {
        let (p1, data) = r.run_phase1()?;
        write(out, PHASE1_FILE, &p1.to_bundle().to_text())?;
        let est = r.run_phase2(&p1, &data)?;
        drop(data);
        write(out, SYSID_FILE, &est.to_bundle().to_text())?;
        let p3 = r.run_phase3(&est)?;
        if let Some(dir) = out {
            save_phase3(dir, &p3)?;
        }

        let n_align = cfg.n_align.unwrap_or(crate::config::DEFAULT_N_ALIGN);
        let mut report = evaluate(&r, cfg.n_eval, n_align, &p1, &est, &p3.policy, TrainingStats::from_output(&p3))?;
        report.wall_clock_s = started.elapsed().as_secs_f64();
        if let Some(dir) = out {
            save_report(dir, &report)?;
        }
        if cfg.write_trajectories {
            let n = cfg.n_eval.min(MAX_TRAJECTORY_EXPORT);
            let inst = &r.instance;
            let trajs = rollout(&inst.spec, &inst.emission, &p3.policy, cfg.horizon, n, r.stage_seed("eval"))?;
            write(out, TRAJECTORIES_FILE, &trajectories_to_csv(&trajs))?;
        }
        Ok(PipelineResult { resolved: r.clone(), phase1: p1, sysid: est, phase3: p3, report })
    })?
}

/// Rolls out the configured simulation policy for `horizon` steps and `n_eval` trajectories.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let inst = make_benchmark_instance(&cfg.instance)?;
    let (spec, em) = (&inst.spec, &inst.emission);
    let policy = match cfg.policy {
        SimPolicy::Optimal => control::optimal_policy(spec, em)?,
        SimPolicy::Zero => PolicyDef::zero(spec.du()),
        SimPolicy::OpenLoop => PolicyDef::open_loop(spec.du(), cfg.sigma.unwrap_or(1.0))?,
    };
    with_threads(cfg.threads, || {
        rollout(spec, em, &policy, cfg.horizon, cfg.n_eval, rng::derive_seed(cfg.seed, "simulate"))
            .map_err(|e| e.at(Stage::Simulate, None))
    })?
}

/// Loads a previously written Phase I model from `dir`.
pub fn load_phase1(r: &Resolved, dir: &Path) -> Result<Phase1Output> {
    Phase1Output::from_bundle(&MatrixBundle::load(&dir.join(PHASE1_FILE))?, &r.instance.class)
}

pub fn load_sysid(dir: &Path) -> Result<SysIdEstimates> {
    SysIdEstimates::from_bundle(&MatrixBundle::load(&dir.join(SYSID_FILE))?)
}

pub fn load_policy(r: &Resolved, dir: &Path) -> Result<(LearnedPolicy, TrainingStats)> {
    let b = MatrixBundle::load(&dir.join(POLICY_FILE))?;
    Ok((LearnedPolicy::from_bundle(&b, &r.instance.class)?, TrainingStats::read(&b)?))
}

/// Writes the Phase III artifacts for an already computed output.
pub fn save_phase3(dir: &Path, out: &Phase3Output) -> Result<()> {
    let mut bundle = out.to_bundle();
    TrainingStats::from_output(out).insert_into(&mut bundle);
    fs::write(dir.join(POLICY_FILE), bundle.to_text())?;
    fs::write(dir.join(CLIP_EVENTS_FILE), clip_events_csv(&out.clip_events))?;
    Ok(())
}

/// Writes report, decoder errors and timing for a report.
pub fn save_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(REPORT_FILE), report.report_csv())?;
    fs::write(dir.join(DECODER_ERRORS_FILE), report.decoder_errors_csv())?;
    fs::write(dir.join(TIMING_FILE), format!("metric,value\nwall_clock_s,{:.3}\n", report.wall_clock_s))?;
    Ok(())
}
