//! Certainty-equivalent gain plus per-time decoders learned on-policy.
//!
//! At each `t` the current policy is rolled in up to `t`, followed by pure
//! Gaussian inputs for `κ` steps. Two regressions on disjoint halves turn the
//! injected inputs into a residual decoder `ĥ_t` whose increments
//! `ĥ_t(y_{t+1}) − Âĥ_t(y_t)` track the latent increments, which then extend
//! the decoder to `t+1`.

pub mod decoder;
pub mod initial;
pub mod shaping;

use nalgebra::{DMatrix, DVector};

pub use decoder::{clip, decoder_update, DecoderStack, LearnedPolicy, RollIn, StackRun};
pub use initial::{learn_initial_state, InitialState, DEFAULT_COV_GUARD};
pub use shaping::{build_noise_shaping, NoiseShaping};

use crate::control::{self, DareSolution};
use crate::error::{Error, Result, Stage};
use crate::linalg;
use crate::matrix_csv::MatrixBundle;
use crate::phase2::SysIdEstimates;
use crate::regress::{self, DecoderClass, FittedRegressor, StructuredClass, StructuredDesign};
use crate::rng;
use crate::sim::emission::EmissionModel;
use crate::sim::policy::PolicyDef;
use crate::sim::rollout::{rollout, Trajectory};
use crate::sim::system::SystemSpec;

/// Added to `Q̂` before the Riccati solve.
pub const Q_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Phase3Config {
    pub n_op: usize,
    pub n_init: usize,
    pub sigma: f64,
    pub b_bar: f64,
    pub horizon: usize,
    pub kappa: usize,
    pub r_op: f64,
    pub cov_guard: f64,
}

/// `10 (d_x + d_u) ln(max(n_op, 3))`.
pub fn default_b_bar(dx: usize, du: usize, n_op: usize) -> f64 {
    10.0 * (dx + du) as f64 * (n_op.max(3) as f64).ln()
}

impl Phase3Config {
    /// Defaults: `n_init = n_op`, `r_op = Ψ⋆³`, the default clip radius and covariance guard.
    pub fn new(n_op: usize, horizon: usize, kappa: usize, sigma: f64, dx: usize, du: usize, psi_star: f64) -> Self {
        Self {
            n_op,
            n_init: n_op,
            sigma,
            b_bar: default_b_bar(dx, du, n_op),
            horizon,
            kappa,
            r_op: psi_star.powi(3),
            cov_guard: DEFAULT_COV_GUARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::InvalidInput(format!("sigma must lie in (0, 1], got {}", self.sigma)));
        }
        if !(self.b_bar > 0.0) {
            return Err(Error::InvalidInput(format!("b_bar must be positive, got {}", self.b_bar)));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidInput("horizon T must be >= 1".into()));
        }
        if self.kappa < 1 {
            return Err(Error::InvalidInput("kappa must be >= 1".into()));
        }
        if self.n_op < 1 || self.n_init < 1 {
            return Err(Error::InvalidInput("n_op and n_init must be positive".into()));
        }
        if !(self.r_op > 0.0 && self.r_op.is_finite()) {
            return Err(Error::InvalidInput(format!("r_op must be positive, got {}", self.r_op)));
        }
        if !(self.cov_guard > 0.0) {
            return Err(Error::InvalidInput("covariance guard must be positive".into()));
        }
        Ok(())
    }
}

/// A decoder output that exceeded `b̄` and was zeroed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipEvent {
    /// Learning iteration whose data exposed the clip.
    pub iteration: usize,
    pub t: usize,
    pub trajectory: u64,
    pub norm: f64,
}

/// On-policy data for iteration `t`, split into the two regression halves.
#[derive(Debug, Clone)]
pub struct OnPolicyData {
    pub t: usize,
    pub halves: [Vec<Trajectory>; 2],
    /// `f̂_t(y_{0:t})` for each trajectory of each half.
    pub decoded: [Vec<DVector<f64>>; 2],
    pub clips: Vec<ClipEvent>,
    /// Decoder evaluations at `τ ≥ 1` that could have clipped.
    pub evaluated: u64,
}

/// Rolls in `policy` up to `t`, then explores for `κ` steps; `2·n_op` trajectories.
pub fn collect_onpolicy(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &LearnedPolicy,
    t: usize,
    config: &Phase3Config,
    seed: u64,
) -> Result<OnPolicyData> {
    if policy.stack.len() < t + 1 {
        return Err(Error::InvalidInput(format!("roll-in to t={t} needs {} decoders, have {}", t + 1, policy.stack.len())));
    }
    let roll_in = policy.roll_in(t);
    let trajs = rollout(spec, emission, &roll_in, t + config.kappa, 2 * config.n_op, seed)?;
    let mut clips = Vec::new();
    let mut decoded = Vec::with_capacity(trajs.len());
    for tr in &trajs {
        let ys: Vec<&DVector<f64>> = (0..=t).map(|tau| tr.y(tau)).collect();
        let (fs, clipped) = policy.stack.decode_history(&ys)?;
        for (tau, norm) in clipped {
            log::debug!("clip at iteration {t}: tau={tau} trajectory={} norm={norm:.4}", tr.index);
            clips.push(ClipEvent { iteration: t, t: tau, trajectory: tr.index, norm });
        }
        decoded.push(fs.into_iter().last().expect("history is nonempty"));
    }
    let mut first = trajs;
    let second = first.split_off(config.n_op);
    let second_decoded = decoded.split_off(config.n_op);
    Ok(OnPolicyData {
        t,
        halves: [first, second],
        decoded: [decoded, second_decoded],
        clips,
        evaluated: (2 * config.n_op * t) as u64,
    })
}

/// `g = B̂K̂f̂_t(y_{0:t})` for each trajectory.
fn feedback_terms(decoded: &[DVector<f64>], bk: &DMatrix<f64>) -> Vec<DVector<f64>> {
    decoded.iter().map(|f| bk * f).collect()
}

/// Returns the first-stage regressors `ĥ_{t,1..κ}` and the residual decoder `ĥ_t`.
pub fn fit_residual_regressors(
    data: &OnPolicyData,
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    k_hat: &DMatrix<f64>,
    shaping: &NoiseShaping,
    class: &StructuredClass,
) -> Result<(Vec<FittedRegressor>, FittedRegressor)> {
    let t = data.t;
    let kappa = shaping.m_k.len();
    let bk = b_hat * k_hat;
    let [half1, half2] = &data.halves;
    if half1.iter().chain(half2).any(|tr| tr.horizon() < t + kappa) {
        return Err(Error::InvalidInput(format!("on-policy trajectories must reach t+kappa = {}", t + kappa)));
    }
    let a_pows: Vec<DMatrix<f64>> = (0..=kappa).map(|k| linalg::matrix_power(a_hat, k)).collect();

    let g1 = feedback_terms(&data.decoded[0], &bk);
    let mut stage_one = Vec::with_capacity(kappa);
    for k in 1..=kappa {
        let m = &shaping.m_k[k - 1];
        let lefts = vec![m.clone(), -(m * &a_pows[k])];
        let offset = m * &a_pows[k - 1];
        let inputs = vec![
            half1.iter().map(|tr| tr.y(t + k)).collect(),
            half1.iter().map(|tr| tr.y(t)).collect(),
        ];
        let targets = half1
            .iter()
            .zip(&g1)
            .map(|(tr, g)| {
                let nus: Vec<&DVector<f64>> = (t..t + k).map(|tau| tr.nu(tau)).collect();
                linalg::vstack_vectors(&nus) + &offset * g
            })
            .collect();
        stage_one.push(regress::erm_fit_structured(class, &StructuredDesign { lefts, inputs, targets })?);
    }

    let g2 = feedback_terms(&data.decoded[1], &bk);
    let big_m = &shaping.big_m;
    let targets: Vec<DVector<f64>> = half2
        .iter()
        .zip(&g2)
        .map(|(tr, g)| {
            let blocks: Vec<DVector<f64>> = stage_one
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let k = i + 1;
                    &shaping.m_k[i] * (h.predict(tr.y(t + k)) - &a_pows[k] * h.predict(tr.y(t)) - &a_pows[k - 1] * g)
                })
                .collect();
            let refs: Vec<&DVector<f64>> = blocks.iter().collect();
            linalg::vstack_vectors(&refs) + big_m * g
        })
        .collect();
    let design = StructuredDesign {
        lefts: vec![big_m.clone(), -(big_m * a_hat)],
        inputs: vec![half2.iter().map(|tr| tr.y(t + 1)).collect(), half2.iter().map(|tr| tr.y(t)).collect()],
        targets,
    };
    let h_t = regress::erm_fit_structured(class, &design)?;
    Ok((stage_one, h_t))
}

/// Mean of `‖(ĥ(y_{t+1}) − Aĥ(y_t)) − S(x_{t+1} − Ax_t)‖²` with `A` the
/// true dynamics and `S` the basis the decoder is expected to live in.
pub fn increment_error(trajs: &[Trajectory], t: usize, h: &FittedRegressor, a: &DMatrix<f64>, a_hat: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let total: f64 = trajs
        .iter()
        .map(|tr| {
            let learned = h.predict(tr.y(t + 1)) - a_hat * h.predict(tr.y(t));
            let truth = s * (tr.x(t + 1) - a * tr.x(t));
            (learned - truth).norm_squared()
        })
        .sum();
    total / trajs.len() as f64
}

#[derive(Debug, Clone)]
pub struct Phase3Output {
    pub policy: LearnedPolicy,
    pub dare: DareSolution,
    pub shaping: NoiseShaping,
    pub initial: InitialState,
    /// `ĥ_{t,k}` indexed `[t][k-1]`.
    pub stage_one: Vec<Vec<FittedRegressor>>,
    pub clip_events: Vec<ClipEvent>,
    pub clip_evaluated: u64,
    /// Trajectories collected across all iterations.
    pub trajectories_used: usize,
}

impl Phase3Output {
    pub fn clip_fraction(&self) -> f64 {
        if self.clip_evaluated == 0 {
            0.0
        } else {
            self.clip_events.len() as f64 / self.clip_evaluated as f64
        }
    }
}

pub fn compute_policy(
    spec: &SystemSpec,
    emission: &EmissionModel,
    class: &DecoderClass,
    est: &SysIdEstimates,
    config: &Phase3Config,
    seed: u64,
) -> Result<Phase3Output> {
    config.validate().map_err(|e| e.at(Stage::Phase3, None))?;
    let dx = est.a_hat.nrows();
    if class.feature_dim() == 0 || dx == 0 {
        return Err(Error::InvalidInput("empty decoder class or state".into()).at(Stage::Phase3, None));
    }
    let q = &est.q_hat + DMatrix::identity(dx, dx) * Q_REGULARIZATION;
    let dare = control::solve_dare(&est.a_hat, &est.b_hat, &q, spec.r()).map_err(|e| e.at(Stage::Phase3, None))?;
    let shaping = build_noise_shaping(&est.a_hat, &est.b_hat, &est.sigma_w_hat, config.sigma, config.kappa)
        .map_err(|e| e.at(Stage::Phase3, None))?;
    let hclass = StructuredClass::new(class.clone(), dx, config.r_op).map_err(|e| e.at(Stage::Phase3, None))?;

    let stack = DecoderStack::new(est.a_hat.clone(), config.b_bar);
    let mut policy = LearnedPolicy::new(dare.k.clone(), dare.p.clone(), config.sigma, stack);
    let mut stage_one = Vec::with_capacity(config.horizon);
    let mut clip_events = Vec::new();
    let mut clip_evaluated = 0;
    let mut trajectories_used = 0;
    let mut initial = None;

    for t in 0..config.horizon {
        let mut step = || -> Result<()> {
            let data = collect_onpolicy(spec, emission, &policy, t, config, rng::derive_seed(seed, &format!("phase3/onpolicy/{t}")))?;
            trajectories_used += 2 * config.n_op;
            clip_evaluated += data.evaluated;
            clip_events.extend_from_slice(&data.clips);
            let (first, h_t) = fit_residual_regressors(&data, &est.a_hat, &est.b_hat, &dare.k, &shaping, &hclass)?;
            drop(data);
            if t == 0 {
                let open = PolicyDef::open_loop(spec.du(), config.sigma)?;
                let trajs = rollout(spec, emission, &open, 1, 2 * config.n_init, rng::derive_seed(seed, "phase3/initial"))?;
                trajectories_used += 2 * config.n_init;
                let init = learn_initial_state(&trajs, &h_t, &est.a_hat, &est.b_hat, &est.sigma_w_hat, &hclass, config.cov_guard)?;
                policy.stack.initial = Some(init.f_a0.clone());
                initial = Some(init);
            }
            stage_one.push(first);
            policy.stack.steps.push(h_t);
            Ok(())
        };
        step().map_err(|e| e.at(Stage::Phase3, Some(t)))?;
        log::info!("phase3 iteration {t} done ({} clips so far)", clip_events.len());
    }
    policy.active_until = config.horizon;
    let initial = initial.expect("horizon >= 1 runs the initial-state step");
    Ok(Phase3Output { policy, dare, shaping, initial, stage_one, clip_events, clip_evaluated, trajectories_used })
}

fn insert_regressor(b: &mut MatrixBundle, key: &str, h: &FittedRegressor) {
    b.insert_scalar(format!("{key}.index"), h.index as f64);
    b.insert(format!("{key}.M"), h.m.clone());
}

fn read_regressor(b: &MatrixBundle, key: &str, class: &DecoderClass) -> Result<FittedRegressor> {
    let index = b.scalar(&format!("{key}.index"))?;
    if !(index >= 0.0 && index.fract() == 0.0) {
        return Err(Error::Parse(format!("{key}.index must be a non-negative integer")));
    }
    FittedRegressor::from_parts(class, index as usize, b.get(&format!("{key}.M"))?.clone())
}

impl LearnedPolicy {
    pub fn to_bundle(&self) -> MatrixBundle {
        let mut b = MatrixBundle::new();
        b.insert("K_hat", self.k_hat.clone());
        b.insert("P_hat", self.p_hat.clone());
        b.insert("A_hat", self.stack.a_hat.clone());
        b.insert_scalar("sigma", self.sigma);
        b.insert_scalar("b_bar", self.stack.b_bar);
        b.insert_scalar("T", self.stack.steps.len() as f64);
        if let Some(init) = &self.stack.initial {
            insert_regressor(&mut b, "f_A0", init);
        }
        for (t, h) in self.stack.steps.iter().enumerate() {
            insert_regressor(&mut b, &format!("h.{t}"), h);
        }
        b
    }

    pub fn from_bundle(b: &MatrixBundle, class: &DecoderClass) -> Result<Self> {
        let horizon = b.scalar("T")?;
        if !(horizon >= 0.0 && horizon.fract() == 0.0) {
            return Err(Error::Parse("T must be a non-negative integer".into()));
        }
        let mut stack = DecoderStack::new(b.get("A_hat")?.clone(), b.scalar("b_bar")?);
        if b.contains("f_A0.index") {
            stack.initial = Some(read_regressor(b, "f_A0", class)?);
        }
        for t in 0..horizon as usize {
            stack.steps.push(read_regressor(b, &format!("h.{t}"), class)?);
        }
        let k_hat = b.get("K_hat")?.clone();
        if k_hat.ncols() != stack.dx() {
            return Err(Error::dims("policy gain columns", stack.dx(), k_hat.ncols()));
        }
        Ok(LearnedPolicy::new(k_hat, b.get("P_hat")?.clone(), b.scalar("sigma")?, stack))
    }
}

impl Phase3Output {
    /// The policy plus every first-stage regressor.
    pub fn to_bundle(&self) -> MatrixBundle {
        let mut b = self.policy.to_bundle();
        for (t, hs) in self.stage_one.iter().enumerate() {
            for (i, h) in hs.iter().enumerate() {
                insert_regressor(&mut b, &format!("h.{t}.{}", i + 1), h);
            }
        }
        b.insert("sigma_cov", self.initial.sigma_cov.clone());
        b.insert_scalar("lambda_M", self.shaping.lambda_m);
        b
    }
}
