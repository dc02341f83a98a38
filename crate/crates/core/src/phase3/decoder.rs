//! Per-time decoders built from residual regressors, and the learned policy.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::regress::FittedRegressor;
use crate::sim::policy::{Policy, PolicyRun};

/// `v` if `‖v‖ ≤ b̄`, else the zero vector; the flag reports a clip.
pub fn clip(v: DVector<f64>, b_bar: f64) -> (DVector<f64>, bool) {
    if v.norm() <= b_bar {
        (v, false)
    } else {
        (DVector::zeros(v.len()), true)
    }
}

/// `f̃_{t+1} = ĥ_t(y_{t+1}) − Âĥ_t(y_t) + Âf̂_t`, clipped to `b̄`.
pub fn decoder_update(
    h_t: &FittedRegressor,
    y_next: &DVector<f64>,
    y: &DVector<f64>,
    f_t: &DVector<f64>,
    a_hat: &DMatrix<f64>,
    b_bar: f64,
) -> (DVector<f64>, f64, bool) {
    let tilde = h_t.predict(y_next) - a_hat * h_t.predict(y) + a_hat * f_t;
    let norm = tilde.norm();
    let (f, clipped) = clip(tilde, b_bar);
    (f, norm, clipped)
}

/// Decoders `f̂_0 ≡ 0, f̂_1, …, f̂_{len-1}`.
///
/// `f̂_1` uses the initial-state predictor `f̂_{A,0}` in place of `Âf̂_0`.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub a_hat: DMatrix<f64>,
    pub b_bar: f64,
    /// `ĥ_0, …, ĥ_{len-2}`.
    pub steps: Vec<FittedRegressor>,
    /// `y₀ ↦ f̂_{A,0}(y₀)`; present once the first step is learned.
    pub initial: Option<FittedRegressor>,
}

impl DecoderStack {
    pub fn new(a_hat: DMatrix<f64>, b_bar: f64) -> Self {
        Self { a_hat, b_bar, steps: Vec::new(), initial: None }
    }

    /// Number of decoders, `f̂_0` included.
    pub fn len(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn start(&self) -> StackRun<'_> {
        StackRun { stack: self, t: 0, prev_y: None, prev_f: DVector::zeros(self.dx()) }
    }

    /// Runs the decoders along `ys[0..]`, returning `f̂_t` for each time and
    /// `(t, ‖f̃_t‖)` for every clip.
    pub fn decode_history(&self, ys: &[&DVector<f64>]) -> Result<(Vec<DVector<f64>>, Vec<(usize, f64)>)> {
        let mut run = self.start();
        let mut out = Vec::with_capacity(ys.len());
        let mut clips = Vec::new();
        for (t, y) in ys.iter().enumerate() {
            let step = run.advance(y)?;
            if let Some(norm) = step.clipped {
                clips.push((t, norm));
            }
            out.push(step.value);
        }
        Ok((out, clips))
    }
}

#[derive(Debug, Clone)]
pub struct DecodedStep {
    pub value: DVector<f64>,
    /// Norm of the pre-clip vector when the clip fired.
    pub clipped: Option<f64>,
}

/// Streaming evaluation of a decoder stack along one trajectory.
#[derive(Debug, Clone)]
pub struct StackRun<'a> {
    stack: &'a DecoderStack,
    t: usize,
    prev_y: Option<DVector<f64>>,
    prev_f: DVector<f64>,
}

impl StackRun<'_> {
    /// Consumes `y_t` and returns `f̂_t(y_{0:t})`.
    pub fn advance(&mut self, y: &DVector<f64>) -> Result<DecodedStep> {
        let t = self.t;
        let step = if t == 0 {
            DecodedStep { value: DVector::zeros(self.stack.dx()), clipped: None }
        } else {
            let h = self.stack.steps.get(t - 1).ok_or_else(|| {
                Error::InvalidInput(format!("decoder f_{t} requested but only {} decoders exist", self.stack.len()))
            })?;
            let prev_y = self.prev_y.as_ref().expect("previous observation retained");
            let carry = if t == 1 {
                let init = self.stack.initial.as_ref().ok_or(Error::InvalidInput("initial-state predictor missing".into()))?;
                init.predict(prev_y)
            } else {
                &self.stack.a_hat * &self.prev_f
            };
            let tilde = h.predict(y) - &self.stack.a_hat * h.predict(prev_y) + carry;
            if !tilde.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("decoder output at t={t}")));
            }
            let norm = tilde.norm();
            let (value, clipped) = clip(tilde, self.stack.b_bar);
            DecodedStep { value, clipped: clipped.then_some(norm) }
        };
        self.prev_y = Some(y.clone());
        self.prev_f = step.value.clone();
        self.t += 1;
        Ok(step)
    }
}

#[derive(Debug, Default)]
pub struct ClipCounter {
    clipped: AtomicU64,
    evaluated: AtomicU64,
}

impl ClipCounter {
    pub fn record(&self, clipped: bool) {
        self.evaluated.fetch_add(1, Ordering::Relaxed);
        if clipped {
            self.clipped.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// `(clipped, evaluated)`.
    pub fn snapshot(&self) -> (u64, u64) {
        (self.clipped.load(Ordering::Relaxed), self.evaluated.load(Ordering::Relaxed))
    }

    pub fn reset(&self) {
        self.clipped.store(0, Ordering::Relaxed);
        self.evaluated.store(0, Ordering::Relaxed);
    }
}

/// `π̂_t(y_{0:t}) = K̂ f̂_t(y_{0:t}) + ν_t`; after `active_until` only `ν_t` remains.
#[derive(Debug)]
pub struct LearnedPolicy {
    pub k_hat: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
    pub sigma: f64,
    pub stack: DecoderStack,
    pub active_until: usize,
    clips: ClipCounter,
}

impl Clone for LearnedPolicy {
    fn clone(&self) -> Self {
        Self {
            k_hat: self.k_hat.clone(),
            p_hat: self.p_hat.clone(),
            sigma: self.sigma,
            stack: self.stack.clone(),
            active_until: self.active_until,
            clips: ClipCounter::default(),
        }
    }
}

impl LearnedPolicy {
    pub fn new(k_hat: DMatrix<f64>, p_hat: DMatrix<f64>, sigma: f64, stack: DecoderStack) -> Self {
        let active_until = stack.len() - 1;
        Self { k_hat, p_hat, sigma, stack, active_until, clips: ClipCounter::default() }
    }

    /// Clip statistics `(clipped, evaluated)` accumulated by rollouts since the last reset.
    pub fn clip_stats(&self) -> (u64, u64) {
        self.clips.snapshot()
    }

    pub fn reset_clip_stats(&self) {
        self.clips.reset();
    }

    /// Same policy with the gain switched off after time `t`.
    pub fn roll_in(&self, t: usize) -> RollIn<'_> {
        RollIn { policy: self, until: t }
    }
}

struct LearnedRun<'a> {
    policy: &'a LearnedPolicy,
    until: usize,
    run: StackRun<'a>,
}

impl PolicyRun for LearnedRun<'_> {
    fn control(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        if t > self.until {
            return Ok(DVector::zeros(self.policy.k_hat.nrows()));
        }
        let step = self.run.advance(y)?;
        if t >= 1 {
            self.policy.clips.record(step.clipped.is_some());
        }
        Ok(&self.policy.k_hat * step.value)
    }
}

impl Policy for LearnedPolicy {
    fn input_dim(&self) -> usize {
        self.k_hat.nrows()
    }

    fn exploration_std(&self) -> f64 {
        self.sigma
    }

    fn start(&self) -> Box<dyn PolicyRun + '_> {
        Box::new(LearnedRun { policy: self, until: self.active_until, run: self.stack.start() })
    }
}

/// A learned policy executed up to `until`, followed by pure exploration.
pub struct RollIn<'a> {
    policy: &'a LearnedPolicy,
    until: usize,
}

impl Policy for RollIn<'_> {
    fn input_dim(&self) -> usize {
        self.policy.k_hat.nrows()
    }

    fn exploration_std(&self) -> f64 {
        self.policy.sigma
    }

    fn start(&self) -> Box<dyn PolicyRun + '_> {
        Box::new(LearnedRun { policy: self.policy, until: self.until, run: self.policy.stack.start() })
    }
}
