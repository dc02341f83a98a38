//! Monte Carlo policy evaluation and decoder alignment.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::phase3::DecoderStack;
use crate::sim::emission::{Decoder, EmissionModel};
use crate::sim::policy::Policy;
use crate::sim::rollout::{rollout_with, RolloutOptions, Trajectory};
use crate::sim::system::SystemSpec;

const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    /// Mean over rollouts of `(1/T) Σ_{t=1..T} c_t`.
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl CostEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, stderr: (var / n as f64).sqrt(), n }
    }
}

fn for_each_chunk(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &dyn Policy,
    horizon: usize,
    n: usize,
    seed: u64,
    mut visit: impl FnMut(&[Trajectory]) -> Result<()>,
) -> Result<()> {
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let opts = RolloutOptions { record_from: 0, first_index: start as u64 };
        visit(&rollout_with(spec, emission, policy, horizon, len, seed, opts)?)?;
        start += len;
    }
    Ok(())
}

fn check_n_eval(n_eval: usize) -> Result<()> {
    if n_eval < 2 {
        return Err(Error::InvalidInput(format!("n_eval must be >= 2, got {n_eval}")));
    }
    Ok(())
}

/// Per-rollout average costs; rollout `i` uses substream `(seed, i)`.
pub fn rollout_costs(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &dyn Policy,
    horizon: usize,
    n_eval: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut costs = Vec::with_capacity(n_eval);
    for_each_chunk(spec, emission, policy, horizon, n_eval, seed, |trajs| {
        costs.extend(trajs.iter().map(Trajectory::average_cost));
        Ok(())
    })?;
    Ok(costs)
}

pub fn estimate_cost(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &dyn Policy,
    horizon: usize,
    n_eval: usize,
    seed: u64,
) -> Result<CostEstimate> {
    check_n_eval(n_eval)?;
    Ok(CostEstimate::from_samples(&rollout_costs(spec, emission, policy, horizon, n_eval, seed)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedGap {
    pub first: CostEstimate,
    pub second: CostEstimate,
    /// Mean of per-rollout differences `first − second`.
    pub gap: f64,
    pub gap_stderr: f64,
}

/// Evaluates two policies on identical initial states and process noise.
pub fn paired_gap(
    spec: &SystemSpec,
    emission: &EmissionModel,
    first: &dyn Policy,
    second: &dyn Policy,
    horizon: usize,
    n_eval: usize,
    seed: u64,
) -> Result<PairedGap> {
    check_n_eval(n_eval)?;
    let a = rollout_costs(spec, emission, first, horizon, n_eval, seed)?;
    let b = rollout_costs(spec, emission, second, horizon, n_eval, seed)?;
    Ok(paired_from_costs(&a, &b))
}

pub fn paired_from_costs(a: &[f64], b: &[f64]) -> PairedGap {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = CostEstimate::from_samples(&diffs);
    PairedGap { first: CostEstimate::from_samples(a), second: CostEstimate::from_samples(b), gap: d.mean, gap_stderr: d.stderr }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub s: DMatrix<f64>,
    /// Mean of `‖f̂(y) − S f⋆(y)‖²` at the optimum.
    pub residual: f64,
    pub sigma_min: f64,
    pub op_norm: f64,
}

/// Least-squares `S` with `f̂ ≈ S f⋆` over the sample.
pub fn align_decoder(f_hat: &dyn Decoder, f_star: &dyn Decoder, ys: &[&DVector<f64>]) -> Result<Alignment> {
    let d = f_star.output_dim();
    if ys.len() < d.max(1) {
        return Err(Error::InsufficientData { context: "decoder alignment", needed: d.max(1), got: ys.len() });
    }
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = ys.iter().map(|y| (f_hat.decode(y), f_star.decode(y))).collect();
    let inv_n = 1.0 / ys.len() as f64;
    let mut cross = DMatrix::zeros(f_hat.output_dim(), d);
    let mut gram = DMatrix::zeros(d, d);
    for (fh, fs) in &pairs {
        cross.ger(inv_n, fh, fs, 1.0);
        gram.ger(inv_n, fs, fs, 1.0);
    }
    let scale = gram.trace() / d as f64;
    if !(scale > 0.0) || linalg::min_sym_eigenvalue(&gram) <= 1e-12 * scale {
        return Err(Error::Singular("true-decoder sample covariance"));
    }
    let chol = linalg::symmetrize(&gram).cholesky().ok_or(Error::Singular("true-decoder sample covariance"))?;
    let s = chol.solve(&cross.transpose()).transpose();
    let residual = pairs.iter().map(|(fh, fs)| (fh - &s * fs).norm_squared()).sum::<f64>() * inv_n;
    Ok(Alignment { sigma_min: linalg::sigma_min(&s), op_norm: linalg::op_norm(&s), s, residual })
}

/// `E‖f̂(y) − S x‖²` for a fixed basis `S` over `(y, x)` pairs.
pub fn decoder_mse(f_hat: &dyn Decoder, s: &DMatrix<f64>, samples: &[(&DVector<f64>, &DVector<f64>)]) -> f64 {
    samples.iter().map(|(y, x)| (f_hat.decode(y) - s * *x).norm_squared()).sum::<f64>() / samples.len() as f64
}

/// Evaluation of a learned decoder stack along the rollouts of a policy.
#[derive(Debug, Clone)]
pub struct StackEvaluation {
    pub costs: Vec<f64>,
    /// `E‖f̂_t − S x_t‖²` for `t = 0..=T`.
    pub decoder_errors: Vec<f64>,
    pub clipped: u64,
    pub evaluated: u64,
}

/// Rolls out `policy` (which should run `stack`) and scores the stack's
/// decoders against `S x_t`.
pub fn evaluate_stack(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &dyn Policy,
    stack: &DecoderStack,
    s: &DMatrix<f64>,
    horizon: usize,
    n_eval: usize,
    seed: u64,
) -> Result<StackEvaluation> {
    check_n_eval(n_eval)?;
    if stack.len() < horizon + 1 {
        return Err(Error::InvalidInput(format!("stack has {} decoders, horizon {horizon} needs {}", stack.len(), horizon + 1)));
    }
    let mut costs = Vec::with_capacity(n_eval);
    let mut sums = vec![0.0; horizon + 1];
    let (mut clipped, mut evaluated) = (0u64, 0u64);
    for_each_chunk(spec, emission, policy, horizon, n_eval, seed, |trajs| {
        for tr in trajs {
            costs.push(tr.average_cost());
            let ys: Vec<&DVector<f64>> = (0..=horizon).map(|t| tr.y(t)).collect();
            let (fs, clips) = stack.decode_history(&ys)?;
            for (t, f) in fs.iter().enumerate() {
                sums[t] += (f - s * tr.x(t)).norm_squared();
            }
            clipped += clips.len() as u64;
            evaluated += horizon as u64;
        }
        Ok(())
    })?;
    let decoder_errors = sums.into_iter().map(|v| v / n_eval as f64).collect();
    Ok(StackEvaluation { costs, decoder_errors, clipped, evaluated })
}
