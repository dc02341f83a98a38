//! Predictor for `A x₀` from `y₀`, learned from open-loop exploration.
//!
//! Under `u₀ = ν₀` the first-step residual `ĥ₀(y₁) − Âĥ₀(y₀) − B̂ν₀` is the
//! process noise `w₀` in the learned basis. Regressing it on `y₁` gives
//! `Σ_w Σ₁⁻¹ x₁`, whose second moment `Σ_cov` and projection onto `y₀`
//! combine into `Σ_w Σ_cov⁻¹ E[· | y₀] = A x₀`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::regress::{self, FittedRegressor, StructuredClass};
use crate::sim::rollout::Trajectory;

pub const DEFAULT_COV_GUARD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct InitialState {
    pub h_ol1: FittedRegressor,
    pub sigma_cov: DMatrix<f64>,
    pub h_ol0: FittedRegressor,
    /// `Σ̂_w Σ̂_cov⁻¹`.
    pub gain: DMatrix<f64>,
    /// `f̂_{A,0}` as a single regressor `y₀ ↦ gain · h̃_ol,0(y₀)`.
    pub f_a0: FittedRegressor,
}

/// Uses trajectories `[0, n)` to fit `ĥ_ol,1` and `[n, 2n)` for `Σ̂_cov` and `h̃_ol,0`.
pub fn learn_initial_state(
    trajs: &[Trajectory],
    h0: &FittedRegressor,
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    sigma_w_hat: &DMatrix<f64>,
    class: &StructuredClass,
    guard: f64,
) -> Result<InitialState> {
    if trajs.len() < 2 {
        return Err(Error::InsufficientData { context: "initial-state batches", needed: 2, got: trajs.len() });
    }
    if trajs.iter().any(|tr| tr.start != 0 || tr.horizon() < 1) {
        return Err(Error::InvalidInput("initial-state trajectories must cover t = 0 and t = 1".into()));
    }
    let (first, second) = trajs.split_at(trajs.len() / 2);

    let y1: Vec<&DVector<f64>> = first.iter().map(|tr| tr.y(1)).collect();
    let targets: Vec<DVector<f64>> = first
        .iter()
        .map(|tr| h0.predict(tr.y(1)) - a_hat * h0.predict(tr.y(0)) - b_hat * tr.nu(0))
        .collect();
    let h_ol1 = regress::erm_fit(class, &y1, &targets)?;

    let preds: Vec<DVector<f64>> = second.iter().map(|tr| h_ol1.predict(tr.y(1))).collect();
    let dx = a_hat.nrows();
    let mut cov = DMatrix::zeros(dx, dx);
    let inv_n = 1.0 / second.len() as f64;
    for p in &preds {
        cov.ger(inv_n, p, p, 1.0);
    }
    let sigma_cov = linalg::symmetrize(&cov);
    let cov_inv = linalg::spd_inverse(&sigma_cov, guard)?;

    let y0: Vec<&DVector<f64>> = second.iter().map(|tr| tr.y(0)).collect();
    let h_ol0 = regress::erm_fit(class, &y0, &preds)?;

    let gain = sigma_w_hat * cov_inv;
    let f_a0 = FittedRegressor {
        index: h_ol0.index,
        decoder: h_ol0.decoder.clone(),
        m: &gain * &h_ol0.m,
        loss: f64::NAN,
        clamped: false,
    };
    Ok(InitialState { h_ol1, sigma_cov, h_ol0, gain, f_a0 })
}
