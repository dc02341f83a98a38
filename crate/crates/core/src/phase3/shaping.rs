//! Noise-shaping matrices: Gaussian conditional-expectation prefactors that
//! turn input-prediction regressions into state-increment estimates.

use nalgebra::DMatrix;

use crate::control;
use crate::error::{Error, Result};
use crate::linalg;

/// Threshold below which the limiting matrix is reported as numerically rank deficient.
pub const LAMBDA_M_WARN: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct NoiseShaping {
    /// `M_k = C_kᵀ(C_kC_kᵀ + σ⁻² Σ_k)⁻¹` for `k = 1..κ` (index `k-1`).
    pub m_k: Vec<DMatrix<f64>>,
    /// `𝓜 = [M₁; M₂A; …; M_κA^{κ−1}]`.
    pub big_m: DMatrix<f64>,
    /// `M̄ = [M̄₁; M̄₂A; …]` with `M̄_k = C_kᵀΣ_k⁻¹`, the `σ → 0` limit of `𝓜/σ²`.
    pub m_bar: DMatrix<f64>,
    /// `λ_min^{1/2}(M̄ᵀM̄)`.
    pub lambda_m: f64,
}

/// `Σ_k = Σ_{i=1..k} A^{i−1} Σ_w (A^{i−1})ᵀ`.
pub fn noise_sum(a: &DMatrix<f64>, sigma_w: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut total = DMatrix::zeros(a.nrows(), a.nrows());
    for i in 1..=k {
        let p = linalg::matrix_power(a, i - 1);
        total += &p * sigma_w * p.transpose();
    }
    linalg::symmetrize(&total)
}

/// Stacks `blocks[k-1] · A^{k−1}`; shared by construction and verification.
pub fn stack_blocks(blocks: &[DMatrix<f64>], a: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: Vec<DMatrix<f64>> = blocks
        .iter()
        .enumerate()
        .map(|(i, m)| m * linalg::matrix_power(a, i))
        .collect();
    linalg::vstack(&rows)
}

fn spd_solve_right(lhs: &DMatrix<f64>, inner: DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    // lhs · inner⁻¹ = (inner⁻¹ lhsᵀ)ᵀ for symmetric inner
    let chol = linalg::symmetrize(&inner).cholesky().ok_or(Error::Singular(what))?;
    Ok(chol.solve(&lhs.transpose()).transpose())
}

pub fn build_noise_shaping(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma: f64,
    kappa: usize,
) -> Result<NoiseShaping> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("noise shaping needs sigma > 0, got {sigma}")));
    }
    if kappa < 1 {
        return Err(Error::InvalidInput("kappa must be >= 1".into()));
    }
    let mut m_k = Vec::with_capacity(kappa);
    let mut m_bar_k = Vec::with_capacity(kappa);
    for k in 1..=kappa {
        let c = control::controllability_matrix(a, b, k);
        let s = noise_sum(a, sigma_w, k);
        let inner = &c * c.transpose() + &s / (sigma * sigma);
        m_k.push(spd_solve_right(&c.transpose(), inner, "C_kC_kᵀ + σ⁻²Σ_k")?);
        m_bar_k.push(spd_solve_right(&c.transpose(), s, "noise covariance Σ_k")?);
    }
    let big_m = stack_blocks(&m_k, a);
    let m_bar = stack_blocks(&m_bar_k, a);
    let lambda_m = linalg::min_sym_eigenvalue(&(m_bar.transpose() * &m_bar)).max(0.0).sqrt();
    if lambda_m < LAMBDA_M_WARN {
        log::warn!("limiting shaping matrix is numerically rank deficient (lambda_M = {lambda_m:.3e})");
    }
    Ok(NoiseShaping { m_k, big_m, m_bar, lambda_m })
}
