//! System identification in the coarse decoder's basis.

use nalgebra::{DMatrix, DVector};

use crate::control;
use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix_csv::MatrixBundle;
use crate::phase1::IdSample;
use crate::regress;
use crate::sim::emission::Decoder;
use crate::sim::system::SystemSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdEstimates {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub sigma_w_hat: DMatrix<f64>,
    pub q_hat: DMatrix<f64>,
}

/// Decoded `(f̂(y_{κ₁}), f̂(y_{κ₁+1}))` pairs, computed once per batch.
struct Decoded {
    now: Vec<DVector<f64>>,
    next: Vec<DVector<f64>>,
}

fn decode_batch(batch: &[IdSample], f: &dyn Decoder) -> Result<Decoded> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { context: "system identification batch", needed: 1, got: 0 });
    }
    let now: Vec<_> = batch.iter().map(|s| f.decode(&s.y)).collect();
    let next: Vec<_> = batch.iter().map(|s| f.decode(&s.y_next)).collect();
    if now.iter().chain(&next).any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("decoded identification batch".into()));
    }
    Ok(Decoded { now, next })
}

fn dynamics_from(batch: &[IdSample], d: &Decoded) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dx = d.now[0].len();
    let inputs: Vec<DVector<f64>> = d.now.iter().zip(batch).map(|(f, s)| linalg::vstack_vectors(&[f, &s.u])).collect();
    let w = regress::fit_linear_map(&inputs, &d.next)?;
    if !linalg::all_finite(&w) {
        return Err(Error::Singular("dynamics regression"));
    }
    Ok((w.columns(0, dx).clone_owned(), w.columns(dx, w.ncols() - dx).clone_owned()))
}

/// Joint least squares of `f̂(y_{κ₁+1})` on `[f̂(y_{κ₁}); u_{κ₁}]`.
pub fn fit_dynamics(batch: &[IdSample], f: &dyn Decoder) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = decode_batch(batch, f)?;
    dynamics_from(batch, &d)
}

fn noise_from(batch: &[IdSample], d: &Decoded, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dx = a.nrows();
    let mut cov = DMatrix::zeros(dx, dx);
    let inv_n = 1.0 / batch.len() as f64;
    for ((now, next), s) in d.now.iter().zip(&d.next).zip(batch) {
        let r = next - a * now - b * &s.u;
        cov.ger(inv_n, &r, &r, 1.0);
    }
    control::psd_project(&linalg::symmetrize(&cov))
}

/// Residual second moment of the fitted dynamics, projected onto the PSD cone.
pub fn fit_noise_cov(batch: &[IdSample], f: &dyn Decoder, a_hat: &DMatrix<f64>, b_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = decode_batch(batch, f)?;
    noise_from(batch, &d, a_hat, b_hat)
}

/// Features `z_i z_j` (doubled off the diagonal) for the upper triangle.
fn quadratic_features(z: &DVector<f64>) -> DVector<f64> {
    let n = z.len();
    let mut out = DVector::zeros(n * (n + 1) / 2);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j { z[i] * z[i] } else { 2.0 * z[i] * z[j] };
            k += 1;
        }
    }
    out
}

fn unpack_symmetric(theta: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            q[(i, j)] = theta[k];
            q[(j, i)] = theta[k];
            k += 1;
        }
    }
    q
}

fn cost_from(batch: &[IdSample], d: &Decoded, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dx = d.now[0].len();
    let p = dx * (dx + 1) / 2;
    if batch.len() < p {
        return Err(Error::InsufficientData { context: "cost regression", needed: p, got: batch.len() });
    }
    let feats: Vec<DVector<f64>> = d.now.iter().map(quadratic_features).collect();
    let targets: Vec<DVector<f64>> = batch
        .iter()
        .map(|s| DVector::from_element(1, s.c - (s.u.transpose() * r * &s.u)[(0, 0)]))
        .collect();
    let theta = regress::fit_linear_map(&feats, &targets)?;
    let q_tilde = unpack_symmetric(&theta.row(0).transpose(), dx);
    control::psd_project(&linalg::symmetrize(&q_tilde))
}

/// Regresses `c − uᵀRu` on the symmetric quadratic form in `f̂(y)`.
pub fn fit_cost(batch: &[IdSample], f: &dyn Decoder, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = decode_batch(batch, f)?;
    cost_from(batch, &d, r)
}

pub fn run_phase2(batch3: &[IdSample], f: &dyn Decoder, r: &DMatrix<f64>) -> Result<SysIdEstimates> {
    let d = decode_batch(batch3, f)?;
    let (a_hat, b_hat) = dynamics_from(batch3, &d)?;
    let sigma_w_hat = noise_from(batch3, &d, &a_hat, &b_hat)?;
    let q_hat = cost_from(batch3, &d, r)?;
    Ok(SysIdEstimates { a_hat, b_hat, sigma_w_hat, q_hat })
}

impl SysIdEstimates {
    /// The true system expressed in basis `S`: `(SAS⁻¹, SB, SΣ_wSᵀ, S⁻ᵀQS⁻¹)`.
    pub fn in_basis(spec: &SystemSpec, s: &DMatrix<f64>) -> Result<Self> {
        let s_inv = s.clone().try_inverse().ok_or(Error::Singular("basis change S"))?;
        Ok(Self {
            a_hat: s * spec.a() * &s_inv,
            b_hat: s * spec.b(),
            sigma_w_hat: linalg::symmetrize(&(s * spec.sigma_w() * s.transpose())),
            q_hat: linalg::symmetrize(&(s_inv.transpose() * spec.q() * &s_inv)),
        })
    }

    /// Exact ground-truth plug-ins in the latent basis.
    pub fn exact(spec: &SystemSpec) -> Self {
        Self {
            a_hat: spec.a().clone(),
            b_hat: spec.b().clone(),
            sigma_w_hat: spec.sigma_w().clone(),
            q_hat: spec.q().clone(),
        }
    }

    /// Operator-norm errors `(A, B, Σ_w, Q)` against `target`.
    pub fn errors(&self, target: &SysIdEstimates) -> [f64; 4] {
        [
            linalg::op_norm(&(&self.a_hat - &target.a_hat)),
            linalg::op_norm(&(&self.b_hat - &target.b_hat)),
            linalg::op_norm(&(&self.sigma_w_hat - &target.sigma_w_hat)),
            linalg::op_norm(&(&self.q_hat - &target.q_hat)),
        ]
    }

    pub fn to_bundle(&self) -> MatrixBundle {
        let mut b = MatrixBundle::new();
        b.insert("A_hat", self.a_hat.clone());
        b.insert("B_hat", self.b_hat.clone());
        b.insert("sigma_w_hat", self.sigma_w_hat.clone());
        b.insert("Q_hat", self.q_hat.clone());
        b
    }

    pub fn from_bundle(b: &MatrixBundle) -> Result<Self> {
        Ok(Self {
            a_hat: b.get("A_hat")?.clone(),
            b_hat: b.get("B_hat")?.clone(),
            sigma_w_hat: b.get("sigma_w_hat")?.clone(),
            q_hat: b.get("Q_hat")?.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase1::{collect_id_data, BurnIn, Phase1Config};
    use crate::sim::catalog::ParameterBounds;
    use crate::sim::emission::{EmissionModel, IdentityMap};

    fn id_batch(spec: &SystemSpec, n: usize, seed: u64) -> Vec<IdSample> {
        let mut cfg = Phase1Config::new(n, 1, ParameterBounds { psi_star: 4.0, alpha_star: 1.0, gamma_star: 0.5 });
        cfg.kappa = if spec.du() >= spec.dx() { 1 } else { 2 };
        cfg.burn_in = BurnIn::Fixed(3);
        let mut data = collect_id_data(spec, &EmissionModel::identity(spec.dx()), &cfg, seed).unwrap();
        std::mem::take(&mut data.batches[2])
    }

    #[test]
    fn noiseless_system_is_recovered_exactly() {
        let spec = SystemSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let batch = id_batch(&spec, 200, 1);
        let est = run_phase2(&batch, &IdentityMap(2), spec.r()).unwrap();
        assert!((&est.a_hat - spec.a()).norm() < 1e-8);
        assert!((&est.b_hat - spec.b()).norm() < 1e-8);
        assert!(est.sigma_w_hat.norm() < 1e-8);
        assert!((&est.q_hat - spec.q()).norm() < 1e-8);
    }

    #[test]
    fn scalar_cost_is_exact() {
        let spec = SystemSpec::scalar(0.5, 1.0, 1.7, 1.0, 1.0, 1.0).unwrap();
        let batch = id_batch(&spec, 30, 2);
        let q = fit_cost(&batch, &IdentityMap(1), spec.r()).unwrap();
        assert!((q[(0, 0)] - 1.7).abs() < 1e-9);
    }

    #[test]
    fn zero_system_estimates_vanish() {
        let spec = SystemSpec::scalar(0.0, 0.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let batch = id_batch(&spec, 20_000, 3);
        let (a, b) = fit_dynamics(&batch, &IdentityMap(1)).unwrap();
        assert!(a[(0, 0)].abs() < 0.05 && b[(0, 0)].abs() < 0.05);
    }

    #[test]
    fn basis_change_round_trips() {
        let spec = SystemSpec::scalar(0.5, 1.0, 2.0, 1.0, 0.3, 1.0).unwrap();
        let t = SysIdEstimates::in_basis(&spec, &DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert!((t.a_hat[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((t.b_hat[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((t.sigma_w_hat[(0, 0)] - 1.2).abs() < 1e-15);
        assert!((t.q_hat[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bundle_round_trip() {
        let spec = SystemSpec::scalar(0.5, 1.0, 2.0, 1.0, 0.3, 1.0).unwrap();
        let est = SysIdEstimates::exact(&spec);
        let text = est.to_bundle().to_text();
        let back = SysIdEstimates::from_bundle(&MatrixBundle::parse(&text).unwrap()).unwrap();
        assert_eq!(est, back);
    }
}
