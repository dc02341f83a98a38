//! Named benchmark instances.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::emission::{givens_rotation, CubicLift, CubicLiftDecoder, DecoderRef, EmissionModel, IdentityMap};
use super::rollout::standard_normal;
use super::system::SystemSpec;
use crate::control::{self, WitnessKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::phase1::bayes_map;
use crate::regress::DecoderClass;
use crate::rng::{self, NoiseRole};

pub const INSTANCE_NAMES: [&str; 3] = ["scalar-identity", "di-cubic-lift", "stable2x1-lift5"];

/// Latent samples used to estimate the growth bound of a decoder class.
pub const GROWTH_SAMPLES: usize = 100_000;

/// Upper bounds `(Ψ⋆, α⋆, γ⋆)` handed to the learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterBounds {
    pub psi_star: f64,
    pub alpha_star: f64,
    pub gamma_star: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkInstance {
    pub name: String,
    pub spec: SystemSpec,
    pub emission: EmissionModel,
    pub class: DecoderClass,
    /// Controllability upper bound κ used by the learner.
    pub kappa: usize,
    pub bounds: ParameterBounds,
}

/// Bounds read off the ground truth: `Ψ⋆` is the ceiling of the largest of
/// `1, ‖A‖, ‖B‖, ‖P_∞‖, ‖K_∞‖` and `‖C_κᵀΣ^{-1}‖²` at stationarity, and
/// `(α⋆, γ⋆)` dominate the certificates of both `A` and `A + BK_∞`.
pub fn derive_bounds(spec: &SystemSpec, kappa: usize, witness: WitnessKind) -> Result<ParameterBounds> {
    let dare = control::solve_dare(spec.a(), spec.b(), spec.q(), spec.r())?;
    let open = control::strong_stability_cert(spec.a())?;
    let closed = control::closed_loop_cert(spec.a(), spec.b(), spec.q(), spec.r(), &dare, witness)?;
    let stationary = stationary_covariance(spec)?;
    let bayes = bayes_map_from_cov(spec, kappa, &stationary)?;
    let psi = [
        1.0,
        linalg::op_norm(spec.a()),
        linalg::op_norm(spec.b()),
        linalg::op_norm(&dare.p),
        linalg::op_norm(&dare.k),
        linalg::op_norm(&bayes).powi(2),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(ParameterBounds {
        psi_star: psi.ceil(),
        alpha_star: open.alpha.max(closed.alpha),
        gamma_star: open.gamma.max(closed.gamma),
    })
}

/// Stationary state covariance under unit-variance Gaussian inputs.
pub fn stationary_covariance(spec: &SystemSpec) -> Result<DMatrix<f64>> {
    let drive = spec.sigma_w() + spec.b() * spec.b().transpose();
    control::solve_lyapunov(&spec.a().transpose(), &drive)
}

fn bayes_map_from_cov(spec: &SystemSpec, kappa: usize, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = control::controllability_matrix(spec.a(), spec.b(), kappa);
    let inv = linalg::spd_inverse(cov, 1e-300)?;
    Ok(c.transpose() * inv)
}

/// Estimates the growth bound on latent samples drawn from the stationary
/// open-loop distribution, with a fixed seed.
pub fn estimate_growth(spec: &SystemSpec, emission: &EmissionModel, class: &DecoderClass, n: usize) -> Result<f64> {
    let factor = linalg::covariance_factor(&stationary_covariance(spec)?);
    let mut rng = rng::stream(rng::derive_seed(0, "growth-bound"), 0, NoiseRole::Auxiliary);
    let ys: Vec<_> = (0..n).map(|_| emission.emit(&(&factor * standard_normal(&mut rng, spec.dx())))).collect();
    Ok(class.measure_growth(emission.true_decoder().as_ref(), &ys))
}

fn scalar_identity() -> Result<BenchmarkInstance> {
    let spec = SystemSpec::scalar(0.8, 1.0, 1.0, 1.0, 1.0, 1.0)?;
    let emission = EmissionModel::identity(1);
    let class = DecoderClass::singleton(Arc::new(IdentityMap(1)));
    finish("scalar-identity", spec, emission, class, 1)
}

fn cubic_candidate(dx: usize, c: f64, rotation: &DMatrix<f64>, label: &str) -> DecoderRef {
    Arc::new(CubicLiftDecoder { dx, c, rotation: rotation.clone(), label: label.into() })
}

/// `d_x = 2`, `d_u = 1`, `d_y = 5`; the cubic coefficient is a parameter so
/// the degenerate linear case can be built.
pub fn di_cubic_lift_with(c: f64) -> Result<BenchmarkInstance> {
    let spec = SystemSpec::new(
        DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.0, 0.4]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(2, 2),
    )?;
    let rot = givens_rotation(5, &[(0, 3, 0.7), (1, 4, -0.4), (2, 0, 1.1), (3, 1, 0.5)]);
    let lift = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.5, 1.0, 0.3, -0.7]);
    let emission = EmissionModel::cubic_lift(CubicLift::new(c, rot.clone(), lift));

    let wrong = |angles: &[(usize, usize, f64)]| givens_rotation(5, angles);
    let truth_label = format!("cubic-lift(c={c})");
    let candidates = vec![
        cubic_candidate(2, 0.0, &rot, "wrong-c(0)"),
        cubic_candidate(2, 0.25, &rot, "wrong-c(0.25)"),
        cubic_candidate(2, c, &wrong(&[(0, 3, 0.2), (1, 4, -0.4), (2, 0, 1.1)]), "wrong-rotation-a"),
        cubic_candidate(2, c, &rot, &truth_label),
        cubic_candidate(2, 1.0, &rot, "wrong-c(1)"),
        cubic_candidate(2, c, &wrong(&[(0, 2, 0.9), (1, 3, 0.6)]), "wrong-rotation-b"),
        cubic_candidate(2, c, &wrong(&[(0, 4, -1.0), (1, 2, 0.3), (3, 4, 0.8)]), "wrong-rotation-c"),
        cubic_candidate(2, c, &DMatrix::identity(5, 5), "wrong-rotation-d"),
    ];
    let class = DecoderClass::new(candidates, Some(3))?;
    finish("di-cubic-lift", spec, emission, class, 2)
}

fn stable2x1_lift5() -> Result<BenchmarkInstance> {
    let (s, c) = 0.5_f64.sin_cos();
    let spec = SystemSpec::new(
        DMatrix::from_row_slice(2, 2, &[0.8 * c, -0.8 * s, 0.8 * s, 0.8 * c]),
        DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(2, 2),
    )?;
    let rot = givens_rotation(5, &[(0, 2, 0.4), (1, 3, -0.9), (2, 4, 0.6), (0, 1, 0.3)]);
    let lift = DMatrix::from_row_slice(3, 2, &[0.7, -0.2, 0.1, 0.9, -0.6, 0.4]);
    let emission = EmissionModel::cubic_lift(CubicLift::new(0.5, rot.clone(), lift));
    let candidates = vec![
        cubic_candidate(2, 0.2, &rot, "wrong-c(0.2)"),
        cubic_candidate(2, 0.5, &rot, "cubic-lift(c=0.5)"),
        cubic_candidate(2, 0.5, &givens_rotation(5, &[(0, 4, 0.8), (1, 2, -0.5)]), "wrong-rotation"),
        cubic_candidate(2, 1.5, &rot, "wrong-c(1.5)"),
    ];
    let class = DecoderClass::new(candidates, Some(1))?;
    finish("stable2x1-lift5", spec, emission, class, 2)
}

fn finish(name: &str, spec: SystemSpec, emission: EmissionModel, mut class: DecoderClass, kappa: usize) -> Result<BenchmarkInstance> {
    spec.validate()?;
    let bounds = derive_bounds(&spec, kappa, WitnessKind::Identity)?;
    class.growth = estimate_growth(&spec, &emission, &class, GROWTH_SAMPLES)?;
    Ok(BenchmarkInstance { name: name.into(), spec, emission, class, kappa, bounds })
}

pub fn make_benchmark_instance(name: &str) -> Result<BenchmarkInstance> {
    match name {
        "scalar-identity" => scalar_identity(),
        "di-cubic-lift" => di_cubic_lift_with(0.5),
        "stable2x1-lift5" => stable2x1_lift5(),
        other => Err(Error::UnknownInstance(other.to_string())),
    }
}

/// Convenience for the Bayes map at the instance's own controllability bound.
pub fn instance_bayes_map(inst: &BenchmarkInstance, kappa1: usize) -> Result<DMatrix<f64>> {
    bayes_map(&inst.spec, inst.kappa, kappa1)
}
