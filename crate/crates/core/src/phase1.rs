//! Coarse decoder from open-loop Gaussian excitation.
//!
//! Inputs `u_t ~ N(0, I)` are applied up to `κ₁ = κ₀ + κ`; a regressor
//! predicting the last `κ` inputs from `y_{κ₁}` is linear in the latent state,
//! and PCA of its outputs reduces it to `d_x` dimensions.

use nalgebra::{DMatrix, DVector};

use crate::control;
use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix_csv::MatrixBundle;
use crate::regress::{self, DecoderClass, FittedRegressor, StructuredClass};
use crate::sim::catalog::ParameterBounds;
use crate::sim::emission::{DecoderRef, EmissionModel};
use crate::sim::policy::PolicyDef;
use crate::sim::rollout::{rollout_with, RolloutOptions};
use crate::sim::system::SystemSpec;

pub const DEFAULT_KAPPA0_CAP: usize = 10_000;
pub const EIGEN_GAP_TOL: f64 = 1e-12;
const COLLECT_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BurnIn {
    /// The mixing-time formula, rejected above `cap`.
    Formula { cap: usize },
    /// A fixed value, bypassing the formula.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Config {
    pub n_id: usize,
    pub kappa: usize,
    pub psi_star: f64,
    pub alpha_star: f64,
    pub gamma_star: f64,
    pub r_id: f64,
    pub burn_in: BurnIn,
}

impl Phase1Config {
    /// Defaults: `r_id = √Ψ⋆` and the burn-in formula with the default cap.
    pub fn new(n_id: usize, kappa: usize, bounds: ParameterBounds) -> Self {
        Self {
            n_id,
            kappa,
            psi_star: bounds.psi_star,
            alpha_star: bounds.alpha_star,
            gamma_star: bounds.gamma_star,
            r_id: bounds.psi_star.sqrt(),
            burn_in: BurnIn::Formula { cap: DEFAULT_KAPPA0_CAP },
        }
    }

    pub fn validate(&self, du: usize) -> Result<()> {
        if self.kappa < 1 {
            return Err(Error::InvalidInput("kappa must be >= 1".into()));
        }
        if self.n_id < du * self.kappa || self.n_id == 0 {
            return Err(Error::InvalidInput(format!(
                "n_id = {} must be at least d_u·kappa = {}",
                self.n_id,
                (du * self.kappa).max(1)
            )));
        }
        if !(self.gamma_star > 0.0 && self.gamma_star < 1.0) {
            return Err(Error::InvalidInput(format!("gamma_star must lie in (0, 1), got {}", self.gamma_star)));
        }
        if !(self.r_id > 0.0 && self.r_id.is_finite()) {
            return Err(Error::InvalidInput(format!("r_id must be positive, got {}", self.r_id)));
        }
        if !(self.psi_star > 0.0 && self.alpha_star > 0.0) {
            return Err(Error::InvalidInput("psi_star and alpha_star must be positive".into()));
        }
        Ok(())
    }
}

/// `⌈(1−γ⋆)⁻¹ ln(84 Ψ⋆⁵ α⋆⁴ d_x (1−γ⋆)⁻² ln(1000 n_id))⌉`, floored at zero.
pub fn kappa0_formula(config: &Phase1Config, dx: usize) -> f64 {
    let g = 1.0 - config.gamma_star;
    let inner = 84.0 * config.psi_star.powi(5) * config.alpha_star.powi(4) * dx as f64 / (g * g)
        * (1000.0 * config.n_id as f64).ln();
    (inner.ln() / g).ceil().max(0.0)
}

pub fn burn_in_kappa0(config: &Phase1Config, dx: usize) -> Result<usize> {
    match config.burn_in {
        BurnIn::Fixed(k) => Ok(k),
        BurnIn::Formula { cap } => {
            let k = kappa0_formula(config, dx);
            if !k.is_finite() || k > cap as f64 {
                return Err(Error::InfeasibleBurnIn { kappa0: k, cap });
            }
            Ok(k as usize)
        }
    }
}

/// What one identification trajectory contributes, read at `κ₁` and `κ₁+1`.
///
/// The latent states are kept for evaluation only; the learner never reads them.
#[derive(Debug, Clone)]
pub struct IdSample {
    pub index: u64,
    pub y: DVector<f64>,
    pub y_next: DVector<f64>,
    pub u: DVector<f64>,
    pub c: f64,
    /// `(u_{κ₀}, …, u_{κ₁−1})` stacked.
    pub v: DVector<f64>,
    pub x: DVector<f64>,
    pub x_next: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct IdData {
    pub kappa0: usize,
    pub kappa1: usize,
    /// Disjoint thirds: regression, PCA, system identification.
    pub batches: [Vec<IdSample>; 3],
}

pub fn collect_id_data(spec: &SystemSpec, emission: &EmissionModel, config: &Phase1Config, seed: u64) -> Result<IdData> {
    config.validate(spec.du())?;
    let kappa0 = burn_in_kappa0(config, spec.dx())?;
    let kappa1 = kappa0 + config.kappa;
    let policy = PolicyDef::open_loop(spec.du(), 1.0)?;
    let total = 3 * config.n_id;
    let mut samples = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let len = COLLECT_CHUNK.min(total - start);
        let opts = RolloutOptions { record_from: kappa0, first_index: start as u64 };
        let trajs = rollout_with(spec, emission, &policy, kappa1 + 1, len, seed, opts)?;
        for tr in trajs {
            let us: Vec<&DVector<f64>> = (kappa0..kappa1).map(|t| tr.u(t)).collect();
            samples.push(IdSample {
                index: tr.index,
                y: tr.y(kappa1).clone(),
                y_next: tr.y(kappa1 + 1).clone(),
                u: tr.u(kappa1).clone(),
                c: tr.c(kappa1),
                v: linalg::vstack_vectors(&us),
                x: tr.x(kappa1).clone(),
                x_next: tr.x(kappa1 + 1).clone(),
            });
        }
        start += len;
    }
    let third = samples.split_off(2 * config.n_id);
    let second = samples.split_off(config.n_id);
    Ok(IdData { kappa0, kappa1, batches: [samples, second, third] })
}

#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub h_id: FittedRegressor,
    /// Orthonormal `κd_u × d_x` basis of the top eigenvectors.
    pub v_id: DMatrix<f64>,
    /// Eigenvalues of the empirical second moment, decreasing.
    pub eigenvalues: DVector<f64>,
    pub kappa0: usize,
    pub kappa1: usize,
    /// `f̂_id = V̂ᵀ ĥ_id`.
    pub decoder: DecoderRef,
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn canonical_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

pub fn fit_coarse_decoder(
    batch1: &[IdSample],
    batch2: &[IdSample],
    class: &DecoderClass,
    config: &Phase1Config,
    dx: usize,
    kappa0: usize,
) -> Result<Phase1Output> {
    let out_dim = batch1.first().map_or(0, |s| s.v.len());
    if out_dim < dx {
        return Err(Error::InvalidInput(format!("κ·d_u = {out_dim} is smaller than d_x = {dx}")));
    }
    if batch2.is_empty() {
        return Err(Error::InsufficientData { context: "PCA batch", needed: 1, got: 0 });
    }
    let hclass = StructuredClass::new(class.clone(), out_dim, config.r_id)?;
    let ys: Vec<&DVector<f64>> = batch1.iter().map(|s| &s.y).collect();
    let vs: Vec<DVector<f64>> = batch1.iter().map(|s| s.v.clone()).collect();
    let h_id = regress::erm_fit(&hclass, &ys, &vs)?;

    let mut second = DMatrix::zeros(out_dim, out_dim);
    let inv_n = 1.0 / batch2.len() as f64;
    for s in batch2 {
        let h = h_id.predict(&s.y);
        second.ger(inv_n, &h, &h, 1.0);
    }
    let (eigenvalues, vectors) = linalg::sorted_sym_eigen(&second);
    if out_dim > dx {
        let gap = eigenvalues[dx - 1] - eigenvalues[dx];
        if !(gap >= EIGEN_GAP_TOL) {
            return Err(Error::DegenerateSpectrum { gap, eigenvalues: eigenvalues.iter().copied().collect() });
        }
    }
    let mut v_id = vectors.columns(0, dx).clone_owned();
    canonical_signs(&mut v_id);
    let decoder = h_id.compose(&v_id.transpose());
    Ok(Phase1Output { h_id, v_id, eigenvalues, kappa0, kappa1: kappa0 + config.kappa, decoder })
}

/// Collects data and fits the coarse decoder; batch 3 is returned for system identification.
pub fn run_phase1(
    spec: &SystemSpec,
    emission: &EmissionModel,
    class: &DecoderClass,
    config: &Phase1Config,
    seed: u64,
) -> Result<(Phase1Output, IdData)> {
    let data = collect_id_data(spec, emission, config, seed)?;
    let out = fit_coarse_decoder(&data.batches[0], &data.batches[1], class, config, spec.dx(), data.kappa0)?;
    Ok((out, data))
}

/// `Σ_{κ₁}`: covariance of `x_{κ₁}` under unit Gaussian inputs.
pub fn state_covariance(spec: &SystemSpec, kappa1: usize) -> DMatrix<f64> {
    spec.open_loop_covariance(kappa1, 1.0)
}

/// Population Bayes map `C_κᵀ Σ_{κ₁}⁻¹` sending `x_{κ₁}` to `E[v | x_{κ₁}]`.
pub fn bayes_map(spec: &SystemSpec, kappa: usize, kappa1: usize) -> Result<DMatrix<f64>> {
    let c = control::controllability_matrix(spec.a(), spec.b(), kappa);
    let inv = linalg::spd_inverse(&state_covariance(spec, kappa1), 1e-300)?;
    Ok(c.transpose() * inv)
}

/// `S_id = V̂ᵀ C_κᵀ Σ_{κ₁}⁻¹`, the basis the learner identifies the system in.
pub fn identified_basis(spec: &SystemSpec, out: &Phase1Output, kappa: usize) -> Result<DMatrix<f64>> {
    Ok(out.v_id.transpose() * bayes_map(spec, kappa, out.kappa1)?)
}

impl Phase1Output {
    pub fn to_bundle(&self) -> MatrixBundle {
        let mut b = MatrixBundle::new();
        b.insert_scalar("h_id.index", self.h_id.index as f64);
        b.insert("h_id.M", self.h_id.m.clone());
        b.insert("V_id", self.v_id.clone());
        b.insert("eigenvalues", DMatrix::from_column_slice(self.eigenvalues.len(), 1, self.eigenvalues.as_slice()));
        b.insert_scalar("kappa0", self.kappa0 as f64);
        b.insert_scalar("kappa1", self.kappa1 as f64);
        b
    }

    pub fn from_bundle(b: &MatrixBundle, class: &DecoderClass) -> Result<Self> {
        let h_id = FittedRegressor::from_parts(class, b.scalar("h_id.index")? as usize, b.get("h_id.M")?.clone())?;
        let v_id = b.get("V_id")?.clone();
        let ev = b.get("eigenvalues")?;
        let decoder = h_id.compose(&v_id.transpose());
        Ok(Self {
            eigenvalues: DVector::from_column_slice(ev.as_slice()),
            kappa0: b.scalar("kappa0")? as usize,
            kappa1: b.scalar("kappa1")? as usize,
            h_id,
            v_id,
            decoder,
        })
    }
}
