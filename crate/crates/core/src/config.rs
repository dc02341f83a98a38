//! Experiment configuration read from TOML; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::control::WitnessKind;
use crate::error::{Error, Result};
use crate::sim::catalog::INSTANCE_NAMES;

pub const DEFAULT_N_ALIGN: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Witness {
    #[default]
    Identity,
    Riccati,
}

impl From<Witness> for WitnessKind {
    fn from(w: Witness) -> Self {
        match w {
            Witness::Identity => WitnessKind::Identity,
            Witness::Riccati => WitnessKind::Riccati,
        }
    }
}

/// Policy rolled out by the `simulate` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SimPolicy {
    #[default]
    Optimal,
    Zero,
    OpenLoop,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: String,
    pub seed: u64,
    pub n_id: usize,
    pub n_op: usize,
    #[serde(default)]
    pub n_init: Option<usize>,
    /// Task horizon `T`.
    pub horizon: usize,
    pub n_eval: usize,
    /// Exploration std; overrides `epsilon`.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Target suboptimality; sets `σ = min(1, ε / b̄)` when `sigma` is absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub b_bar: Option<f64>,
    #[serde(default)]
    pub kappa: Option<usize>,
    /// Fixed burn-in, bypassing the formula.
    #[serde(default)]
    pub kappa0: Option<usize>,
    #[serde(default)]
    pub kappa0_cap: Option<usize>,
    #[serde(default)]
    pub psi_star: Option<f64>,
    #[serde(default)]
    pub alpha_star: Option<f64>,
    #[serde(default)]
    pub gamma_star: Option<f64>,
    #[serde(default)]
    pub r_id: Option<f64>,
    #[serde(default)]
    pub r_op: Option<f64>,
    #[serde(default)]
    pub witness: Witness,
    #[serde(default)]
    pub n_align: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub write_trajectories: bool,
    #[serde(default)]
    pub policy: SimPolicy,
}

impl ExperimentConfig {
    /// A config with the given sizes and every optional key at its default.
    pub fn new(instance: &str, seed: u64, n_id: usize, n_op: usize, horizon: usize, n_eval: usize) -> Self {
        Self {
            instance: instance.into(),
            seed,
            n_id,
            n_op,
            n_init: None,
            horizon,
            n_eval,
            sigma: None,
            epsilon: None,
            b_bar: None,
            kappa: None,
            kappa0: None,
            kappa0_cap: None,
            psi_star: None,
            alpha_star: None,
            gamma_star: None,
            r_id: None,
            r_op: None,
            witness: Witness::Identity,
            n_align: None,
            out_dir: None,
            threads: None,
            write_trajectories: false,
            policy: SimPolicy::Optimal,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !INSTANCE_NAMES.contains(&self.instance.as_str()) {
            return Err(Error::UnknownInstance(self.instance.clone()));
        }
        let positive = [
            ("n_id", Some(self.n_id)),
            ("n_op", Some(self.n_op)),
            ("n_init", self.n_init),
            ("horizon", Some(self.horizon)),
            ("kappa", self.kappa),
            ("n_align", self.n_align),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == Some(0) {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.n_eval < 2 {
            return Err(Error::InvalidInput(format!("n_eval must be >= 2, got {}", self.n_eval)));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::InvalidInput(format!("sigma must lie in (0, 1], got {s}")));
            }
        }
        let positive_reals = [
            ("epsilon", self.epsilon),
            ("b_bar", self.b_bar),
            ("psi_star", self.psi_star),
            ("alpha_star", self.alpha_star),
            ("r_id", self.r_id),
            ("r_op", self.r_op),
        ];
        for (name, v) in positive_reals {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if let Some(g) = self.gamma_star {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::InvalidInput(format!("gamma_star must lie in (0, 1), got {g}")));
            }
        }
        Ok(())
    }
}
