use nalgebra::{DMatrix, DVector};

use super::emission::DecoderRef;
use crate::error::{Error, Result};

/// A (possibly history-dependent) control law. The simulator adds
/// `N(0, σ²I)` exploration noise on top of [`PolicyRun::control`].
pub trait Policy: Sync {
    fn input_dim(&self) -> usize;

    /// Exploration standard deviation σ.
    fn exploration_std(&self) -> f64;

    /// Open-loop policies never look at observations, which lets the
    /// simulator skip emitting them outside the recorded window.
    fn observes(&self) -> bool {
        true
    }

    /// Per-trajectory state.
    fn start(&self) -> Box<dyn PolicyRun + '_>;
}

pub trait PolicyRun {
    /// Deterministic part of `u_t` given `y_t`; earlier observations are
    /// whatever the run has retained.
    fn control(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone)]
pub enum PolicyKind {
    OpenLoopGaussian,
    GainTimesDecoder,
    OptimalGroundTruth,
}

/// Memoryless policies `u_t = K f(y_t) + ν_t`, plus pure exploration.
#[derive(Debug, Clone)]
pub struct PolicyDef {
    pub kind: PolicyKind,
    pub input_dim: usize,
    pub gain: Option<DMatrix<f64>>,
    pub decoder: Option<DecoderRef>,
    pub sigma: f64,
}

impl PolicyDef {
    pub fn open_loop(input_dim: usize, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self { kind: PolicyKind::OpenLoopGaussian, input_dim, gain: None, decoder: None, sigma })
    }

    pub fn zero(input_dim: usize) -> Self {
        Self { kind: PolicyKind::OpenLoopGaussian, input_dim, gain: None, decoder: None, sigma: 0.0 }
    }

    pub fn gain_times_decoder(gain: DMatrix<f64>, decoder: DecoderRef, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if gain.ncols() != decoder.output_dim() {
            return Err(Error::dims("policy gain", decoder.output_dim(), gain.ncols()));
        }
        Ok(Self { kind: PolicyKind::GainTimesDecoder, input_dim: gain.nrows(), gain: Some(gain), decoder: Some(decoder), sigma })
    }

    pub fn optimal(gain: DMatrix<f64>, true_decoder: DecoderRef) -> Result<Self> {
        let mut p = Self::gain_times_decoder(gain, true_decoder, 0.0)?;
        p.kind = PolicyKind::OptimalGroundTruth;
        Ok(p)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("exploration std must be >= 0, got {sigma}")));
    }
    Ok(())
}

struct MemorylessRun<'a> {
    def: &'a PolicyDef,
}

impl PolicyRun for MemorylessRun<'_> {
    fn control(&mut self, _t: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        match (&self.def.gain, &self.def.decoder) {
            (Some(k), Some(f)) => {
                let x = f.decode(y);
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("decoder `{}` output", f.name())));
                }
                Ok(k * x)
            }
            _ => Ok(DVector::zeros(self.def.input_dim)),
        }
    }
}

impl Policy for PolicyDef {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn exploration_std(&self) -> f64 {
        self.sigma
    }

    fn observes(&self) -> bool {
        self.decoder.is_some()
    }

    fn start(&self) -> Box<dyn PolicyRun + '_> {
        Box::new(MemorylessRun { def: self })
    }
}
