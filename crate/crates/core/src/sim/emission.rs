//! Deterministic, perfectly decodable emissions and decoder maps.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// A map from observations to latent-state-sized vectors.
pub trait Decoder: Send + Sync + fmt::Debug {
    fn output_dim(&self) -> usize;
    fn decode(&self, y: &DVector<f64>) -> DVector<f64>;
    fn name(&self) -> String;
}

pub type DecoderRef = Arc<dyn Decoder>;

/// A map from latent states to observations.
pub trait Emission: Send + Sync + fmt::Debug {
    fn latent_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn emit(&self, x: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionFamily {
    Identity,
    CubicLift,
    Custom,
}

/// Observation model together with its exact inverse.
#[derive(Debug, Clone)]
pub struct EmissionModel {
    pub family: EmissionFamily,
    map: Arc<dyn Emission>,
    true_decoder: DecoderRef,
}

impl EmissionModel {
    pub fn new(family: EmissionFamily, map: Arc<dyn Emission>, true_decoder: DecoderRef) -> Self {
        Self { family, map, true_decoder }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(EmissionFamily::Identity, Arc::new(IdentityMap(dim)), Arc::new(IdentityMap(dim)))
    }

    pub fn cubic_lift(lift: CubicLift) -> Self {
        let decoder = Arc::new(lift.true_decoder());
        Self::new(EmissionFamily::CubicLift, Arc::new(lift), decoder)
    }

    pub fn dy(&self) -> usize {
        self.map.obs_dim()
    }

    pub fn dx(&self) -> usize {
        self.map.latent_dim()
    }

    pub fn emit(&self, x: &DVector<f64>) -> DVector<f64> {
        self.map.emit(x)
    }

    pub fn true_decoder(&self) -> &DecoderRef {
        &self.true_decoder
    }
}

/// Identity emission; doubles as its own decoder.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap(pub usize);

impl Emission for IdentityMap {
    fn latent_dim(&self) -> usize {
        self.0
    }

    fn obs_dim(&self) -> usize {
        self.0
    }

    fn emit(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
}

impl Decoder for IdentityMap {
    fn output_dim(&self) -> usize {
        self.0
    }

    fn decode(&self, y: &DVector<f64>) -> DVector<f64> {
        y.clone()
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// Fixed linear decoder `y ↦ W y`.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    pub weights: DMatrix<f64>,
    pub label: String,
}

impl Decoder for LinearDecoder {
    fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn decode(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.weights * y
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// `z ↦ z + c z³`, strictly increasing for `c ≥ 0`.
pub fn cubic(z: f64, c: f64) -> f64 {
    z + c * z * z * z
}

/// Inverse of [`cubic`] via Newton steps safeguarded by bisection.
pub fn cubic_inverse(s: f64, c: f64) -> f64 {
    if c == 0.0 || s == 0.0 {
        return s;
    }
    let target = s.abs();
    // the root lies in [0, min(|s|, cbrt(|s|/c))]
    let mut lo = 0.0_f64;
    let mut hi = target.min((target / c).cbrt());
    let mut z = hi;
    for _ in 0..200 {
        let f = z + c * z * z * z - target;
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        if f == 0.0 || hi - lo <= 4.0 * f64::EPSILON * hi.max(1e-300) {
            break;
        }
        let step = f / (1.0 + 3.0 * c * z * z);
        let candidate = z - step;
        if candidate >= lo && candidate <= hi {
            z = candidate;
            if step.abs() <= f64::EPSILON * z.abs() {
                break;
            }
        } else {
            z = 0.5 * (lo + hi);
        }
    }
    z.copysign(s)
}

/// Product of Givens rotations with the given plane angles, a fixed orthogonal matrix.
pub fn givens_rotation(dim: usize, angles: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let mut m = DMatrix::identity(dim, dim);
    for &(i, j, theta) in angles {
        let (s, c) = theta.sin_cos();
        let mut g = DMatrix::identity(dim, dim);
        g[(i, i)] = c;
        g[(j, j)] = c;
        g[(i, j)] = -s;
        g[(j, i)] = s;
        m = g * m;
    }
    m
}

/// `y = Rot · [ψ(x); G x]` with `ψ(z) = z + c z³` applied coordinate-wise.
#[derive(Debug, Clone)]
pub struct CubicLift {
    pub c: f64,
    pub rotation: DMatrix<f64>,
    pub lift: DMatrix<f64>,
}

impl CubicLift {
    pub fn new(c: f64, rotation: DMatrix<f64>, lift: DMatrix<f64>) -> Self {
        assert!(c >= 0.0, "cubic coefficient must be nonnegative");
        assert!(rotation.is_square());
        assert_eq!(lift.nrows() + lift.ncols(), rotation.nrows());
        Self { c, rotation, lift }
    }

    pub fn true_decoder(&self) -> CubicLiftDecoder {
        CubicLiftDecoder {
            dx: self.lift.ncols(),
            c: self.c,
            rotation: self.rotation.clone(),
            label: format!("cubic-lift(c={})", self.c),
        }
    }
}

impl Emission for CubicLift {
    fn latent_dim(&self) -> usize {
        self.lift.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.rotation.nrows()
    }

    fn emit(&self, x: &DVector<f64>) -> DVector<f64> {
        let dx = self.latent_dim();
        let mut z = DVector::zeros(self.obs_dim());
        for i in 0..dx {
            z[i] = cubic(x[i], self.c);
        }
        let tail = &self.lift * x;
        z.rows_mut(dx, tail.len()).copy_from(&tail);
        &self.rotation * z
    }
}

/// `y ↦ ψ_c⁻¹((Rotᵀ y)_{0..dx})`; with the emission's own `c` and rotation
/// this is the exact inverse, otherwise a structured distractor.
#[derive(Debug, Clone)]
pub struct CubicLiftDecoder {
    pub dx: usize,
    pub c: f64,
    pub rotation: DMatrix<f64>,
    pub label: String,
}

impl Decoder for CubicLiftDecoder {
    fn output_dim(&self) -> usize {
        self.dx
    }

    fn decode(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dx);
        for i in 0..self.dx {
            // i-th coordinate of Rotᵀ y
            let s = self.rotation.column(i).dot(y);
            out[i] = cubic_inverse(s, self.c);
        }
        out
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}
