use nalgebra::{DMatrix, DVector};

use crate::control;
use crate::error::{Error, Result};
use crate::linalg;

const SYM_TOL: f64 = 1e-9;

/// Ground-truth latent LQR instance.
///
/// Construction checks shapes, symmetry and positive semidefiniteness of the
/// covariances. The stronger modelling assumptions (stable `A`, controllable
/// pair, `Q, R ⪰ I`, nondegenerate process noise) are checked by
/// [`SystemSpec::validate`]; degenerate systems are still useful in tests.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    sigma_w: DMatrix<f64>,
    sigma_0: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    init_factor: DMatrix<f64>,
}

fn check_square(name: &'static str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::dims(name, format!("{n}x{n}"), format!("{}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn check_symmetric_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let asym = linalg::max_asymmetry(m);
    if asym > SYM_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let lmin = linalg::min_sym_eigenvalue(m);
    if lmin < -SYM_TOL {
        return Err(Error::Indefinite(format!("{name} has eigenvalue {lmin:.3e}")));
    }
    Ok(())
}

impl SystemSpec {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma_w: DMatrix<f64>,
        sigma_0: DMatrix<f64>,
    ) -> Result<Self> {
        let dx = a.nrows();
        if dx == 0 {
            return Err(Error::InvalidInput("state dimension must be positive".into()));
        }
        check_square("A", &a, dx)?;
        if b.nrows() != dx {
            return Err(Error::dims("B", format!("{dx} rows"), b.nrows()));
        }
        let du = b.ncols();
        if du == 0 {
            return Err(Error::InvalidInput("input dimension must be positive".into()));
        }
        check_square("Q", &q, dx)?;
        check_square("R", &r, du)?;
        check_square("sigma_w", &sigma_w, dx)?;
        check_square("sigma_0", &sigma_0, dx)?;
        for (name, m) in [("A", &a), ("B", &b), ("Q", &q), ("R", &r), ("sigma_w", &sigma_w), ("sigma_0", &sigma_0)] {
            if !linalg::all_finite(m) {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        check_symmetric_psd("Q", &q)?;
        check_symmetric_psd("R", &r)?;
        check_symmetric_psd("sigma_w", &sigma_w)?;
        check_symmetric_psd("sigma_0", &sigma_0)?;
        let noise_factor = linalg::covariance_factor(&sigma_w);
        let init_factor = linalg::covariance_factor(&sigma_0);
        Ok(Self { a, b, q, r, sigma_w, sigma_0, noise_factor, init_factor })
    }

    /// Scalar system convenience constructor.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, sigma_w: f64, sigma_0: f64) -> Result<Self> {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(b), m(q), m(r), m(sigma_w), m(sigma_0))
    }

    /// Checks the full set of modelling assumptions.
    pub fn validate(&self) -> Result<()> {
        let q_min = linalg::min_sym_eigenvalue(&self.q);
        let r_min = linalg::min_sym_eigenvalue(&self.r);
        if q_min < 1.0 - SYM_TOL || r_min < 1.0 - SYM_TOL {
            return Err(Error::InvalidInput(format!(
                "cost matrices must satisfy Q, R >= I (lambda_min(Q)={q_min:.4}, lambda_min(R)={r_min:.4})"
            )));
        }
        let w_min = linalg::min_sym_eigenvalue(&self.sigma_w);
        if w_min <= 0.0 {
            return Err(Error::InvalidInput(format!("sigma_w must be positive definite (lambda_min={w_min:.3e})")));
        }
        let rho = linalg::spectral_radius(&self.a)?;
        if rho >= 1.0 {
            return Err(Error::Unstable { spectral_radius: rho });
        }
        let info = control::controllability(&self.a, &self.b, self.dx())?;
        if info.kappa_star.is_none() {
            return Err(Error::InvalidInput("(A, B) is not controllable".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> usize {
        self.a.nrows()
    }

    pub fn du(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    pub fn sigma_0(&self) -> &DMatrix<f64> {
        &self.sigma_0
    }

    pub(crate) fn noise_factor(&self) -> &DMatrix<f64> {
        &self.noise_factor
    }

    pub(crate) fn init_factor(&self) -> &DMatrix<f64> {
        &self.init_factor
    }

    /// Instantaneous cost `xᵀQx + uᵀRu`.
    pub fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }

    /// Covariance of `x_t` when every input is drawn from `N(0, input_var·I)`
    /// and the initial state from `N(0, sigma_0)`.
    pub fn open_loop_covariance(&self, t: usize, input_var: f64) -> DMatrix<f64> {
        let drive = &self.sigma_w + &self.b * self.b.transpose() * input_var;
        let mut cov = self.sigma_0.clone();
        for _ in 0..t {
            cov = &self.a * cov * self.a.transpose() + &drive;
        }
        linalg::symmetrize(&cov)
    }

    /// Copy with a different initial-state covariance.
    pub fn with_sigma_0(&self, sigma_0: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.q.clone(), self.r.clone(), self.sigma_w.clone(), sigma_0)
    }
}
