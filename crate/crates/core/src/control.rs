//! Linear-control numerics: Lyapunov and Riccati solvers, strong-stability
//! certificates, controllability matrices and PSD projection.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sim::emission::EmissionModel;
use crate::sim::policy::PolicyDef;
use crate::sim::system::SystemSpec;

pub const MAX_ITERATIONS: usize = 100_000;
pub const DARE_STEP_TOL: f64 = 1e-12;
pub const DARE_RESIDUAL_TOL: f64 = 1e-8;
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;
pub const SYMMETRY_TOL: f64 = 1e-9;

fn check_stable(x: &DMatrix<f64>) -> Result<f64> {
    let rho = linalg::spectral_radius(x)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { spectral_radius: rho });
    }
    Ok(rho)
}

/// Residual `‖P − XᵀPX − Y‖_F`.
pub fn lyapunov_residual(x: &DMatrix<f64>, y: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (p - x.transpose() * p * x - y).norm()
}

/// Solves `P = XᵀPX + Y` for stable `X` by iterating the recursion.
pub fn solve_lyapunov(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !x.is_square() {
        return Err(Error::dims("lyapunov X", "square", format!("{}x{}", x.nrows(), x.ncols())));
    }
    if y.shape() != x.shape() {
        return Err(Error::dims("lyapunov Y", format!("{}x{}", x.nrows(), x.ncols()), format!("{}x{}", y.nrows(), y.ncols())));
    }
    check_stable(x)?;
    let xt = x.transpose();
    let mut p = y.clone();
    // iterate to round-off, then certify by the residual
    for _ in 0..MAX_ITERATIONS {
        let next = &xt * &p * x + y;
        let change = (&next - &p).norm();
        p = next;
        if change <= 4.0 * f64::EPSILON * (1.0 + p.norm()) {
            break;
        }
    }
    if lyapunov_residual(x, y, &p) <= LYAPUNOV_RESIDUAL_TOL * (1.0 + p.norm()) {
        Ok(linalg::symmetrize(&p))
    } else {
        Err(Error::NotConverged { what: "Lyapunov iteration", iterations: MAX_ITERATIONS })
    }
}

/// `(α, γ)` strong-stability certificate `X = S H S⁻¹` with `‖H‖ ≤ γ`,
/// `‖S‖‖S⁻¹‖ ≤ α`.
#[derive(Debug, Clone)]
pub struct StabilityCert {
    pub witness: DMatrix<f64>,
    pub alpha: f64,
    pub gamma: f64,
}

impl StabilityCert {
    /// `‖S⁻¹ X S‖_op`; never exceeds `gamma` up to rounding.
    pub fn contraction(&self, x: &DMatrix<f64>) -> f64 {
        let s_inv = self.witness.clone().try_inverse().expect("witness is invertible");
        linalg::op_norm(&(s_inv * x * &self.witness))
    }
}

/// Which Lyapunov solution certifies a closed loop `A + BK_∞`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WitnessKind {
    /// `P = lyap(X, I)`.
    #[default]
    Identity,
    /// The Riccati solution `P_∞`, a Lyapunov solution with `Y = Q + KᵀRK`.
    Riccati,
}

/// Certificate from any `P ≻ 0` with `P = XᵀPX + Y`, `Y ≻ 0`: the witness is
/// `P^{-1/2}` and `γ² = ‖I − P^{-1/2} Y P^{-1/2}‖`.
pub fn lyapunov_cert(p: &DMatrix<f64>, y: &DMatrix<f64>) -> StabilityCert {
    let eig = SymmetricEigen::new(linalg::symmetrize(p));
    let lmax = eig.eigenvalues.max().max(linalg::EIG_FLOOR);
    let lmin = eig.eigenvalues.min().max(linalg::EIG_FLOOR);
    let p_inv_sqrt = linalg::sym_inv_sqrt(p);
    let n = p.nrows();
    let contraction = DMatrix::identity(n, n) - &p_inv_sqrt * y * &p_inv_sqrt;
    StabilityCert {
        witness: p_inv_sqrt,
        alpha: (lmax / lmin).sqrt(),
        gamma: linalg::op_norm(&linalg::symmetrize(&contraction)).sqrt(),
    }
}

pub fn strong_stability_cert(x: &DMatrix<f64>) -> Result<StabilityCert> {
    let n = x.nrows();
    let identity = DMatrix::identity(n, n);
    let p = solve_lyapunov(x, &identity)?;
    Ok(lyapunov_cert(&p, &identity))
}

/// Certificate for `A + BK_∞` using the selected witness.
pub fn closed_loop_cert(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    dare: &DareSolution,
    kind: WitnessKind,
) -> Result<StabilityCert> {
    let closed = a + b * &dare.k;
    match kind {
        WitnessKind::Identity => strong_stability_cert(&closed),
        WitnessKind::Riccati => {
            let y = q + dare.k.transpose() * r * &dare.k;
            Ok(lyapunov_cert(&dare.p, &y))
        }
    }
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
    r_plus: DMatrix<f64>,
}

impl DareSolution {
    /// `Σ_∞ = R + BᵀP_∞B`.
    pub fn sigma_inf(&self) -> &DMatrix<f64> {
        &self.r_plus
    }
}

fn riccati_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let r_plus = linalg::symmetrize(&(r + &bt_p * b));
    let chol = r_plus.clone().cholesky().ok_or(Error::Singular("R + BᵀPB"))?;
    let k = -chol.solve(&(bt_p * a));
    Ok((k, r_plus))
}

/// Residual of the Riccati equation at `P`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let (k, _) = riccati_gain(a, b, r, p)?;
    // AᵀPB(R+BᵀPB)⁻¹BᵀPA = -AᵀPB K
    let rhs = a.transpose() * p * a + q + a.transpose() * p * b * &k;
    Ok((p - rhs).norm())
}

fn check_symmetric_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let asym = linalg::max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let lmin = linalg::min_sym_eigenvalue(m);
    if lmin < -SYMMETRY_TOL {
        return Err(Error::Indefinite(format!("{name} has eigenvalue {lmin:.3e}")));
    }
    Ok(())
}

/// Riccati value iteration from `P₀ = Q`.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DareSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::dims("solve_dare", "A n×n, B n×m, Q n×n, R m×m", format!(
            "A {}x{}, B {}x{}, Q {}x{}, R {}x{}",
            a.nrows(), a.ncols(), b.nrows(), b.ncols(), q.nrows(), q.ncols(), r.nrows(), r.ncols()
        )));
    }
    for (name, m) in [("A", a), ("B", b), ("Q", q), ("R", r)] {
        if !linalg::all_finite(m) {
            return Err(Error::NonFinite(format!("DARE input {name}")));
        }
    }
    check_symmetric_psd("Q", q)?;
    check_symmetric_psd("R", r)?;
    if linalg::min_sym_eigenvalue(r) <= 0.0 {
        return Err(Error::Indefinite("R must be positive definite".into()));
    }

    let at = a.transpose();
    let mut p = linalg::symmetrize(q);
    let mut converged = None;
    for it in 1..=MAX_ITERATIONS {
        let (k, _) = riccati_gain(a, b, r, &p)?;
        let next = linalg::symmetrize(&(&at * &p * a + q + &at * &p * b * &k));
        if !linalg::all_finite(&next) {
            return Err(Error::NonFinite("Riccati iterate".into()));
        }
        let change = (&next - &p).norm();
        let scale = next.norm();
        p = next;
        if change <= DARE_STEP_TOL * scale.max(f64::MIN_POSITIVE) {
            converged = Some(it);
            break;
        }
    }
    let iterations = converged.ok_or(Error::NotConverged { what: "Riccati iteration", iterations: MAX_ITERATIONS })?;
    let (k, r_plus) = riccati_gain(a, b, r, &p)?;
    let residual = dare_residual(a, b, q, r, &p)?;
    if residual > DARE_RESIDUAL_TOL * p.norm().max(1.0) {
        return Err(Error::NotConverged { what: "Riccati residual check", iterations });
    }
    let rho = linalg::spectral_radius(&(a + b * &k))?;
    if rho >= 1.0 {
        return Err(Error::Unstable { spectral_radius: rho });
    }
    Ok(DareSolution { p, k, residual, iterations, r_plus })
}

#[derive(Debug, Clone)]
pub struct ControllabilityInfo {
    /// `blocks[k-1] = C_k = [A^{k-1}B | … | B]`.
    pub blocks: Vec<DMatrix<f64>>,
    pub kappa_star: Option<usize>,
    /// Smallest singular value of `C_{κ⋆}`.
    pub sigma_min: Option<f64>,
}

impl ControllabilityInfo {
    pub fn c(&self, k: usize) -> &DMatrix<f64> {
        &self.blocks[k - 1]
    }
}

/// `C_k = [A^{k-1}B | A^{k-2}B | … | B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (n, m) = b.shape();
    let mut c = DMatrix::zeros(n, k * m);
    for j in 0..k {
        c.view_mut((0, j * m), (n, m)).copy_from(&(linalg::matrix_power(a, k - 1 - j) * b));
    }
    c
}

pub fn controllability(a: &DMatrix<f64>, b: &DMatrix<f64>, k_max: usize) -> Result<ControllabilityInfo> {
    if k_max < 1 {
        return Err(Error::InvalidInput("k_max must be >= 1".into()));
    }
    if !a.is_square() || b.nrows() != a.nrows() {
        return Err(Error::dims("controllability", format!("B with {} rows", a.nrows()), b.nrows()));
    }
    let n = a.nrows();
    let blocks: Vec<_> = (1..=k_max).map(|k| controllability_matrix(a, b, k)).collect();
    let kappa_star = blocks.iter().position(|c| linalg::numerical_rank(c) == n).map(|i| i + 1);
    let sigma_min = kappa_star.map(|k| blocks[k - 1].singular_values().iter().copied().fold(f64::INFINITY, f64::min));
    Ok(ControllabilityInfo { blocks, kappa_star, sigma_min })
}

/// Frobenius-nearest PSD matrix: negative eigenvalues clamped to zero.
pub fn psd_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = linalg::max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(linalg::symmetrize(&linalg::sym_apply(m, |l| l.max(0.0))))
}

/// The benchmark policy `u = K_∞ f⋆(y)` without exploration.
pub fn optimal_policy(spec: &SystemSpec, emission: &EmissionModel) -> Result<PolicyDef> {
    let dare = solve_dare(spec.a(), spec.b(), spec.q(), spec.r())?;
    PolicyDef::optimal(dare.k, emission.true_decoder().clone())
}
