//! Least-squares regression oracle over `{M f : f ∈ F, ‖M‖_op ≤ r}`.
//!
//! For each candidate `f` the unconstrained least-squares `M` is found in
//! closed form, its singular values are clamped to the radius, and the
//! candidate with the smallest (post-clamp) empirical loss wins. Ties go to
//! the lowest candidate index.

use std::fmt;

use nalgebra::{DMatrix, DVector, SVD};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sim::emission::{Decoder, DecoderRef};

/// Ridge added to the sample-normalized Gram matrix.
pub const RIDGE: f64 = 1e-10;

/// A finite, ordered set of candidate decoders.
#[derive(Debug, Clone)]
pub struct DecoderClass {
    pub candidates: Vec<DecoderRef>,
    /// Growth bound `L`: `‖f(y)‖ ≤ L·max{1, ‖f⋆(y)‖}` on sampled observations.
    pub growth: f64,
    /// Index of the true decoder, when known.
    pub truth: Option<usize>,
}

impl DecoderClass {
    pub fn new(candidates: Vec<DecoderRef>, truth: Option<usize>) -> Result<Self> {
        let Some(first) = candidates.first() else {
            return Err(Error::InvalidInput("decoder class must be nonempty".into()));
        };
        let dim = first.output_dim();
        if let Some(bad) = candidates.iter().find(|c| c.output_dim() != dim) {
            return Err(Error::dims("decoder class output", dim, bad.output_dim()));
        }
        if truth.is_some_and(|i| i >= candidates.len()) {
            return Err(Error::InvalidInput("truth index out of range".into()));
        }
        Ok(Self { candidates, growth: 1.0, truth })
    }

    pub fn singleton(decoder: DecoderRef) -> Self {
        Self { candidates: vec![decoder], growth: 1.0, truth: Some(0) }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.candidates[0].output_dim()
    }

    pub fn get(&self, index: usize) -> Result<&DecoderRef> {
        self.candidates
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("candidate index {index} out of range (class has {})", self.len())))
    }

    /// Largest ratio `‖f(y)‖ / max{1, ‖f⋆(y)‖}` over candidates and samples, floored at 1.
    pub fn measure_growth(&self, truth: &dyn Decoder, ys: &[DVector<f64>]) -> f64 {
        self.candidates
            .par_iter()
            .map(|f| {
                ys.iter()
                    .map(|y| f.decode(y).norm() / truth.decode(y).norm().max(1.0))
                    .fold(1.0_f64, f64::max)
            })
            .reduce(|| 1.0, f64::max)
    }
}

/// `{M f : f ∈ base, M ∈ R^{m×d}, ‖M‖_op ≤ r}`.
#[derive(Debug, Clone)]
pub struct StructuredClass {
    pub base: DecoderClass,
    pub output_dim: usize,
    pub radius: f64,
}

impl StructuredClass {
    pub fn new(base: DecoderClass, output_dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidInput(format!("class radius must be positive, got {radius}")));
        }
        if output_dim == 0 {
            return Err(Error::InvalidInput("class output dimension must be positive".into()));
        }
        Ok(Self { base, output_dim, radius })
    }
}

/// The map `y ↦ M f(y)` for a fixed candidate `f`.
#[derive(Debug, Clone)]
pub struct ComposedDecoder {
    pub base: DecoderRef,
    pub m: DMatrix<f64>,
}

impl Decoder for ComposedDecoder {
    fn output_dim(&self) -> usize {
        self.m.nrows()
    }

    fn decode(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.m * self.base.decode(y)
    }

    fn name(&self) -> String {
        format!("linear∘{}", self.base.name())
    }
}

#[derive(Clone)]
pub struct FittedRegressor {
    pub index: usize,
    pub decoder: DecoderRef,
    pub m: DMatrix<f64>,
    /// Mean squared residual on the training data, after clamping.
    pub loss: f64,
    pub clamped: bool,
}

impl fmt::Debug for FittedRegressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedRegressor")
            .field("index", &self.index)
            .field("decoder", &self.decoder.name())
            .field("m", &self.m)
            .field("loss", &self.loss)
            .field("clamped", &self.clamped)
            .finish()
    }
}

impl FittedRegressor {
    /// Rebuilds a regressor from its serialized `(index, M)` form.
    pub fn from_parts(class: &DecoderClass, index: usize, m: DMatrix<f64>) -> Result<Self> {
        let decoder = class.get(index)?.clone();
        if m.ncols() != decoder.output_dim() {
            return Err(Error::dims("regressor matrix columns", decoder.output_dim(), m.ncols()));
        }
        Ok(Self { index, decoder, m, loss: f64::NAN, clamped: false })
    }

    pub fn predict(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.m * self.decoder.decode(y)
    }

    /// `y ↦ left · M f(y)` as a standalone decoder.
    pub fn compose(&self, left: &DMatrix<f64>) -> DecoderRef {
        std::sync::Arc::new(ComposedDecoder { base: self.decoder.clone(), m: left * &self.m })
    }

    pub fn as_decoder(&self) -> DecoderRef {
        std::sync::Arc::new(ComposedDecoder { base: self.decoder.clone(), m: self.m.clone() })
    }
}

/// Regression data whose prediction for sample `i` is `Σ_j L_j M f(y_ij)`.
///
/// The plain problem `M f(y_i) ≈ t_i` is the single-term case `L = I`.
#[derive(Debug, Clone)]
pub struct StructuredDesign<'a> {
    pub lefts: Vec<DMatrix<f64>>,
    /// `inputs[j][i]` is the observation fed to term `j` for sample `i`.
    pub inputs: Vec<Vec<&'a DVector<f64>>>,
    pub targets: Vec<DVector<f64>>,
}

impl<'a> StructuredDesign<'a> {
    pub fn plain(inputs: Vec<&'a DVector<f64>>, targets: Vec<DVector<f64>>) -> Self {
        let m = targets.first().map_or(0, |t| t.len());
        Self { lefts: vec![DMatrix::identity(m, m)], inputs: vec![inputs], targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn is_plain(&self) -> bool {
        self.lefts.len() == 1 && self.lefts[0].is_square() && self.lefts[0] == DMatrix::identity(self.lefts[0].nrows(), self.lefts[0].nrows())
    }

    fn validate(&self, class: &StructuredClass) -> Result<()> {
        let n = self.targets.len();
        if n == 0 {
            return Err(Error::InsufficientData { context: "regression", needed: 1, got: 0 });
        }
        let d = class.base.feature_dim();
        if n < d {
            return Err(Error::InsufficientData { context: "regression", needed: d, got: n });
        }
        if self.lefts.is_empty() || self.lefts.len() != self.inputs.len() {
            return Err(Error::InvalidInput("each regression term needs one left matrix and one input column".into()));
        }
        let p = self.targets[0].len();
        for (l, col) in self.lefts.iter().zip(&self.inputs) {
            if l.nrows() != p {
                return Err(Error::dims("regression left matrix rows", p, l.nrows()));
            }
            if l.ncols() != class.output_dim {
                return Err(Error::dims("regression left matrix columns", class.output_dim, l.ncols()));
            }
            if col.len() != n {
                return Err(Error::dims("regression input count", n, col.len()));
            }
        }
        for t in &self.targets {
            if t.len() != p {
                return Err(Error::dims("regression target", p, t.len()));
            }
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("regression target".into()));
            }
        }
        Ok(())
    }
}

struct CandidateFit {
    m: DMatrix<f64>,
    loss: f64,
    clamped: bool,
}

fn clamp_operator_norm(m: DMatrix<f64>, radius: f64) -> (DMatrix<f64>, bool) {
    let svd = SVD::new(m.clone(), true, true);
    if svd.singular_values.max() <= radius {
        return (m, false);
    }
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let clamped = svd.singular_values.map(|s| s.min(radius));
    (u * DMatrix::from_diagonal(&clamped) * vt, true)
}

fn solve_spd(gram: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = gram.cholesky().ok_or(Error::Singular("regression normal equations"))?;
    Ok(chol.solve(&rhs))
}

fn features(f: &DecoderRef, ys: &[&DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let out: Vec<DVector<f64>> = ys.iter().map(|y| f.decode(y)).collect();
    if out.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite(format!("features of candidate `{}`", f.name())));
    }
    Ok(out)
}

fn fit_candidate(f: &DecoderRef, design: &StructuredDesign<'_>, class: &StructuredClass) -> Result<CandidateFit> {
    let n = design.len();
    let d = f.output_dim();
    let m_rows = class.output_dim;
    let feats: Vec<Vec<DVector<f64>>> = design.inputs.iter().map(|col| features(f, col)).collect::<Result<_>>()?;
    let inv_n = 1.0 / n as f64;

    let m = if design.is_plain() {
        let mut gram = DMatrix::zeros(d, d);
        let mut cross = DMatrix::zeros(m_rows, d);
        for (phi, t) in feats[0].iter().zip(&design.targets) {
            gram.ger(inv_n, phi, phi, 1.0);
            cross.ger(inv_n, t, phi, 1.0);
        }
        gram += DMatrix::identity(d, d) * RIDGE;
        solve_spd(gram, cross.transpose())?.transpose()
    } else {
        let dim = m_rows * d;
        let mut gram = DMatrix::zeros(dim, dim);
        let mut rhs = DMatrix::zeros(dim, 1);
        for i in 0..n {
            let mut g = DMatrix::zeros(design.targets[i].len(), dim);
            for (j, l) in design.lefts.iter().enumerate() {
                g += feats[j][i].transpose().kronecker(l);
            }
            gram.gemm_tr(inv_n, &g, &g, 1.0);
            rhs.gemm_tr(inv_n, &g, &design.targets[i], 1.0);
        }
        gram += DMatrix::identity(dim, dim) * RIDGE;
        let vec_m = solve_spd(gram, rhs)?;
        DMatrix::from_column_slice(m_rows, d, vec_m.as_slice())
    };
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular("regression normal equations"));
    }
    let (m, clamped) = clamp_operator_norm(m, class.radius);

    let mut loss = 0.0;
    for i in 0..n {
        let mut r = -design.targets[i].clone();
        for (j, l) in design.lefts.iter().enumerate() {
            r += l * (&m * &feats[j][i]);
        }
        loss += r.norm_squared();
    }
    Ok(CandidateFit { m, loss: loss * inv_n, clamped })
}

/// Evaluates every candidate and returns each one's clamped fit; used by the
/// reduction below and by tests checking ERM dominance.
pub fn fit_all_candidates(class: &StructuredClass, design: &StructuredDesign<'_>) -> Result<Vec<(DMatrix<f64>, f64)>> {
    design.validate(class)?;
    let fits: Vec<Result<CandidateFit>> =
        class.base.candidates.par_iter().map(|f| fit_candidate(f, design, class)).collect();
    fits.into_iter().map(|r| r.map(|c| (c.m, c.loss))).collect()
}

pub fn erm_fit_structured(class: &StructuredClass, design: &StructuredDesign<'_>) -> Result<FittedRegressor> {
    design.validate(class)?;
    let fits: Vec<Result<CandidateFit>> =
        class.base.candidates.par_iter().map(|f| fit_candidate(f, design, class)).collect();
    let mut best: Option<(usize, CandidateFit)> = None;
    for (i, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        if best.as_ref().is_none_or(|(_, b)| fit.loss < b.loss) {
            best = Some((i, fit));
        }
    }
    let (index, fit) = best.expect("class is nonempty");
    if fit.clamped {
        log::info!("regression clamp active: candidate {index} rescaled to radius {}", class.radius);
    }
    Ok(FittedRegressor {
        index,
        decoder: class.base.candidates[index].clone(),
        m: fit.m,
        loss: fit.loss,
        clamped: fit.clamped,
    })
}

/// Fits `M f(y_i) ≈ t_i`.
pub fn erm_fit(class: &StructuredClass, ys: &[&DVector<f64>], targets: &[DVector<f64>]) -> Result<FittedRegressor> {
    if ys.len() != targets.len() {
        return Err(Error::dims("regression samples", targets.len(), ys.len()));
    }
    if let Some(t) = targets.first() {
        if t.len() != class.output_dim {
            return Err(Error::dims("regression target", class.output_dim, t.len()));
        }
    }
    erm_fit_structured(class, &StructuredDesign::plain(ys.to_vec(), targets.to_vec()))
}

/// Fits `M f(y_i) ≈ t_i − e_i` for fixed per-sample offsets `e_i`.
pub fn erm_fit_with_offsets(
    class: &StructuredClass,
    ys: &[&DVector<f64>],
    targets: &[DVector<f64>],
    offsets: &[DVector<f64>],
) -> Result<FittedRegressor> {
    if offsets.len() != targets.len() {
        return Err(Error::dims("regression offsets", targets.len(), offsets.len()));
    }
    let shifted: Vec<DVector<f64>> = targets.iter().zip(offsets).map(|(t, e)| t - e).collect();
    erm_fit(class, ys, &shifted)
}

/// Ridge-regularized least squares `M = argmin Σ‖M x_i − y_i‖²`.
pub fn fit_linear_map(inputs: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::InsufficientData { context: "linear least squares", needed: 1, got: 0 });
    }
    if targets.len() != n {
        return Err(Error::dims("linear least squares samples", n, targets.len()));
    }
    let d = inputs[0].len();
    let m = targets[0].len();
    let inv_n = 1.0 / n as f64;
    let mut gram = DMatrix::zeros(d, d);
    let mut cross = DMatrix::zeros(m, d);
    for (x, y) in inputs.iter().zip(targets) {
        if x.len() != d {
            return Err(Error::dims("linear least squares input", d, x.len()));
        }
        if y.len() != m {
            return Err(Error::dims("linear least squares target", m, y.len()));
        }
        gram.ger(inv_n, x, x, 1.0);
        cross.ger(inv_n, y, x, 1.0);
    }
    gram += DMatrix::identity(d, d) * RIDGE;
    Ok(solve_spd(gram, cross.transpose())?.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::emission::{IdentityMap, LinearDecoder};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn identity_class(dim: usize, out: usize, r: f64) -> StructuredClass {
        StructuredClass::new(DecoderClass::singleton(Arc::new(IdentityMap(dim))), out, r).unwrap()
    }

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| crate::sim::rollout::standard_normal(&mut rng, d)).collect()
    }

    #[test]
    fn noiseless_scaling_is_recovered() {
        let xs = random_vectors(50, 2, 1);
        let ys: Vec<_> = xs.iter().collect();
        let ts: Vec<_> = xs.iter().map(|x| x * 2.0).collect();
        let fit = erm_fit(&identity_class(2, 2, 10.0), &ys, &ts).unwrap();
        assert!((&fit.m - DMatrix::identity(2, 2) * 2.0).norm() < 1e-9);
        assert!(fit.loss < 1e-15);
        assert!(!fit.clamped);
    }

    #[test]
    fn clamp_hits_radius_exactly() {
        let xs = random_vectors(50, 2, 2);
        let ys: Vec<_> = xs.iter().collect();
        let ts: Vec<_> = xs.iter().map(|x| x * 3.0).collect();
        let fit = erm_fit(&identity_class(2, 2, 1.5), &ys, &ts).unwrap();
        assert!(fit.clamped);
        assert!((fit.m.singular_values().max() - 1.5).abs() < 1e-12);
        // loss recomputed at the clamped matrix: ‖(1.5 − 3) x‖²
        let expect: f64 = xs.iter().map(|x| (x * 1.5).norm_squared()).sum::<f64>() / 50.0;
        assert!((fit.loss - expect).abs() < 1e-9);
    }

    #[test]
    fn permuted_candidate_loses() {
        let swap = LinearDecoder { weights: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), label: "swap".into() };
        let class = DecoderClass::new(vec![Arc::new(swap), Arc::new(IdentityMap(2))], Some(1)).unwrap();
        let class = StructuredClass::new(class, 2, 10.0).unwrap();
        let xs = random_vectors(200, 2, 3);
        let ys: Vec<_> = xs.iter().collect();
        // a coordinate swap is absorbed by M, so the selection comes down to
        // the closed-form losses of the two candidates
        let m_star = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let ts: Vec<_> = xs.iter().map(|x| &m_star * x).collect();
        let all = fit_all_candidates(&class, &StructuredDesign::plain(ys.clone(), ts.clone())).unwrap();
        let fit = erm_fit(&class, &ys, &ts).unwrap();
        assert!(fit.loss <= all[0].1 && fit.loss <= all[1].1);
        assert_eq!(fit.index, if all[0].1 <= all[1].1 { 0 } else { 1 });
        assert_eq!(fit.m, all[fit.index].0);
    }

    #[test]
    fn nonlinear_distractor_is_rejected() {
        #[derive(Debug)]
        struct Cube;
        impl Decoder for Cube {
            fn output_dim(&self) -> usize {
                1
            }
            fn decode(&self, y: &DVector<f64>) -> DVector<f64> {
                y.map(|v| v * v * v)
            }
            fn name(&self) -> String {
                "cube".into()
            }
        }
        let class = DecoderClass::new(vec![Arc::new(Cube), Arc::new(IdentityMap(1))], Some(1)).unwrap();
        let class = StructuredClass::new(class, 1, 10.0).unwrap();
        let xs = random_vectors(500, 1, 4);
        let ys: Vec<_> = xs.iter().collect();
        let ts: Vec<_> = xs.iter().map(|x| x * 0.7).collect();
        let fit = erm_fit(&class, &ys, &ts).unwrap();
        assert_eq!(fit.index, 1);
    }

    #[test]
    fn structured_design_recovers_m() {
        let m_star = DMatrix::from_row_slice(2, 2, &[0.8, -0.2, 0.3, 1.1]);
        let l1 = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, 0.2, -0.3]);
        let l2 = DMatrix::from_row_slice(3, 2, &[-0.4, 0.1, 0.0, -0.5, 0.7, 0.2]);
        let a = random_vectors(100, 2, 5);
        let b = random_vectors(100, 2, 6);
        let ts: Vec<_> = a.iter().zip(&b).map(|(x, y)| &l1 * &m_star * x + &l2 * &m_star * y).collect();
        let design = StructuredDesign {
            lefts: vec![l1, l2],
            inputs: vec![a.iter().collect(), b.iter().collect()],
            targets: ts,
        };
        let fit = erm_fit_structured(&identity_class(2, 2, 10.0), &design).unwrap();
        assert!((&fit.m - &m_star).norm() < 1e-8);
        assert!(fit.loss < 1e-16);
    }

    #[test]
    fn offsets_equal_shifted_targets() {
        let xs = random_vectors(40, 2, 7);
        let ys: Vec<_> = xs.iter().collect();
        let ts = random_vectors(40, 2, 8);
        let es = random_vectors(40, 2, 9);
        let class = identity_class(2, 2, 10.0);
        let a = erm_fit_with_offsets(&class, &ys, &ts, &es).unwrap();
        let shifted: Vec<_> = ts.iter().zip(&es).map(|(t, e)| t - e).collect();
        let b = erm_fit(&class, &ys, &shifted).unwrap();
        assert_eq!(a.m, b.m);
    }

    #[test]
    fn reported_loss_matches_recomputation() {
        let xs = random_vectors(80, 3, 10);
        let ys: Vec<_> = xs.iter().collect();
        let ts = random_vectors(80, 2, 11);
        let fit = erm_fit(&identity_class(3, 2, 0.3), &ys, &ts).unwrap();
        let loss: f64 = xs.iter().zip(&ts).map(|(x, t)| (fit.predict(x) - t).norm_squared()).sum::<f64>() / 80.0;
        assert!((fit.loss - loss).abs() < 1e-9);
    }

    #[test]
    fn errors_on_empty_or_short_data() {
        let class = identity_class(2, 2, 1.0);
        assert!(matches!(erm_fit(&class, &[], &[]), Err(Error::InsufficientData { .. })));
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(erm_fit(&class, &[&x], &[x.clone()]), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn linear_map_examples() {
        let xs = random_vectors(30, 3, 12);
        let m_star = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let ts: Vec<_> = xs.iter().map(|x| &m_star * x).collect();
        assert!((fit_linear_map(&xs, &ts).unwrap() - &m_star).norm() < 1e-9);

        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let m = fit_linear_map(&[e1.clone()], &[e1.clone()]).unwrap();
        let expect = &e1 * e1.transpose();
        assert!((m - expect).norm() < 1e-9);

        let zeros = vec![DVector::zeros(2); 30];
        assert_eq!(fit_linear_map(&xs, &zeros).unwrap(), DMatrix::zeros(2, 3));
        assert!(matches!(fit_linear_map(&xs, &zeros[..3]), Err(Error::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn clamp_never_exceeds_radius(seed in 0u64..1000, r in 0.05f64..5.0) {
            let xs = random_vectors(30, 3, seed);
            let ys: Vec<_> = xs.iter().collect();
            let ts = random_vectors(30, 2, seed + 1);
            let ts: Vec<_> = ts.iter().map(|t| t * 10.0).collect();
            let fit = erm_fit(&identity_class(3, 2, r), &ys, &ts).unwrap();
            prop_assert!(fit.m.singular_values().max() <= r + 1e-9);
        }

        #[test]
        fn linear_map_residual_is_orthogonal(seed in 0u64..1000) {
            let xs = random_vectors(25, 3, seed);
            let ts = random_vectors(25, 2, seed + 7);
            let m = fit_linear_map(&xs, &ts).unwrap();
            let mut g = DMatrix::<f64>::zeros(2, 3);
            let mut scale = 0.0;
            for (x, t) in xs.iter().zip(&ts) {
                g += (&m * x - t) * x.transpose();
                scale += t.norm() * x.norm();
            }
            prop_assert!(g.norm() <= 1e-6 * scale);
        }
    }
}
