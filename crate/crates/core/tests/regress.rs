use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use richid_core::regress::{
    erm_fit, erm_fit_structured, erm_fit_with_offsets, fit_all_candidates, DecoderClass, StructuredClass, StructuredDesign,
};
use richid_core::sim::catalog::make_benchmark_instance;
use richid_core::sim::emission::{IdentityMap, LinearDecoder};
use richid_core::sim::rollout::standard_normal;

fn gaussian_samples(n: usize, d: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| standard_normal(&mut rng, d)).collect()
}

fn class_of(candidates: Vec<DMatrix<f64>>, out: usize, r: f64) -> StructuredClass {
    let list = candidates
        .into_iter()
        .enumerate()
        .map(|(i, w)| Arc::new(LinearDecoder { weights: w, label: format!("lin{i}") }) as _)
        .collect();
    StructuredClass::new(DecoderClass::new(list, Some(0)).unwrap(), out, r).unwrap()
}

/// `‖M̂ − M⋆‖_F` for noisy targets `M⋆ y + N(0, I)`.
fn fit_error(n: usize, seed: u64) -> f64 {
    let m_star = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 0.2, 0.3, 0.8, -1.0]);
    let ys = gaussian_samples(n, 3, seed);
    let noise = gaussian_samples(n, 2, seed ^ 0x9e37);
    let targets: Vec<_> = ys.iter().zip(&noise).map(|(y, e)| &m_star * y + e).collect();
    let refs: Vec<_> = ys.iter().collect();
    let class = StructuredClass::new(DecoderClass::singleton(Arc::new(IdentityMap(3))), 2, 10.0).unwrap();
    (erm_fit(&class, &refs, &targets).unwrap().m - m_star).norm()
}

#[test]
fn well_specified_fit_is_consistent() {
    let reps = 8;
    let small: f64 = (0..reps).map(|r| fit_error(10_000, 100 + r).powi(2)).sum::<f64>() / reps as f64;
    let large: f64 = (0..reps).map(|r| fit_error(40_000, 200 + r).powi(2)).sum::<f64>() / reps as f64;
    let ratio = (small / large).sqrt();
    assert!((1.2..=3.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn truth_beats_distractors_on_cubic_instance() {
    let inst = make_benchmark_instance("di-cubic-lift").unwrap();
    assert_eq!(inst.class.len(), 8);
    let xs = gaussian_samples(2_000, 2, 5);
    let ys: Vec<_> = xs.iter().map(|x| inst.emission.emit(x)).collect();
    let refs: Vec<_> = ys.iter().collect();
    let m = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, -0.1, 0.5]);
    let targets: Vec<_> = xs.iter().map(|x| &m * x).collect();
    let class = StructuredClass::new(inst.class.clone(), 2, 5.0).unwrap();
    let fit = erm_fit(&class, &refs, &targets).unwrap();
    assert_eq!(Some(fit.index), inst.class.truth);
    assert!((fit.m - m).norm() < 1e-6);
}

#[test]
fn ties_go_to_the_lowest_index() {
    let w = DMatrix::identity(2, 2);
    let class = class_of(vec![w.clone(), w.clone(), w], 2, 10.0);
    let ys = gaussian_samples(40, 2, 9);
    let refs: Vec<_> = ys.iter().collect();
    let targets = gaussian_samples(40, 2, 10);
    assert_eq!(erm_fit(&class, &refs, &targets).unwrap().index, 0);
}

#[test]
fn structured_design_matches_plain_fit_for_one_identity_left() {
    let class = StructuredClass::new(DecoderClass::singleton(Arc::new(IdentityMap(2))), 2, 10.0).unwrap();
    let ys = gaussian_samples(200, 2, 3);
    let targets = gaussian_samples(200, 2, 4);
    let refs: Vec<_> = ys.iter().collect();
    let plain = erm_fit(&class, &refs, &targets).unwrap();
    let design = StructuredDesign { lefts: vec![DMatrix::identity(2, 2)], inputs: vec![refs.clone()], targets: targets.clone() };
    let structured = erm_fit_structured(&class, &design).unwrap();
    assert!((plain.m - structured.m).norm() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn erm_dominates_every_candidate(seed in 0u64..10_000, r in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands: Vec<DMatrix<f64>> = (0..4).map(|_| DMatrix::from_fn(2, 3, |_, _| standard_normal(&mut rng, 1)[0])).collect();
        let class = class_of(cands, 2, r);
        let ys = gaussian_samples(60, 3, seed + 1);
        let refs: Vec<_> = ys.iter().collect();
        let targets = gaussian_samples(60, 2, seed + 2);
        let fit = erm_fit(&class, &refs, &targets).unwrap();
        let all = fit_all_candidates(&class, &StructuredDesign::plain(refs.clone(), targets.clone())).unwrap();
        for (_, loss) in &all {
            prop_assert!(fit.loss <= *loss);
        }
        prop_assert!(fit.m.singular_values().max() <= r + 1e-9);
        let recomputed = refs.iter().zip(&targets).map(|(y, t)| (fit.predict(y) - t).norm_squared()).sum::<f64>() / 60.0;
        prop_assert!((recomputed - fit.loss).abs() <= 1e-9 * (1.0 + fit.loss));
    }

    #[test]
    fn offsets_shift_targets(seed in 0u64..10_000) {
        let class = StructuredClass::new(DecoderClass::singleton(Arc::new(IdentityMap(2))), 2, 10.0).unwrap();
        let ys = gaussian_samples(30, 2, seed);
        let refs: Vec<_> = ys.iter().collect();
        let targets = gaussian_samples(30, 2, seed + 1);
        let offsets = gaussian_samples(30, 2, seed + 2);
        let shifted: Vec<_> = targets.iter().zip(&offsets).map(|(t, e)| t - e).collect();
        let a = erm_fit_with_offsets(&class, &refs, &targets, &offsets).unwrap();
        let b = erm_fit(&class, &refs, &shifted).unwrap();
        prop_assert_eq!(a.m, b.m);
    }
}
