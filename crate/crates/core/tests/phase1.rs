use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use richid_core::control::controllability_matrix;
use richid_core::linalg::{sigma_min, sorted_sym_eigen};
use richid_core::phase1::{bayes_map, collect_id_data, fit_coarse_decoder, run_phase1, BurnIn, Phase1Config};
use richid_core::pipeline::resolve;
use richid_core::regress::DecoderClass;
use richid_core::sim::catalog::{di_cubic_lift_with, INSTANCE_NAMES};
use richid_core::sim::emission::{EmissionModel, IdentityMap};
use richid_core::{align_decoder, ExperimentConfig, SystemSpec};

fn fixed_burn_in(n_id: usize, kappa: usize, kappa0: usize, inst_bounds: richid_core::sim::catalog::ParameterBounds) -> Phase1Config {
    let mut cfg = Phase1Config::new(n_id, kappa, inst_bounds);
    cfg.burn_in = BurnIn::Fixed(kappa0);
    cfg
}

#[test]
fn scalar_bayes_target_is_one_half() {
    let spec = SystemSpec::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
    let em = EmissionModel::identity(1);
    let class = DecoderClass::singleton(Arc::new(IdentityMap(1)));
    let bounds = richid_core::sim::catalog::ParameterBounds { psi_star: 2.0, alpha_star: 1.0, gamma_star: 0.5 };
    let cfg = fixed_burn_in(100_000, 1, 0, bounds);
    let (out, _) = run_phase1(&spec, &em, &class, &cfg, 31).unwrap();
    assert!((out.h_id.m[(0, 0)] - 0.5).abs() <= 0.05, "M = {}", out.h_id.m);
    assert!((bayes_map(&spec, 1, 1).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
}

#[test]
fn stacked_inputs_are_white() {
    let inst = di_cubic_lift_with(0.5).unwrap();
    let cfg = fixed_burn_in(33_334, 3, 4, inst.bounds);
    let data = collect_id_data(&inst.spec, &inst.emission, &cfg, 5).unwrap();
    let mut cov = DMatrix::zeros(3, 3);
    let mut n = 0.0;
    for s in data.batches.iter().flatten() {
        assert_eq!(s.v.len(), 3);
        cov.ger(1.0, &s.v, &s.v, 1.0);
        n += 1.0;
    }
    let err = (cov / n - DMatrix::identity(3, 3)).norm();
    assert!(n >= 100_000.0);
    assert!(err <= 0.02, "covariance error {err}");
}

#[test]
fn linear_emission_is_recovered_up_to_a_linear_map() {
    let inst = di_cubic_lift_with(0.0).unwrap();
    let f_star = inst.emission.true_decoder().clone();
    let class = DecoderClass::singleton(f_star.clone());
    let cfg = fixed_burn_in(20_000, inst.kappa, 10, inst.bounds);
    let (out, data) = run_phase1(&inst.spec, &inst.emission, &class, &cfg, 8).unwrap();
    let ys: Vec<&DVector<f64>> = data.batches[2].iter().map(|s| &s.y).collect();
    let align = align_decoder(out.decoder.as_ref(), f_star.as_ref(), &ys).unwrap();
    assert!(align.residual <= 1e-3, "residual {}", align.residual);
    assert!(align.sigma_min > 0.0);
}

#[test]
fn square_pca_is_a_rotation() {
    let inst = di_cubic_lift_with(0.5).unwrap();
    assert_eq!(inst.kappa * inst.spec.du(), inst.spec.dx());
    let cfg = fixed_burn_in(5_000, inst.kappa, 5, inst.bounds);
    let (out, data) = run_phase1(&inst.spec, &inst.emission, &inst.class, &cfg, 2).unwrap();
    let v = &out.v_id;
    assert!((v.transpose() * v - DMatrix::identity(2, 2)).norm() <= 1e-9);
    for s in data.batches[2].iter().take(50) {
        let h = out.h_id.predict(&s.y);
        let f = out.decoder.decode(&s.y);
        assert!((f.norm() - h.norm()).abs() <= 1e-9 * (1.0 + h.norm()));
    }
}

/// Largest principal angle between the column spaces of two full-rank matrices.
fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let cos = (qa.transpose() * qb).singular_values().min().clamp(-1.0, 1.0);
    cos.acos()
}

#[test]
fn top_eigenspace_matches_bayes_map() {
    let inst = di_cubic_lift_with(0.5).unwrap();
    let f_star = inst.emission.true_decoder().clone();
    let class = DecoderClass::singleton(f_star);
    let kappa = 3;
    let cfg = fixed_burn_in(100_000, kappa, 10, inst.bounds);
    let (out, _) = run_phase1(&inst.spec, &inst.emission, &class, &cfg, 13).unwrap();
    assert_eq!(out.v_id.shape(), (3, 2));
    let target = bayes_map(&inst.spec, kappa, out.kappa1).unwrap();
    let angle = principal_angle(&out.v_id, &target);
    assert!(angle <= 0.1, "principal angle {angle}");
    let (eig, _) = sorted_sym_eigen(&(&target * target.transpose()));
    assert!(eig[2].abs() < 1e-12);
}

#[test]
fn identified_basis_is_invertible_on_every_instance() {
    for name in INSTANCE_NAMES {
        let mut cfg = ExperimentConfig::new(name, 3, 3_000, 10, 1, 2);
        cfg.sigma = Some(1.0);
        cfg.kappa0 = Some(10);
        let r = resolve(&cfg).unwrap();
        let (out, _) = r.run_phase1().unwrap();
        let s = r.identified_basis(&out).unwrap();
        let c = controllability_matrix(r.instance.spec.a(), r.instance.spec.b(), r.phase1.kappa);
        assert!(sigma_min(&s) > 0.0, "{name}");
        assert!(sigma_min(&c) > 0.0, "{name}");
    }
}

#[test]
fn rectangular_fit_rejects_too_few_inputs() {
    let inst = di_cubic_lift_with(0.5).unwrap();
    let cfg = fixed_burn_in(200, 1, 2, inst.bounds);
    let data = collect_id_data(&inst.spec, &inst.emission, &cfg, 1).unwrap();
    assert!(fit_coarse_decoder(&data.batches[0], &data.batches[1], &inst.class, &cfg, 2, 2).is_err());
}
