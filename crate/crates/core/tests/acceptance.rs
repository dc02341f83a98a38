//! Acceptance gate. Runs as a plain binary so the PASS/FAIL lines are always
//! printed; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use richid_core::control::{psd_project, solve_dare, strong_stability_cert};
use richid_core::linalg::{matrix_power, op_norm, spectral_radius};
use richid_core::phase1::{bayes_map, collect_id_data, fit_coarse_decoder, BurnIn, Phase1Config};
use richid_core::phase3::{build_noise_shaping, collect_onpolicy, compute_policy, increment_error, Phase3Config};
use richid_core::pipeline::{resolve, run_pipeline, DECODER_ERRORS_FILE, REPORT_FILE};
use richid_core::regress::DecoderClass;
use richid_core::sim::catalog::ParameterBounds;
use richid_core::sim::emission::{EmissionModel, IdentityMap};
use richid_core::sim::rollout::rollout;
use richid_core::{ExperimentConfig, SysIdEstimates, SystemSpec};

type Outcome = Result<String, String>;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Positive root of `b²p² + (r − qb² − a²r)p − qr = 0`.
fn scalar_riccati(a: f64, b: f64, q: f64, r: f64) -> (f64, f64) {
    let (qa, qb, qc) = (b * b, r - q * b * b - a * a * r, -q * r);
    let p = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
    (p, -b * p * a / (r + b * b * p))
}

fn riccati_defect(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let inner = (r + b.transpose() * p * b).try_inverse().unwrap();
    let rhs = q + a.transpose() * p * a - a.transpose() * p * b * inner * b.transpose() * p * a;
    (rhs - p).norm()
}

fn dare_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut worst_rho = 0.0f64;
    for _ in 0..20 {
        let dx = rng.random_range(1..=6);
        let du = rng.random_range(1..=3);
        let raw = gaussian(&mut rng, dx, dx);
        let target: f64 = rng.random_range(0.3..1.4);
        let a = &raw * (target / spectral_radius(&raw).unwrap().max(1e-9));
        let b = gaussian(&mut rng, dx, du);
        let g = gaussian(&mut rng, dx, dx);
        let h = gaussian(&mut rng, du, du);
        let q = DMatrix::identity(dx, dx) + &g * g.transpose() * 0.3;
        let r = DMatrix::identity(du, du) + &h * h.transpose() * 0.3;
        let sol = solve_dare(&a, &b, &q, &r).map_err(|e| format!("solver failed: {e}"))?;
        worst = worst.max(riccati_defect(&a, &b, &q, &r, &sol.p) / sol.p.norm());
        worst_rho = worst_rho.max(spectral_radius(&(&a + &b * &sol.k)).unwrap());
    }
    let (p, k) = scalar_riccati(0.5, 1.0, 1.0, 1.0);
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let s = solve_dare(&one(0.5), &one(1.0), &one(1.0), &one(1.0)).map_err(|e| e.to_string())?;
    let scalar_err = (s.p[(0, 0)] - p).abs().max((s.k[(0, 0)] - k).abs());
    let reference_p = (p - 1.132782).abs() < 5e-7;
    check(
        worst <= 1e-8 && worst_rho < 1.0 && scalar_err <= 1e-9 && reference_p,
        format!("max relative residual {worst:.2e}, max closed-loop radius {worst_rho:.4}, scalar error {scalar_err:.1e} (p = {p:.7}, K = {k:.7})"),
    )
}

fn strong_stability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=6);
        let raw = gaussian(&mut rng, d, d);
        let target: f64 = rng.random_range(0.05..0.98);
        let x = &raw * (target / spectral_radius(&raw).unwrap().max(1e-9));
        let cert = strong_stability_cert(&x).map_err(|e| e.to_string())?;
        for n in 0..=50 {
            let lhs = op_norm(&matrix_power(&x, n));
            worst = worst.max(lhs / (cert.alpha * cert.gamma.powi(n as i32)));
        }
    }
    check(worst <= 1.0 + 1e-6, format!("max ‖Xⁿ‖/(αγⁿ) = {worst:.6}"))
}

fn identity_system(spec: SystemSpec) -> (SystemSpec, EmissionModel, DecoderClass) {
    let d = spec.dx();
    (spec, EmissionModel::identity(d), DecoderClass::singleton(Arc::new(IdentityMap(d))))
}

fn bayes_oracle() -> Outcome {
    let spec = SystemSpec::new(
        DMatrix::from_row_slice(2, 2, &[0.5, 0.3, -0.2, 0.4]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 0.5,
        DMatrix::identity(2, 2),
    )
    .unwrap();
    let (spec, em, class) = identity_system(spec);
    let bounds = ParameterBounds { psi_star: 4.0, alpha_star: 2.0, gamma_star: 0.8 };
    let mut cfg = Phase1Config::new(100_000, 1, bounds);
    cfg.burn_in = BurnIn::Fixed(0);
    cfg.r_id = 100.0;
    let data = collect_id_data(&spec, &em, &cfg, 303).map_err(|e| e.to_string())?;
    let out = fit_coarse_decoder(&data.batches[0], &data.batches[1], &class, &cfg, 2, 0).map_err(|e| e.to_string())?;
    let exact = bayes_map(&spec, 1, 1).map_err(|e| e.to_string())?;
    let rel = (&out.h_id.m - &exact).norm() / exact.norm();
    check(rel <= 0.05, format!("relative Frobenius error {rel:.4}"))
}

/// Mean `‖f̂_id(y) − S_id x‖²` on the held-out third batch, plus the alignment residual.
fn phase1_errors(n_id: usize, seed: u64) -> Result<(f64, f64), String> {
    let mut cfg = ExperimentConfig::new("di-cubic-lift", seed, n_id, 10, 1, 2);
    cfg.sigma = Some(1.0);
    let r = resolve(&cfg).map_err(|e| e.to_string())?;
    let (p1, data) = r.run_phase1().map_err(|e| e.to_string())?;
    let s_id = r.identified_basis(&p1).map_err(|e| e.to_string())?;
    let held = &data.batches[2];
    let mse = held.iter().map(|s| (p1.decoder.decode(&s.y) - &s_id * &s.x).norm_squared()).sum::<f64>() / held.len() as f64;
    let f_star = r.instance.class.candidates[r.instance.class.truth.unwrap()].clone();
    let ys: Vec<&DVector<f64>> = held.iter().take(10_000).map(|s| &s.y).collect();
    let align = richid_core::align_decoder(p1.decoder.as_ref(), f_star.as_ref(), &ys).map_err(|e| e.to_string())?;
    Ok((mse, align.residual))
}

fn phase1_recovery() -> Outcome {
    const REPLICATES: u64 = 6;
    let mut small = 0.0;
    let mut large = 0.0;
    let mut residual_small = 0.0f64;
    for rep in 0..REPLICATES {
        let (mse, res) = phase1_errors(20_000, 4000 + rep)?;
        small += mse / REPLICATES as f64;
        residual_small = residual_small.max(res);
        large += phase1_errors(80_000, 4000 + rep)?.0 / REPLICATES as f64;
    }
    let ratio = (small / large).sqrt();
    check(
        residual_small <= 0.05 && (1.2..=3.5).contains(&ratio),
        format!("worst alignment residual {residual_small:.2e}, RMS error ratio {ratio:.3} (mse {small:.2e} vs {large:.2e})"),
    )
}

fn phase2_recovery() -> Outcome {
    let mut cfg = ExperimentConfig::new("di-cubic-lift", 505, 50_000, 10, 1, 2);
    cfg.sigma = Some(1.0);
    let r = resolve(&cfg).map_err(|e| e.to_string())?;
    let (p1, data) = r.run_phase1().map_err(|e| e.to_string())?;
    let est = r.run_phase2(&p1, &data).map_err(|e| e.to_string())?;
    let s_id = r.identified_basis(&p1).map_err(|e| e.to_string())?;
    let truth = SysIdEstimates::in_basis(&r.instance.spec, &s_id).map_err(|e| e.to_string())?;
    let errs = est.errors(&truth);
    let q = &est.q_hat;
    let sym = (q - q.transpose()).norm() == 0.0;
    let psd = q.clone().symmetric_eigen().eigenvalues.min() >= 0.0;
    check(
        errs.iter().all(|e| *e <= 0.1) && sym && psd,
        format!("errors A {:.4} B {:.4} Σw {:.4} Q {:.4}; Q̂ symmetric {sym}, PSD {psd}", errs[0], errs[1], errs[2], errs[3]),
    )
}

/// Minimizes `‖M − X‖_F` over `X = λ₁uuᵀ + λ₂u⊥u⊥ᵀ`, `u = (cos θ, sin θ)`,
/// `λ ≥ 0`: a global grid (geometric in `λ`), then refined local grids.
fn grid_psd_minimizer(m: &DMatrix<f64>) -> DMatrix<f64> {
    let entries = |(theta, l1, l2): (f64, f64, f64)| {
        let (c, s) = (theta.cos(), theta.sin());
        (l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c)
    };
    let dist = |p: (f64, f64, f64)| {
        let (a, b, c) = entries(p);
        (m[(0, 0)] - a).powi(2) + 2.0 * (m[(0, 1)] - b).powi(2) + (m[(1, 1)] - c).powi(2)
    };
    let bound = 2.0 * m.norm() + 0.1;
    let levels: Vec<f64> = std::iter::once(0.0).chain((0..90).map(|k| bound * 0.85f64.powi(k))).collect();
    let mut best = (f64::INFINITY, (0.0, 0.0, 0.0));
    for i in 0..360 {
        let theta = i as f64 * std::f64::consts::PI / 360.0;
        for &l1 in &levels {
            for &l2 in &levels {
                let d = dist((theta, l1, l2));
                if d < best.0 {
                    best = (d, (theta, l1, l2));
                }
            }
        }
    }
    let (mut ht, mut hl) = (std::f64::consts::PI / 360.0, 0.2 * best.1 .1.max(best.1 .2) + 1e-6);
    let steps = 10i32;
    for _ in 0..30 {
        let center = best.1;
        for i in -steps..=steps {
            for j in -steps..=steps {
                let l1 = center.1 + j as f64 * hl / steps as f64;
                for k in -steps..=steps {
                    let l2 = center.2 + k as f64 * hl / steps as f64;
                    if l1 < 0.0 || l2 < 0.0 {
                        continue;
                    }
                    let p = (center.0 + i as f64 * ht / steps as f64, l1, l2);
                    let d = dist(p);
                    if d < best.0 {
                        best = (d, p);
                    }
                }
            }
        }
        ht *= 0.5;
        hl *= 0.5;
    }
    let (a, b, c) = entries(best.1);
    DMatrix::from_row_slice(2, 2, &[a, b, b, c])
}

fn psd_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = gaussian(&mut rng, 2, 2);
        let m = (&g + g.transpose()) * 0.5;
        let p = psd_project(&m).map_err(|e| e.to_string())?;
        worst = worst.max((p - grid_psd_minimizer(&m)).norm());
    }
    check(worst <= 1e-3, format!("max distance to grid minimizer {worst:.2e}"))
}

fn increment_fidelity() -> Outcome {
    let (spec, em, class) = identity_system(SystemSpec::scalar(0.8, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap());
    let est = SysIdEstimates::exact(&spec);
    let horizon = 3;
    let cfg = Phase3Config::new(20_000, horizon, 1, 1.0, 1, 1, 2.0);
    let out = compute_policy(&spec, &em, &class, &est, &cfg, 707).map_err(|e| e.to_string())?;
    let id = DMatrix::identity(1, 1);
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let fresh = collect_onpolicy(&spec, &em, &out.policy, t, &cfg, 7070 + t as u64).map_err(|e| e.to_string())?;
        let err = increment_error(&fresh.halves[0], t, &out.policy.stack.steps[t], spec.a(), &est.a_hat, &id);
        worst = worst.max(err);
    }
    let one = DMatrix::from_element(1, 1, 1.0);
    let zero_a = build_noise_shaping(&DMatrix::zeros(1, 1), &one, &one, 1.0, 1).map_err(|e| e.to_string())?;
    let lm = (out.shaping.lambda_m - 1.0).abs().max((zero_a.lambda_m - 1.0).abs());
    check(worst <= 0.1 && lm <= 1e-9, format!("max increment error {worst:.2e}, |λ_M − 1| = {lm:.1e}"))
}

fn initial_state() -> Outcome {
    let (spec, em, class) = identity_system(SystemSpec::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap());
    let est = SysIdEstimates::exact(&spec);
    let mut cfg = Phase3Config::new(100_000, 1, 1, 1.0, 1, 1, 2.0);
    cfg.n_init = 100_000;
    let out = compute_policy(&spec, &em, &class, &est, &cfg, 808).map_err(|e| e.to_string())?;
    let cov = out.initial.sigma_cov[(0, 0)];
    let trajs = rollout(&spec, &em, &out.policy, 1, 20_000, 8080).map_err(|e| e.to_string())?;
    let mse = trajs.iter().map(|tr| (out.initial.f_a0.predict(tr.y(0)) - spec.a() * tr.x(0)).norm_squared()).sum::<f64>()
        / trajs.len() as f64;
    check((cov - 0.5).abs() <= 0.05 && mse <= 0.05, format!("Σ̂_cov = {cov:.4}, E‖f̂_A0(y₀) − Ax₀‖² = {mse:.2e}"))
}

fn end_to_end() -> Outcome {
    let mut cfg = ExperimentConfig::new("scalar-identity", 909, 20_000, 5_000, 10, 10_000);
    cfg.sigma = Some(0.3);
    let res = run_pipeline(&cfg, None).map_err(|e| e.to_string())?;
    let rep = &res.report;
    let clip = rep.training_clip_fraction().max(rep.eval_clip_fraction());
    check(
        rep.gap <= 0.5 && rep.gap < rep.zero_gap && clip <= 0.01,
        format!("gap {:.4} ± {:.4}, zero-policy gap {:.4}, clip fraction {clip:.2e}", rep.gap, rep.gap_stderr, rep.zero_gap),
    )
}

fn determinism() -> Outcome {
    let mut details = Vec::new();
    for (instance, seed) in [("scalar-identity", 11u64), ("di-cubic-lift", 12)] {
        let mut outputs = Vec::new();
        for threads in [1usize, 3] {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut cfg = ExperimentConfig::new(instance, seed, 2_000, 500, 3, 500);
            cfg.sigma = Some(0.5);
            cfg.kappa0 = Some(8);
            cfg.n_align = Some(500);
            cfg.threads = Some(threads);
            run_pipeline(&cfg, Some(dir.path())).map_err(|e| e.to_string())?;
            let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
            outputs.push((read(REPORT_FILE)?, read(DECODER_ERRORS_FILE)?));
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{instance}: reports differ between 1 and 3 threads"));
        }
        details.push(format!("{instance} identical"));
    }
    Ok(details.join(", "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("DARE correctness", dare_correctness, Duration::from_secs(2)),
        ("strong stability soundness", strong_stability, Duration::from_secs(2)),
        ("conditional-expectation oracle", bayes_oracle, Duration::from_secs(30)),
        ("phase I recovery", phase1_recovery, Duration::from_secs(120)),
        ("phase II recovery", phase2_recovery, Duration::from_secs(120)),
        ("PSD projection optimality", psd_projection, Duration::from_secs(5)),
        ("increment fidelity", increment_fidelity, Duration::from_secs(60)),
        ("initial-state subroutine", initial_state, Duration::from_secs(60)),
        ("end-to-end", end_to_end, Duration::from_secs(300)),
        ("determinism", determinism, Duration::from_secs(600)),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
            Err(d) => (false, d),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "criterion {:>2} {:<32} {}  {detail} [{:.2} s]",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
