mod common;

use common::*;
use medvar::data::{Dataset, MediatorKind, PatientRecord};
use medvar::glm::{fit_glm, GlmFitter};
use medvar::glmm::fit_glmm;
use medvar::model_spec::{Family, HospitalEffects, ModelSpec, Role};
use medvar::simulation::{generate, OutcomeType, SimulationConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logistic_fixture(n: usize, q: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|i| {
            let z = i % q;
            let x1: f64 = rng.random_range(-2.0..2.0);
            let x2: f64 = rng.random_range(0.0..1.0);
            let lp = -0.3 + 0.4 * z as f64 - 0.8 * x1 + 1.1 * x2;
            PatientRecord {
                outcome: 0.0,
                mediator: f64::from(u8::from(rng.random::<f64>() < expit(lp))),
                hospital: format!("h{z}"),
                covariates: vec![x1, x2],
            }
        })
        .collect();
    Dataset::with_labels(labels(q), recs, vec!["x1".into(), "x2".into()], MediatorKind::Binary).unwrap()
}

/// Plain Newton-Raphson for logistic regression on an explicit design,
/// with Gaussian elimination for the step.
fn dense_newton(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = x[0].len();
    let mut b = vec![0.0; k];
    for _ in 0..50 {
        let mut h = vec![vec![0.0; k + 1]; k];
        for (row, &yi) in x.iter().zip(y) {
            let p = expit(row.iter().zip(&b).map(|(a, c)| a * c).sum());
            for r in 0..k {
                h[r][k] += (yi - p) * row[r];
                for c in 0..k {
                    h[r][c] += p * (1.0 - p) * row[r] * row[c];
                }
            }
        }
        for c in 0..k {
            let piv = (c..k).max_by(|&a, &b| h[a][c].abs().total_cmp(&h[b][c].abs())).unwrap();
            h.swap(c, piv);
            for r in 0..k {
                if r != c {
                    let f = h[r][c] / h[c][c];
                    for j in c..=k {
                        h[r][j] -= f * h[c][j];
                    }
                }
            }
        }
        let step: Vec<f64> = (0..k).map(|r| h[r][k] / h[r][r]).collect();
        for (bi, s) in b.iter_mut().zip(&step) {
            *bi += s;
        }
        if step.iter().all(|s| s.abs() < 1e-14) {
            break;
        }
    }
    b
}

#[test]
fn binomial_fit_matches_dense_newton() {
    // [DERIVED] independent Newton solver on the same likelihood
    let ds = logistic_fixture(50, 2, 3);
    let spec = ModelSpec::new(Family::BinomialLogit, HospitalEffects::Fixed, &["x1", "x2"]);
    let fit = fit_glm(&ds, &spec, Role::Mediator).unwrap();
    let design: Vec<Vec<f64>> = (0..ds.n())
        .map(|i| {
            let x = ds.covariates_of(i);
            vec![1.0, f64::from(u8::from(ds.hospital()[i] == 1)), x[0], x[1]]
        })
        .collect();
    let b = dense_newton(&design, ds.mediator());
    let c = &fit.coefficients;
    assert_eq!(c.hospital[0], 0.0);
    let got = [c.intercept, c.hospital[1], c.covariates[0], c.covariates[1]];
    for (g, w) in got.iter().zip(&b) {
        assert!((g - w).abs() < 1e-6, "{got:?} vs {b:?}");
    }
}

#[test]
fn deviance_never_increases_and_score_vanishes() {
    // [DERIVED] finite differences of the log-likelihood
    for (seed, q) in [(1, 2), (2, 3), (3, 5), (4, 4)] {
        let ds = logistic_fixture(300, q, seed);
        let y: Vec<f64> = ds.mediator().to_vec();
        for (family, role) in [
            (Family::BinomialLogit, Role::Mediator),
            (Family::GaussianIdentity, Role::Outcome),
        ] {
            let spec = ModelSpec::new(family, HospitalEffects::Fixed, &["x1", "x2"]);
            let fitter = GlmFitter::new(&ds, &spec, role).unwrap();
            let resp: Vec<f64> = if role == Role::Outcome {
                y.iter().enumerate().map(|(i, m)| m + 0.1 * (i % 7) as f64).collect()
            } else {
                y.clone()
            };
            let ds_r = if role == Role::Outcome {
                ds.with_outcome(resp.clone()).unwrap()
            } else {
                ds.clone()
            };
            let fitter = if role == Role::Outcome {
                GlmFitter::new(&ds_r, &spec, role).unwrap()
            } else {
                fitter
            };
            let fit = fitter.fit(&resp).unwrap();
            assert!(fit.converged && !fit.ridge_stabilized);
            for w in fit.deviance_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.deviance_trace);
            }
            let theta = fitter.pack(&fit.coefficients);
            let g = fitter.score(&theta, &resp);
            assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
            // analytic score against central differences away from the optimum
            let probe: Vec<f64> = theta.iter().map(|t| t + 0.05).collect();
            let g = fitter.score(&probe, &resp);
            for j in 0..probe.len() {
                let h = 1e-5;
                let mut up = probe.clone();
                let mut dn = probe.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (fitter.log_likelihood(&up, &resp) - fitter.log_likelihood(&dn, &resp)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1.0), "{j}: {fd} vs {}", g[j]);
            }
        }
    }
}

#[test]
fn zero_between_hospital_variance_is_recovered() {
    // [DERIVED] generator with zero hospital-effect variance
    let mut cfg = SimulationConfig::new(5000, 10, 0.0, 7.0, OutcomeType::Continuous, 17);
    cfg.hospital_effect_var = 0.0;
    let (ds, _) = generate(&cfg).unwrap();
    let spec = ModelSpec::new(Family::BinomialLogit, HospitalEffects::Random, &["x1", "x2"]);
    let fit = fit_glmm(&ds, &spec, Role::Mediator).unwrap();
    assert!(fit.tau2 < 0.05, "tau2 = {}", fit.tau2);
    for w in fit.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{:?}", fit.trace);
    }
}

fn gaussian_groups(sizes: &[usize], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..sizes.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut recs = Vec::new();
    for (z, &nz) in sizes.iter().enumerate() {
        for _ in 0..nz {
            let y = means[z] + rng.random_range(-1.7..1.7);
            recs.push(PatientRecord {
                outcome: 0.0,
                mediator: y,
                hospital: format!("h{z}"),
                covariates: vec![],
            });
        }
    }
    Dataset::with_labels(labels(sizes.len()), recs, vec![], MediatorKind::Continuous).unwrap()
}

#[test]
fn shrinkage_vanishes_for_large_hospitals_and_is_strong_for_tiny_ones() {
    // [DERIVED] fixed-effect estimates as the large-cluster limit
    let sizes = [40, 60, 2000, 50, 1, 45];
    let ds = gaussian_groups(&sizes, 8);
    let mut spec = ModelSpec::new(Family::GaussianIdentity, HospitalEffects::Fixed, &[]);
    let fixed = fit_glm(&ds, &spec, Role::Mediator).unwrap();
    spec.hospital_effects = HospitalEffects::Random;
    let random = fit_glmm(&ds, &spec, Role::Mediator).unwrap();
    assert!(random.tau2 > 0.0);
    let fixed_mean = |z: usize| fixed.coefficients.intercept + fixed.coefficients.hospital[z];
    let random_mean = |z: usize| random.fixed.intercept + random.modes[z];
    // n_z = 2000: the mode is within sampling error of the hospital mean
    assert!((fixed_mean(2) - random_mean(2)).abs() < 0.02);
    // n_z = 1: the mode is pulled toward the overall intercept
    let dev = fixed_mean(4) - random.fixed.intercept;
    assert!(random.modes[4].abs() < dev.abs());
    assert!(random.modes[4] * dev >= 0.0);
}
