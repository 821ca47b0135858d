mod common;

use common::*;
use medvar::model::fit_model;
use medvar::model_spec::{Family, HospitalEffects, ModelSpec, Role};
use medvar::par::with_threads;
use medvar::simulation::{
    draw_parameters, generate, oracle_truth, run_scenario, EstimatorSettings, OutcomeType, SimulationConfig,
    TrueParameters,
};

fn softmax(p: &TrueParameters, x1: f64, x2: f64) -> Vec<f64> {
    let lin: Vec<f64> = (0..p.psi.len())
        .map(|z| p.psi[z] + p.phi[z][0] * x1 + p.phi[z][1] * x2)
        .collect();
    let s: f64 = lin.iter().map(|v| v.exp()).sum();
    lin.iter().map(|v| v.exp() / s).collect()
}

/// |observed - expected| within `k` standard deviations of a sum of
/// independent Bernoulli(p_i).
fn within_bernoulli(observed: f64, probs: &[f64], k: f64) -> bool {
    let mean: f64 = probs.iter().sum();
    let var: f64 = probs.iter().map(|p| p * (1.0 - p)).sum();
    (observed - mean).abs() <= k * var.sqrt().max(1e-9)
}

#[test]
fn generated_marginals_follow_the_model() {
    // [DERIVED] conditional probabilities recomputed from the true parameters
    let cfg = SimulationConfig::new(20_000, 5, 1.0, 2.0, OutcomeType::Continuous, 77);
    let (ds, p) = generate(&cfg).unwrap();
    let n = ds.n() as f64;
    let x1: Vec<f64> = (0..ds.n()).map(|i| ds.covariates_of(i)[0]).collect();
    let x2: Vec<f64> = (0..ds.n()).map(|i| ds.covariates_of(i)[1]).collect();
    let m1 = x1.iter().sum::<f64>() / n;
    let v1 = x1.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / n;
    assert!(m1.abs() < 4.0 / n.sqrt(), "{m1}");
    assert!((v1 - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "{v1}");
    assert!(within_bernoulli(x2.iter().sum(), &vec![0.5; ds.n()], 4.0));

    // hospital counts against summed assignment probabilities
    let probs: Vec<Vec<f64>> = (0..ds.n()).map(|i| softmax(&p, x1[i], x2[i])).collect();
    for z in 0..cfg.q {
        let count = ds.hospital().iter().filter(|&&h| h == z).count() as f64;
        let pz: Vec<f64> = probs.iter().map(|r| r[z]).collect();
        assert!(within_bernoulli(count, &pz, 4.0), "hospital {z}");
    }

    // mediator given hospital and covariates: logistic threshold model
    let pm: Vec<f64> = (0..ds.n())
        .map(|i| expit(p.alpha[ds.hospital()[i]] + x1[i] + 1.5 * x2[i]))
        .collect();
    assert!(within_bernoulli(ds.mediator().iter().sum(), &pm, 4.0));

    // outcome residual: logistic with mean 0 and variance pi^2/3
    let r: Vec<f64> = (0..ds.n())
        .map(|i| {
            let z = ds.hospital()[i];
            ds.outcome()[i] - p.beta[z] - p.mediator_effect * ds.mediator()[i] - x1[i] - 2.0 * x2[i]
        })
        .collect();
    let rm = r.iter().sum::<f64>() / n;
    let rv = r.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / n;
    let lv = std::f64::consts::PI.powi(2) / 3.0;
    assert!(rm.abs() < 4.0 * (lv / n).sqrt(), "{rm}");
    // logistic kurtosis is 4.2, so var(s^2) ~ 3.2 sigma^4 / n
    assert!((rv - lv).abs() < 4.0 * (3.2 * lv * lv / n).sqrt(), "{rv}");
}

#[test]
fn binary_outcome_is_threshold_of_latent() {
    // [DERIVED] P(Y = 1 | z, M, X) = expit(beta_z + beta_m M + X1 + 2 X2)
    let cfg = SimulationConfig::new(20_000, 4, 0.0, 1.0, OutcomeType::Binary, 5);
    let (ds, p) = generate(&cfg).unwrap();
    assert!(ds.outcome().iter().all(|&y| y == 0.0 || y == 1.0));
    let py: Vec<f64> = (0..ds.n())
        .map(|i| {
            let x = ds.covariates_of(i);
            expit(p.beta[ds.hospital()[i]] + p.mediator_effect * ds.mediator()[i] + x[0] + 2.0 * x[1])
        })
        .collect();
    assert!(within_bernoulli(ds.outcome().iter().sum(), &py, 4.0));
}

#[test]
fn hospital_effect_correlation_matches_sigma() {
    // [DERIVED] covariance 2 with variances 4 is correlation 0.5
    let cfg = SimulationConfig::new(1000, 200, 2.0, 7.0, OutcomeType::Continuous, 3);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    let mut count = 0.0;
    for stream in 0..20 {
        let p = draw_parameters(&cfg, stream);
        for (a, b) in p.alpha.iter().zip(&p.beta) {
            sab += a * b;
            saa += a * a;
            sbb += b * b;
            count += 1.0;
        }
    }
    let rho = sab / (saa * sbb).sqrt();
    assert!((rho - 0.5).abs() < 0.05, "rho = {rho}");
    assert!((saa / count - 4.0).abs() < 0.4 && (sbb / count - 4.0).abs() < 0.4);
}

#[test]
fn no_mediator_effect_in_outcome_regression() {
    // [DERIVED] outcome coefficient on the mediator is zero in truth
    let cfg = SimulationConfig::new(5000, 10, 0.0, 0.0, OutcomeType::Continuous, 13);
    let (ds, _) = generate(&cfg).unwrap();
    let spec = ModelSpec::new(Family::GaussianIdentity, HospitalEffects::Fixed, &["x1", "x2"]);
    let fit = fit_model(&ds, &spec, Role::Outcome).unwrap();
    let s = fit.summary();
    let row = s.coefficients.iter().find(|c| c.name == "mediator").unwrap();
    assert!(row.estimate.abs() < 4.0 * row.std_error, "{row:?}");
    let x2 = s.coefficients.iter().find(|c| c.name == "x2").unwrap();
    assert!((x2.estimate - 2.0).abs() < 4.0 * x2.std_error, "{x2:?}");
}

#[test]
fn oracle_components_add_up() {
    // [DERIVED] omega3 is estimated directly, so additivity is a check
    for (sigma, beta_m) in [(0.0, 7.0), (2.0, 3.0), (-1.0, 0.5)] {
        let cfg = SimulationConfig::new(1000, 6, sigma, beta_m, OutcomeType::Continuous, 8);
        let p = draw_parameters(&cfg, 0);
        let o = oracle_truth(&cfg, &p, 200_000).unwrap();
        let gap = o.omega0 - o.omega1 - o.omega2 - o.omega3;
        let se: f64 = (0..4).map(|k| o.std_errors[k].powi(2)).sum::<f64>().sqrt();
        assert!(gap.abs() <= 3.0 * se, "gap {gap} se {se}");
        assert!(close(o.total_variance, o.casemix + o.omega0 + o.residual, 1e-12));
    }
}

fn small_settings(oracle_draws: usize) -> EstimatorSettings {
    EstimatorSettings {
        oracle_draws,
        ..EstimatorSettings::default()
    }
}

#[test]
fn scenario_is_reproducible_across_threads() {
    // [TRIVIAL]
    let cfg = SimulationConfig::new(400, 4, 0.0, 2.0, OutcomeType::Continuous, 99);
    let s = small_settings(10_000);
    let a = with_threads(1, || run_scenario(&cfg, 2, &s).unwrap());
    let b = with_threads(4, || run_scenario(&cfg, 2, &s).unwrap());
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.summary, b.summary);
}

fn omega0_mae(n: usize) -> f64 {
    let cfg = SimulationConfig::new(n, 6, 0.0, 3.0, OutcomeType::Continuous, 31);
    let out = run_scenario(&cfg, 10, &small_settings(200_000)).unwrap();
    let truth = out.summary.oracle.unwrap().omega0;
    out.rows.iter().map(|r| (r.estimate.omega0 - truth).abs()).sum::<f64>() / out.rows.len() as f64
}

#[test]
fn error_shrinks_with_sample_size() {
    // [DERIVED] consistency against the oracle
    let small = omega0_mae(2000);
    let large = omega0_mae(20_000);
    assert!(large < small, "{large} vs {small}");
}
