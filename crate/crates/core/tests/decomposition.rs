mod common;

use common::*;
use medvar::data::{Dataset, MediatorKind, PatientRecord};
use medvar::glm::{FittedGlm, GlmCoefficients};
use medvar::mediation::{
    decompose, decompose_linear_special_case, decompose_with_effects, potential_outcome, potential_outcome_continuous,
    read_custom_mechanism, write_mechanism_csv, AssignmentMechanism, Decomposition,
};
use medvar::model::ResponseModel;
use medvar::model_spec::{Family, HospitalEffects, Role};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn brute_force_enumeration_matches_plug_in() {
    // [DERIVED] explicit enumeration over (z, z*, m, x)
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let q = rng.random_range(2..=3);
        let k = rng.random_range(2..=4);
        let support: Vec<f64> = (0..k).map(|j| j as f64 - 1.0).collect();
        let gaussian = case % 2 == 0;
        let ds = discrete_dataset(q, &support, 6, gaussian, 100 + case);
        let family = if gaussian {
            Family::GaussianIdentity
        } else {
            Family::BinomialLogit
        };
        let f = fit_all(&ds, family, HospitalEffects::Fixed);
        let d = decompose(&ds, &f.outcome, &f.mediator, &f.mechanism).unwrap();
        let want = enumerate_components(&ds, &f);
        let got = [d.omega0, d.omega1, d.omega2, d.omega3, d.casemix];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-10, "case {case}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn observed_and_custom_file_mechanisms_agree() {
    // [TRIVIAL] same weights through a file
    let ds = continuous_dataset(4, 400, 9);
    let f = fit_all(&ds, Family::GaussianIdentity, HospitalEffects::Fixed);
    let mut buf = Vec::new();
    write_mechanism_csv(&mut buf, &ds, &f.mechanism).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    std::fs::write(&path, &buf).unwrap();
    let custom = read_custom_mechanism(&path, &ds).unwrap();
    let a = decompose(&ds, &f.outcome, &f.mediator, &f.mechanism).unwrap();
    let b = decompose(&ds, &f.outcome, &f.mediator, &custom).unwrap();
    for (x, y) in a.omegas().iter().zip(b.omegas()) {
        assert!((x - y).abs() <= 1e-12);
    }
}

fn relabel(ds: &Dataset, perm: &[usize]) -> Dataset {
    // hospital z becomes "g{perm[z]}"; records are rotated so another
    // hospital comes first and becomes the reference
    let n = ds.n();
    let recs: Vec<PatientRecord> = (0..n)
        .map(|k| {
            let i = (k + 1) % n;
            let mut r = ds.record(i);
            let z = ds.hospital()[i];
            r.hospital = format!("g{}", perm[z]);
            r
        })
        .collect();
    Dataset::from_records(recs, ds.covariate_names().to_vec(), ds.mediator_kind()).unwrap()
}

#[test]
fn relabeling_hospitals_leaves_components_unchanged() {
    // [TRIVIAL] decomposition does not depend on the reference hospital
    let ds = continuous_dataset(4, 600, 21);
    let perm = [2, 0, 3, 1];
    let other = relabel(&ds, &perm);
    assert_ne!(other.hospital_labels()[0], format!("g{}", perm[0]));
    for effects in [HospitalEffects::Fixed, HospitalEffects::Random] {
        let f = fit_all(&ds, Family::GaussianIdentity, effects);
        let g = fit_all(&other, Family::GaussianIdentity, effects);
        let a = decompose(&ds, &f.outcome, &f.mediator, &f.mechanism).unwrap();
        let b = decompose(&other, &g.outcome, &g.mediator, &g.mechanism).unwrap();
        for (x, y) in a.omegas().iter().zip(b.omegas()) {
            assert!(close(*x, y, 1e-6), "{effects:?}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn outcome_shift_and_scale() {
    // [TRIVIAL] Gaussian identity: shift invariance, c^2 scaling
    let ds = continuous_dataset(3, 300, 5);
    let f = fit_all(&ds, Family::GaussianIdentity, HospitalEffects::Fixed);
    let base = decompose(&ds, &f.outcome, &f.mediator, &f.mechanism).unwrap();
    let c = -2.5;
    for (scale, shift) in [(1.0, 7.0), (c, 0.0), (c, 3.0)] {
        let y: Vec<f64> = ds.outcome().iter().map(|v| scale * v + shift).collect();
        let other = ds.with_outcome(y).unwrap();
        let g = fit_all(&other, Family::GaussianIdentity, HospitalEffects::Fixed);
        let d = decompose(&other, &g.outcome, &g.mediator, &g.mechanism).unwrap();
        for (x, y) in base.omegas().iter().zip(d.omegas()) {
            assert!(close(scale * scale * x, y, 1e-8), "{scale} {shift}: {x} vs {y}");
        }
    }
}

#[test]
fn hand_evaluated_potential_outcome() {
    // [DERIVED] 0.73 * 0.6 + 1.0 * 0.4 = 0.838
    let out = glm(
        Family::GaussianIdentity,
        Role::Outcome,
        1.0,
        vec![0.0, 0.5],
        Some(-0.27),
        0.0,
    );
    let med = glm(
        Family::BinomialLogit,
        Role::Mediator,
        (0.6f64 / 0.4).ln(),
        vec![0.0, 1.0],
        None,
        0.0,
    );
    assert!((out.predict_mu("h0", 1.0, &[0.3]).unwrap() - 0.73).abs() < 1e-12);
    assert!((out.predict_mu("h0", 0.0, &[0.3]).unwrap() - 1.0).abs() < 1e-12);
    let v = potential_outcome("h0", "h0", &[0.3], &out, &med).unwrap();
    assert!((v - 0.838).abs() < 1e-12);
    assert!(matches!(
        potential_outcome("h9", "h0", &[0.3], &out, &med),
        Err(medvar::error::Error::UnknownHospital(_))
    ));
}

#[test]
fn predictions_of_degenerate_models() {
    // [TRIVIAL] constant outcome model; zero mediator predictor gives 0.5
    let out = glm(
        Family::GaussianIdentity,
        Role::Outcome,
        2.5,
        vec![0.0, 0.0, 0.0],
        Some(0.0),
        0.0,
    );
    let med = glm(
        Family::BinomialLogit,
        Role::Mediator,
        0.0,
        vec![0.0, 0.0, 0.0],
        None,
        0.0,
    );
    for l in ["h0", "h1", "h2"] {
        for m in [0.0, 1.0] {
            assert_eq!(out.predict_mu(l, m, &[1.7]).unwrap(), 2.5);
        }
        let p1 = med.predict_eta(1, l, &[1.7]).unwrap();
        assert_eq!(p1, 0.5);
        assert_eq!(p1 + med.predict_eta(0, l, &[1.7]).unwrap(), 1.0);
    }
}

#[test]
fn linear_special_case_examples() {
    // [DERIVED] direct evaluation of the linear closed forms
    assert_eq!(decompose_linear_special_case(0.0, 0.0, 0.0), [0.0; 4]);
    let w = decompose_linear_special_case(0.3, 0.5, 0.4);
    for (a, b) in w.iter().zip([0.0625, 0.01, 0.0225, 0.03]) {
        assert!((a - b).abs() < 1e-15);
    }
    // [TRIVIAL] cancellation: b2 = -b3 b4 gives a negative covariance term
    let w = decompose_linear_special_case(-0.2, 0.5, 0.4);
    assert!(w[0].abs() < 1e-15);
    assert!(w[1] > 0.0 && (w[1] - w[2]).abs() < 1e-15 && (w[3] + 2.0 * w[1]).abs() < 1e-15);
}

#[test]
fn uniform_two_hospital_one_eighth_forms() {
    // [PAPER] equal assignment: each term carries the factor 1/8
    let ds = continuous_dataset(2, 200, 77);
    let f = fit_all(&ds, Family::GaussianIdentity, HospitalEffects::Fixed);
    let d = decompose(&ds, &f.outcome, &f.mediator, &AssignmentMechanism::Uniform).unwrap();
    let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
    for i in 0..ds.n() {
        let x = ds.covariates_of(i);
        let y = |a: &str, b: &str| potential_outcome(a, b, x, &f.outcome, &f.mediator).unwrap();
        let (y11, y10, y01, y00) = (y("h1", "h1"), y("h1", "h0"), y("h0", "h1"), y("h0", "h0"));
        w0 += 0.25 * (y11 - y00).powi(2);
        w1 += 0.125 * ((y11 - y10).powi(2) + (y01 - y00).powi(2));
        w2 += 0.125 * ((y10 - y00).powi(2) + (y11 - y01).powi(2));
    }
    let n = ds.n() as f64;
    assert!((d.omega0 - w0 / n).abs() < 1e-8);
    assert!((d.omega1 - w1 / n).abs() < 1e-8);
    assert!((d.omega2 - w2 / n).abs() < 1e-8);
}

fn interaction_models() -> (ResponseModel, ResponseModel) {
    let q = 3;
    let out = FittedGlm::from_coefficients(
        Family::BinomialLogit,
        Role::Outcome,
        GlmCoefficients {
            intercept: -0.3,
            hospital: vec![0.0, 0.4, -0.6],
            mediator: Some(0.8),
            interaction: Some(vec![0.0, -0.5, 0.9]),
            covariates: vec![0.2],
        },
        vec![0],
        labels(q),
        None,
    )
    .unwrap();
    let med = FittedGlm::from_coefficients(
        Family::GaussianIdentity,
        Role::Mediator,
        GlmCoefficients {
            intercept: 0.1,
            hospital: vec![0.0, 0.7, -0.4],
            mediator: None,
            interaction: None,
            covariates: vec![0.3],
        },
        vec![0],
        labels(q),
        Some(0.8),
    )
    .unwrap();
    (ResponseModel::Fixed(out), ResponseModel::Fixed(med))
}

#[test]
fn continuous_mediator_quadrature_against_monte_carlo() {
    // [DERIVED] antithetic Monte Carlo integral over the mediator density
    let (out, med) = interaction_models();
    let x = [0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (z, zs) in [("h1", "h2"), ("h2", "h0"), ("h0", "h0")] {
        let mean = med.predict_mu(zs, 0.0, &x).unwrap();
        let sd = 0.8f64.sqrt();
        let draws = 500_000;
        let mut s = 0.0;
        for _ in 0..draws {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            s += out.predict_mu(z, mean + sd * u, &x).unwrap() + out.predict_mu(z, mean - sd * u, &x).unwrap();
        }
        let mc = s / (2 * draws) as f64;
        let gh = potential_outcome_continuous(z, zs, &x, &out, &med, 30).unwrap();
        assert!((gh - mc).abs() < 1e-4, "{z} {zs}: {gh} vs {mc}");
    }
}

fn random_instance(
    q: usize,
    n: usize,
    seed: u64,
    gaussian: bool,
) -> (Dataset, ResponseModel, ResponseModel, AssignmentMechanism) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs: Vec<PatientRecord> = (0..n)
        .map(|i| PatientRecord {
            outcome: 0.0,
            mediator: 0.0,
            hospital: format!("h{}", i % q),
            covariates: vec![rng.random_range(-2.0..2.0)],
        })
        .collect();
    let ds = Dataset::with_labels(labels(q), recs, vec!["x".into()], MediatorKind::Binary).unwrap();
    let mut hosp = |s: f64| -> Vec<f64> {
        let mut v: Vec<f64> = (0..q).map(|_| rng.random_range(-s..s)).collect();
        v[0] = 0.0;
        v
    };
    let (ho, hm) = (hosp(2.0), hosp(1.5));
    let family = if gaussian {
        Family::GaussianIdentity
    } else {
        Family::BinomialLogit
    };
    let out = glm(family, Role::Outcome, 0.2, ho, Some(1.1), -0.4);
    let med = glm(Family::BinomialLogit, Role::Mediator, -0.1, hm, None, 0.7);
    let mut w = Vec::with_capacity(n * q);
    for _ in 0..n {
        let raw: Vec<f64> = (0..q).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        w.extend(raw.iter().map(|v| v / s));
    }
    let mech = AssignmentMechanism::custom(q, w).unwrap();
    (ds, out, med, mech)
}

fn check_invariants(d: &Decomposition) {
    let scale = d.omega0.abs().max(1e-300);
    assert!((d.omega0 - d.omega1 - d.omega2 - d.omega3).abs() <= 1e-10 * scale.max(1.0));
    assert!(d.omega1 >= 0.0 && d.omega2 >= 0.0 && d.omega0 >= 0.0);
    assert!(d.casemix >= 0.0 && d.residual >= -1e-12);
    let t = d.casemix + d.omega0 + d.residual;
    assert!((t - d.total_variance).abs() <= 1e-10 * d.total_variance.max(1.0));
    if let (Some(a), Some(b), Some(c)) = (d.percentages.omega1, d.percentages.omega2, d.percentages.omega3) {
        assert!((a + b + c - 100.0).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decomposition_invariants(q in 2usize..6, n in 6usize..60, seed in 0u64..10_000, gaussian in any::<bool>()) {
        // [TRIVIAL] additivity, non-negativity, three-way identity, masses
        let (ds, out, med, mech) = random_instance(q, n, seed, gaussian);
        let (d, eff) = decompose_with_effects(&ds, &out, &med, &mech).unwrap();
        check_invariants(&d);
        let mass: f64 = eff.mass().iter().sum();
        prop_assert!((mass - 1.0).abs() < 1e-10);
        if gaussian {
            // identity link, no interaction: mass-weighted effects cancel
            let ind: f64 = eff.rows.iter().map(|r| r.mass * r.indirect).sum();
            let dir: f64 = eff.rows.iter().map(|r| r.mass * r.direct).sum();
            prop_assert!(ind.abs() < 1e-8 && dir.abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_mechanism_weights(q in 2usize..6, n in 6usize..30, seed in 0u64..1000) {
        // [TRIVIAL] uniform weights are 1/q and sum to 1
        let (ds, _, _, _) = random_instance(q, n, seed, true);
        let mut w = vec![0.0; q];
        for i in 0..ds.n() {
            AssignmentMechanism::Uniform.weights_into(&ds, i, &mut w);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
