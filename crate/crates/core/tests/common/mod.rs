#![allow(dead_code)]

use medvar::data::{Dataset, MediatorKind, PatientRecord};
use medvar::glm::{FittedGlm, GlmCoefficients};
use medvar::mediation::AssignmentMechanism;
use medvar::model::{fit_model, ResponseModel};
use medvar::model_spec::{Family, HospitalEffects, ModelSpec, Role};
use medvar::multinom::fit_assignment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn labels(q: usize) -> Vec<String> {
    (0..q).map(|z| format!("h{z}")).collect()
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Patients with a binary mediator and one covariate on a small grid.
/// Every hospital gets every covariate value at least once.
pub fn discrete_dataset(q: usize, support: &[f64], per_cell: usize, gaussian_outcome: bool, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hosp: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
    let med: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut recs = Vec::new();
    for z in 0..q {
        for &x in support {
            let extra = rng.random_range(0..=per_cell);
            for _ in 0..per_cell + extra {
                let m = f64::from(u8::from(rng.random::<f64>() < expit(med[z] + 0.8 * x)));
                let lp = hosp[z] + 0.9 * m + 0.5 * x;
                let y = if gaussian_outcome {
                    lp + rng.random_range(-1.0..1.0)
                } else {
                    f64::from(u8::from(rng.random::<f64>() < expit(lp)))
                };
                recs.push(PatientRecord {
                    outcome: y,
                    mediator: m,
                    hospital: format!("h{z}"),
                    covariates: vec![x],
                });
            }
        }
    }
    Dataset::with_labels(labels(q), recs, vec!["x".into()], MediatorKind::Binary).unwrap()
}

/// Continuous covariates, binary mediator, Gaussian outcome.
pub fn continuous_dataset(q: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hosp: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
    let med: Vec<f64> = (0..q).map(|_| rng.random_range(-1.5..1.5)).collect();
    let recs = (0..n)
        .map(|i| {
            let z = i % q;
            let x: f64 = rng.random_range(-2.0..2.0);
            let m = f64::from(u8::from(rng.random::<f64>() < expit(med[z] + 0.6 * x)));
            let y = 1.0 + hosp[z] + 1.3 * m + 0.4 * x + rng.random_range(-1.0..1.0);
            PatientRecord {
                outcome: y,
                mediator: m,
                hospital: format!("h{z}"),
                covariates: vec![x],
            }
        })
        .collect();
    Dataset::with_labels(labels(q), recs, vec!["x".into()], MediatorKind::Binary).unwrap()
}

pub struct Fitted {
    pub outcome: ResponseModel,
    pub mediator: ResponseModel,
    pub mechanism: AssignmentMechanism,
}

pub fn fit_all(ds: &Dataset, outcome_family: Family, effects: HospitalEffects) -> Fitted {
    let covs: Vec<&str> = ds.covariate_names().iter().map(String::as_str).collect();
    let outcome = fit_model(ds, &ModelSpec::new(outcome_family, effects, &covs), Role::Outcome).unwrap();
    let mediator = fit_model(
        ds,
        &ModelSpec::new(Family::BinomialLogit, effects, &covs),
        Role::Mediator,
    )
    .unwrap();
    let mut spec = ModelSpec::new(Family::BinomialLogit, HospitalEffects::Fixed, &covs);
    spec.small_hospital_threshold = 0;
    let mechanism = AssignmentMechanism::Observed(fit_assignment(ds, &spec).unwrap());
    Fitted {
        outcome,
        mediator,
        mechanism,
    }
}

/// A fixed-effect model with given coefficients and one covariate.
pub fn glm(
    family: Family,
    role: Role,
    intercept: f64,
    hospital: Vec<f64>,
    mediator: Option<f64>,
    slope: f64,
) -> ResponseModel {
    let q = hospital.len();
    ResponseModel::Fixed(
        FittedGlm::from_coefficients(
            family,
            role,
            GlmCoefficients {
                intercept,
                hospital,
                mediator,
                interaction: None,
                covariates: vec![slope],
            },
            vec![0],
            labels(q),
            (family == Family::GaussianIdentity).then_some(1.0),
        )
        .unwrap(),
    )
}

/// Components by explicit enumeration over distinct covariate values,
/// hospitals, reference hospitals and mediator levels. omega3 is the
/// direct cross product.
pub fn enumerate_components(ds: &Dataset, f: &Fitted) -> [f64; 5] {
    let labels = ds.hospital_labels().to_vec();
    let q = labels.len();
    let mut xs: Vec<(f64, usize)> = Vec::new();
    for i in 0..ds.n() {
        let x = ds.covariates_of(i)[0];
        match xs.iter_mut().find(|(v, _)| *v == x) {
            Some(e) => e.1 += 1,
            None => xs.push((x, 1)),
        }
    }
    let model = match &f.mechanism {
        AssignmentMechanism::Observed(m) => m,
        _ => unreachable!(),
    };
    let n = ds.n() as f64;
    let mut w = [0.0; 4];
    let mut tbar_moments = (0.0, 0.0);
    for (x, count) in xs {
        let fx = count as f64 / n;
        let x = [x];
        let e: Vec<f64> = labels.iter().map(|l| model.predict_e(l, &x).unwrap()).collect();
        let y = |z: usize, zs: usize| -> f64 {
            (0..2u8)
                .map(|m| {
                    let mu = f.outcome.predict_mu(&labels[z], f64::from(m), &x).unwrap();
                    let p = f.mediator.predict_eta(m, &labels[zs], &x).unwrap();
                    mu * p
                })
                .sum()
        };
        let tbar: f64 = (0..q).map(|z| e[z] * y(z, z)).sum();
        tbar_moments.0 += fx * tbar;
        tbar_moments.1 += fx * tbar * tbar;
        for z in 0..q {
            let t = y(z, z);
            let a: f64 = (0..q).map(|zs| e[zs] * y(z, zs)).sum();
            w[0] += fx * e[z] * (t - tbar).powi(2);
            w[1] += fx * e[z] * (t - a).powi(2);
            w[2] += fx * e[z] * (a - tbar).powi(2);
            w[3] += fx * e[z] * 2.0 * (t - a) * (a - tbar);
        }
    }
    let casemix = tbar_moments.1 - tbar_moments.0 * tbar_moments.0;
    [w[0], w[1], w[2], w[3], casemix]
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}
