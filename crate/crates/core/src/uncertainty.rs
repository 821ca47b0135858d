//! Approximate posterior draws of the variance components: parametric
//! bootstrap refits for the outcome and mediator models, multivariate
//! normal draws for the assignment model.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mediation::{decompose, AssignmentMechanism, Decomposition, COMPONENTS};
use crate::model::{ResponseFitter, ResponseModel};
use crate::model_spec::Family;
use crate::multinom::AssignmentModel;
use crate::par::map_indexed;
use crate::rng::substream;

pub const DEFAULT_DRAWS: usize = 1000;
/// Largest tolerated share of failed refits.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// How hospital intercepts of random-effect models enter resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomEffectResampling {
    /// Fresh intercepts from N(0, tau^2) in every draw.
    Redraw,
    /// Intercepts held at their conditional modes.
    Modes,
}

#[derive(Clone, Debug)]
pub struct PosteriorConfig {
    pub draws: usize,
    pub seed: u64,
    pub random_effects: RandomEffectResampling,
}

impl PosteriorConfig {
    pub fn new(draws: usize, seed: u64) -> Self {
        PosteriorConfig {
            draws,
            seed,
            random_effects: RandomEffectResampling::Redraw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub index: usize,
    pub decomposition: Decomposition,
    /// Outcome model coefficient estimates (then tau^2 for random effects).
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    /// Assignment parameters; empty unless the mechanism is observed.
    pub theta3: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub seed: u64,
    pub requested: usize,
    /// Successful draws in index order.
    pub draws: Vec<Draw>,
    /// Indices of discarded draws.
    pub failed: Vec<usize>,
}

impl PosteriorDraws {
    pub fn values(&self, component: &str) -> Result<Vec<f64>> {
        self.draws
            .iter()
            .map(|d| d.decomposition.component(component))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["draw", "omega0", "omega1", "omega2", "omega3"])?;
        for d in &self.draws {
            let mut rec = vec![d.index.to_string()];
            rec.extend(d.decomposition.omegas().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything needed to recompute the decomposition from new parameters.
pub struct PosteriorInputs<'a> {
    pub dataset: &'a Dataset,
    pub outcome_fitter: &'a ResponseFitter,
    pub mediator_fitter: &'a ResponseFitter,
    pub outcome: &'a ResponseModel,
    pub mediator: &'a ResponseModel,
    pub mechanism: &'a AssignmentMechanism,
}

fn theta_of(model: &ResponseModel) -> Vec<f64> {
    let s = model.summary();
    let mut t: Vec<f64> = s.coefficients.iter().map(|c| c.estimate).collect();
    if let Some(tau2) = s.tau2 {
        t.push(tau2);
    }
    t
}

/// Simulates a response vector from a fitted model at the observed design.
/// The outcome model conditions on the observed mediator.
fn simulate_response(
    model: &ResponseModel,
    dataset: &Dataset,
    use_mediator: bool,
    resampling: RandomEffectResampling,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let q = dataset.q();
    // hospital intercept offsets relative to the fitted predictor
    let shift: Vec<f64> = match (model, resampling) {
        (ResponseModel::Random(f), RandomEffectResampling::Redraw) => {
            let tau = f.tau2.sqrt();
            (0..q)
                .map(|z| tau * rng.sample::<f64, _>(StandardNormal) - f.modes[z])
                .collect()
        }
        _ => vec![0.0; q],
    };
    let sd = model.residual_variance().unwrap_or(0.0).max(0.0).sqrt();
    (0..dataset.n())
        .map(|i| {
            let z = dataset.hospital()[i];
            let m = if use_mediator { dataset.mediator()[i] } else { 0.0 };
            let eta = model.linear_predictor(z, m, dataset.covariates_of(i)) + shift[z];
            match model.family() {
                Family::GaussianIdentity => {
                    let e: f64 = rng.sample(StandardNormal);
                    eta + sd * e
                }
                Family::BinomialLogit => {
                    let p = model.family().inverse_link(eta);
                    f64::from(u8::from(rng.random::<f64>() < p))
                }
            }
        })
        .collect()
}

/// Lower-triangular factor of a covariance matrix; falls back to an
/// eigen-decomposition with negative eigenvalues clipped.
fn covariance_factor(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition(
            "assignment covariance is not finite; cannot draw assignment parameters".into(),
        ));
    }
    if let Some(c) = v.clone().cholesky() {
        return Ok(c.l());
    }
    warn!("assignment covariance is not positive definite; clipping eigenvalues");
    let eig = SymmetricEigen::new(v.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d)
}

fn draw_assignment(model: &AssignmentModel, factor: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<AssignmentModel> {
    let theta = DVector::from_vec(model.theta());
    let z = DVector::from_fn(theta.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let t = theta + factor * z;
    model.with_theta(t.as_slice())
}

/// Fixed outcome and mediator models refit to responses simulated from the
/// fitted models, assignment parameters from their normal approximation,
/// and the decomposition recomputed for every draw. Draw `b` depends only
/// on `(seed, b)`.
pub fn draw_posterior(inputs: &PosteriorInputs, config: &PosteriorConfig) -> Result<PosteriorDraws> {
    if config.draws == 0 {
        return Err(Error::Config("at least one posterior draw is required".into()));
    }
    let ds = inputs.dataset;
    let factor = match inputs.mechanism {
        AssignmentMechanism::Observed(m) => Some(covariance_factor(&m.vcov)?),
        _ => None,
    };
    let results = map_indexed(config.draws, |b| -> Result<Draw> {
        let mut rng = substream(config.seed, &[0x6472_6177, b as u64]);
        let y = simulate_response(inputs.outcome, ds, true, config.random_effects, &mut rng);
        let m = simulate_response(inputs.mediator, ds, false, config.random_effects, &mut rng);
        let mechanism = match (inputs.mechanism, &factor) {
            (AssignmentMechanism::Observed(model), Some(f)) => {
                AssignmentMechanism::Observed(draw_assignment(model, f, &mut rng)?)
            }
            (other, _) => other.clone(),
        };
        let outcome = inputs.outcome_fitter.refit(&y, inputs.outcome)?;
        let mediator = inputs.mediator_fitter.refit(&m, inputs.mediator)?;
        let decomposition = decompose(ds, &outcome, &mediator, &mechanism)?;
        let theta3 = match &mechanism {
            AssignmentMechanism::Observed(a) => a.theta(),
            _ => Vec::new(),
        };
        Ok(Draw {
            index: b,
            decomposition,
            theta1: theta_of(&outcome),
            theta2: theta_of(&mediator),
            theta3,
        })
    });
    let mut draws = Vec::with_capacity(config.draws);
    let mut failed = Vec::new();
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => draws.push(d),
            Err(e @ (Error::NonConvergence { .. } | Error::SingularDesign { .. })) => {
                warn!("posterior draw {b} discarded: {e}");
                failed.push(b);
            }
            Err(e) => return Err(e),
        }
    }
    if failed.len() as f64 > MAX_FAILURE_RATE * config.draws as f64 {
        return Err(Error::TooManyFailures {
            failed: failed.len(),
            total: config.draws,
        });
    }
    Ok(PosteriorDraws {
        seed: config.seed,
        requested: config.draws,
        draws,
        failed,
    })
}

/// Linear interpolation between order statistics (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed interval of one component at the given level.
pub fn credible_interval(draws: &PosteriorDraws, component: &str, level: f64) -> Result<(f64, f64)> {
    let values = draws.values(component)?;
    interval_of(values, level)
}

pub fn interval_of(mut values: Vec<f64>, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
    }
    if values.len() < 2 {
        return Err(Error::Precondition(
            "at least two draws are needed for an interval".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&values, a), quantile_sorted(&values, 1.0 - a)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub component: String,
    pub lower: f64,
    pub upper: f64,
}

/// Intervals for every component in `COMPONENTS`.
pub fn all_intervals(draws: &PosteriorDraws, level: f64) -> Result<Vec<Interval>> {
    COMPONENTS
        .iter()
        .map(|c| {
            let (lower, upper) = credible_interval(draws, c, level)?;
            Ok(Interval {
                component: c.to_string(),
                lower,
                upper,
            })
        })
        .collect()
}
