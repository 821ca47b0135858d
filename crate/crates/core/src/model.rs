//! Outcome and mediator models behind one prediction interface, whichever
//! way hospital effects are modelled.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::glm::{CoefRow, FittedGlm, GlmFitter};
use crate::glmm::{FittedGlmm, GlmmFitter, GlmmOptions};
use crate::model_spec::{Family, HospitalEffects, ModelSpec, Role};

#[derive(Clone, Debug)]
pub enum ResponseModel {
    Fixed(FittedGlm),
    Random(FittedGlmm),
}

impl ResponseModel {
    pub fn family(&self) -> Family {
        match self {
            ResponseModel::Fixed(m) => m.family,
            ResponseModel::Random(m) => m.family,
        }
    }

    pub fn q(&self) -> usize {
        match self {
            ResponseModel::Fixed(m) => m.q(),
            ResponseModel::Random(m) => m.q(),
        }
    }

    pub fn hospital_labels(&self) -> &[String] {
        match self {
            ResponseModel::Fixed(m) => &m.hospital_labels,
            ResponseModel::Random(m) => &m.hospital_labels,
        }
    }

    /// Mean response at hospital index `z`, mediator `m`, covariates `x`.
    #[inline]
    pub fn mean(&self, z: usize, m: f64, x: &[f64]) -> f64 {
        match self {
            ResponseModel::Fixed(f) => f.mean(z, m, x),
            ResponseModel::Random(f) => f.mean(z, m, x),
        }
    }

    pub fn linear_predictor(&self, z: usize, m: f64, x: &[f64]) -> f64 {
        match self {
            ResponseModel::Fixed(f) => f.linear_predictor(z, m, x),
            ResponseModel::Random(f) => f.linear_predictor(z, m, x),
        }
    }

    pub fn residual_variance(&self) -> Option<f64> {
        match self {
            ResponseModel::Fixed(f) => f.residual_variance,
            ResponseModel::Random(f) => f.residual_variance,
        }
    }

    /// Whether mu(z, m, x) is affine in m with a hospital-free slope.
    pub fn is_linear_in_mediator(&self) -> bool {
        match self {
            ResponseModel::Fixed(f) => f.family == Family::GaussianIdentity,
            ResponseModel::Random(f) => f.family == Family::GaussianIdentity,
        }
    }

    pub fn predict_mu(&self, label: &str, m: f64, x: &[f64]) -> Result<f64> {
        match self {
            ResponseModel::Fixed(f) => f.predict_mu(label, m, x),
            ResponseModel::Random(f) => f.predict_mu(label, m, x),
        }
    }

    pub fn predict_eta(&self, m: u8, label: &str, x: &[f64]) -> Result<f64> {
        match self {
            ResponseModel::Fixed(f) => f.predict_eta(m, label, x),
            ResponseModel::Random(f) => f.predict_eta(m, label, x),
        }
    }

    pub fn summary(&self) -> ModelSummary {
        match self {
            ResponseModel::Fixed(f) => ModelSummary {
                role: f.role,
                family: f.family,
                hospital_effects: HospitalEffects::Fixed,
                n: f.n,
                coefficients: f.table.clone(),
                residual_variance: f.residual_variance,
                log_likelihood: f.log_likelihood,
                deviance: Some(f.deviance),
                tau2: None,
                lrt: None,
                boundary: None,
                converged: f.converged,
                ridge_stabilized: f.ridge_stabilized,
                iterations: f.iterations,
            },
            ResponseModel::Random(f) => ModelSummary {
                role: f.role,
                family: f.family,
                hospital_effects: HospitalEffects::Random,
                n: f.n,
                coefficients: f.table.clone(),
                residual_variance: f.residual_variance,
                log_likelihood: f.log_likelihood,
                deviance: None,
                tau2: Some(f.tau2),
                lrt: Some(f.lrt),
                boundary: Some(f.boundary),
                converged: f.converged,
                ridge_stabilized: false,
                iterations: f.iterations,
            },
        }
    }
}

/// Coefficient table and fit diagnostics for the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub role: Role,
    pub family: Family,
    pub hospital_effects: HospitalEffects,
    pub n: usize,
    pub coefficients: Vec<CoefRow>,
    pub residual_variance: Option<f64>,
    pub log_likelihood: f64,
    pub deviance: Option<f64>,
    pub tau2: Option<f64>,
    /// Likelihood-ratio statistic against the model without hospital terms.
    pub lrt: Option<f64>,
    pub boundary: Option<bool>,
    pub converged: bool,
    pub ridge_stabilized: bool,
    pub iterations: usize,
}

/// Prepared design for repeated fits on new responses.
#[derive(Clone, Debug)]
pub enum ResponseFitter {
    Fixed(GlmFitter),
    Random(GlmmFitter),
}

impl ResponseFitter {
    pub fn new(dataset: &Dataset, spec: &ModelSpec, role: Role) -> Result<Self> {
        Ok(match spec.hospital_effects {
            HospitalEffects::Fixed => ResponseFitter::Fixed(GlmFitter::new(dataset, spec, role)?),
            HospitalEffects::Random => ResponseFitter::Random(GlmmFitter::new(dataset, spec, role)?),
        })
    }

    /// Skips the finite-difference standard errors of binomial GLMMs.
    pub fn without_std_errors(self) -> Self {
        match self {
            ResponseFitter::Random(f) => ResponseFitter::Random(f.with_options(GlmmOptions {
                std_errors: false,
                ..Default::default()
            })),
            other => other,
        }
    }

    pub fn fit(&self, y: &[f64]) -> Result<ResponseModel> {
        Ok(match self {
            ResponseFitter::Fixed(f) => ResponseModel::Fixed(f.fit(y)?),
            ResponseFitter::Random(f) => ResponseModel::Random(f.fit(y)?),
        })
    }

    /// Refit warm-started from a previous fit where that helps.
    pub fn refit(&self, y: &[f64], previous: &ResponseModel) -> Result<ResponseModel> {
        Ok(match (self, previous) {
            (ResponseFitter::Random(f), ResponseModel::Random(prev)) => ResponseModel::Random(f.fit_from(y, prev)?),
            _ => self.fit(y)?,
        })
    }
}

/// Fits the outcome (`Role::Outcome`) or mediator (`Role::Mediator`) model.
pub fn fit_model(dataset: &Dataset, spec: &ModelSpec, role: Role) -> Result<ResponseModel> {
    let y = match role {
        Role::Outcome => dataset.outcome(),
        _ => dataset.mediator(),
    };
    ResponseFitter::new(dataset, spec, role)?.fit(y)
}
