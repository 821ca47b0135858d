use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response distribution paired with its canonical link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianIdentity,
    BinomialLogit,
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::BinomialLogit => expit(eta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "gaussian-identity",
            Family::BinomialLogit => "binomial-logit",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gaussian-identity" => Ok(Family::GaussianIdentity),
            "binomial" | "binomial-logit" => Ok(Family::BinomialLogit),
            _ => Err(Error::Config(format!("unknown family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HospitalEffects {
    Fixed,
    Random,
}

impl std::str::FromStr for HospitalEffects {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(HospitalEffects::Fixed),
            "random" => Ok(HospitalEffects::Random),
            _ => Err(Error::Config(format!("unknown hospital effects `{s}`"))),
        }
    }
}

/// Which model a spec is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Outcome,
    Mediator,
    Assignment,
}

pub const DEFAULT_SMALL_HOSPITAL_THRESHOLD: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub hospital_effects: HospitalEffects,
    pub covariate_terms: Vec<String>,
    /// Hospital-by-mediator interaction; outcome model only.
    #[serde(default)]
    pub interaction: bool,
    /// Hospitals with fewer patients get intercept-only assignment terms;
    /// assignment model only.
    #[serde(default = "default_threshold")]
    pub small_hospital_threshold: usize,
}

fn default_threshold() -> usize {
    DEFAULT_SMALL_HOSPITAL_THRESHOLD
}

impl ModelSpec {
    pub fn new(family: Family, hospital_effects: HospitalEffects, covariates: &[&str]) -> Self {
        ModelSpec {
            family,
            hospital_effects,
            covariate_terms: covariates.iter().map(|s| s.to_string()).collect(),
            interaction: false,
            small_hospital_threshold: DEFAULT_SMALL_HOSPITAL_THRESHOLD,
        }
    }

    pub fn with_interaction(mut self) -> Self {
        self.interaction = true;
        self
    }

    pub fn validate(&self, role: Role) -> Result<()> {
        if self.interaction && role != Role::Outcome {
            return Err(Error::Config(
                "hospital x mediator interaction is only allowed on the outcome model".into(),
            ));
        }
        if self.interaction && self.hospital_effects == HospitalEffects::Random {
            return Err(Error::Config("interactions require fixed hospital effects".into()));
        }
        Ok(())
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
pub fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
