//! End-to-end decomposition run: ingest, fit, decompose, resample, report.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{ingest_csv, ColumnMapping, Dataset, MediatorKind};
use crate::error::{Error, Result};
use crate::mediation::{decompose_with_effects, read_custom_mechanism, write_grid, AssignmentMechanism};
use crate::model::ResponseFitter;
use crate::model_spec::{Family, HospitalEffects, ModelSpec, Role};
use crate::multinom::fit_assignment;
use crate::report::{Report, Timing, SCHEMA_VERSION};
use crate::uncertainty::{all_intervals, draw_posterior, PosteriorConfig, PosteriorInputs, RandomEffectResampling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismArg {
    Observed,
    Uniform,
    Custom(PathBuf),
}

impl FromStr for MechanismArg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(MechanismArg::Observed),
            "uniform" => Ok(MechanismArg::Uniform),
            _ => match s.strip_prefix("custom:") {
                Some(p) if !p.is_empty() => Ok(MechanismArg::Custom(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "unknown mechanism `{s}` (expected observed, uniform or custom:<path>)"
                ))),
            },
        }
    }
}

impl MechanismArg {
    fn name(&self) -> String {
        match self {
            MechanismArg::Observed => "observed".into(),
            MechanismArg::Uniform => "uniform".into(),
            MechanismArg::Custom(p) => format!("custom:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub columns: ColumnMapping,
    pub outcome_family: Family,
    pub outcome_effects: HospitalEffects,
    pub mediator_effects: HospitalEffects,
    /// Hospital-by-mediator interaction in the outcome model.
    pub interaction: bool,
    pub small_hospital_threshold: usize,
    pub mechanism: MechanismArg,
    /// Posterior draws; 0 skips interval estimation.
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    pub random_effects: RandomEffectResampling,
    pub keep_draws: Option<PathBuf>,
    pub emit_grid: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, columns: ColumnMapping) -> Self {
        RunConfig {
            input: input.into(),
            columns,
            outcome_family: Family::GaussianIdentity,
            outcome_effects: HospitalEffects::Fixed,
            mediator_effects: HospitalEffects::Fixed,
            interaction: false,
            small_hospital_threshold: 40,
            mechanism: MechanismArg::Observed,
            bootstrap: 0,
            level: 0.95,
            seed: 0,
            random_effects: RandomEffectResampling::Redraw,
            keep_draws: None,
            emit_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.bootstrap == 0 && self.keep_draws.is_some() {
            return Err(Error::Config("--keep-draws needs --bootstrap > 0".into()));
        }
        Ok(())
    }
}

fn create(path: &PathBuf) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Runs the full analysis on the configured CSV.
pub fn run_decompose(config: &RunConfig) -> Result<Report> {
    config.validate()?;
    let ingested = ingest_csv(&config.input, &config.columns)?;
    run_on_dataset(config, &ingested.dataset, ingested.rejected_rows)
}

/// As [`run_decompose`] for an already ingested dataset.
pub fn run_on_dataset(config: &RunConfig, dataset: &Dataset, rejected_rows: usize) -> Result<Report> {
    config.validate()?;
    let start = Instant::now();
    let covs: Vec<&str> = dataset.covariate_names().iter().map(String::as_str).collect();
    let mut out_spec = ModelSpec::new(config.outcome_family, config.outcome_effects, &covs);
    out_spec.interaction = config.interaction;
    let med_family = match dataset.mediator_kind() {
        MediatorKind::Binary => Family::BinomialLogit,
        MediatorKind::Continuous => Family::GaussianIdentity,
    };
    let med_spec = ModelSpec::new(med_family, config.mediator_effects, &covs);

    let out_fitter = ResponseFitter::new(dataset, &out_spec, Role::Outcome)?;
    let med_fitter = ResponseFitter::new(dataset, &med_spec, Role::Mediator)?;
    let outcome = out_fitter.fit(dataset.outcome())?;
    let mediator = med_fitter.fit(dataset.mediator())?;
    let summaries = vec![outcome.summary(), mediator.summary()];
    let mechanism = match &config.mechanism {
        MechanismArg::Observed => {
            let mut spec = ModelSpec::new(Family::BinomialLogit, HospitalEffects::Fixed, &covs);
            spec.small_hospital_threshold = config.small_hospital_threshold;
            let model = fit_assignment(dataset, &spec)?;
            AssignmentMechanism::Observed(model)
        }
        MechanismArg::Uniform => AssignmentMechanism::Uniform,
        MechanismArg::Custom(path) => read_custom_mechanism(path, dataset)?,
    };
    let fit_seconds = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let (decomposition, effects) = decompose_with_effects(dataset, &outcome, &mediator, &mechanism)?;
    if let Some(path) = &config.emit_grid {
        write_grid(create(path)?, dataset, &outcome, &mediator)?;
    }
    let decompose_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (intervals, failures) = if config.bootstrap > 0 {
        let inputs = PosteriorInputs {
            dataset,
            outcome_fitter: &out_fitter,
            mediator_fitter: &med_fitter,
            outcome: &outcome,
            mediator: &mediator,
            mechanism: &mechanism,
        };
        let mut pc = PosteriorConfig::new(config.bootstrap, config.seed);
        pc.random_effects = config.random_effects;
        let draws = draw_posterior(&inputs, &pc)?;
        if let Some(path) = &config.keep_draws {
            draws.write_csv(create(path)?)?;
        }
        (all_intervals(&draws, config.level)?, draws.failed.len())
    } else {
        (Vec::new(), 0)
    };
    let bootstrap_seconds = t.elapsed().as_secs_f64();
    info!(
        "omega0 = {:.6} (indirect {:.6}, direct {:.6}, covariance {:.6})",
        decomposition.omega0, decomposition.omega1, decomposition.omega2, decomposition.omega3
    );

    Ok(Report {
        schema_version: SCHEMA_VERSION,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        mechanism: config.mechanism.name(),
        n: dataset.n(),
        q: dataset.q(),
        rejected_rows,
        decomposition,
        level: config.level,
        bootstrap_draws: config.bootstrap,
        bootstrap_failures: failures,
        credible_intervals: intervals,
        model_summaries: summaries,
        per_hospital_effects: effects.rows,
        timing: Timing {
            fit_seconds,
            decompose_seconds,
            bootstrap_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}
