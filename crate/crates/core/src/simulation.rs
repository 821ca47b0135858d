//! Synthetic hospital data with known hospital effects, a Monte Carlo
//! evaluator of the true variance components, and a replication harness.
//!
//! Patients have `X1 ~ N(0,1)`, `X2 ~ Bernoulli(0.5)`, a hospital drawn
//! from a multinomial logit in `(X1, X2)`, a binary mediator
//! `1{alpha_z + X1 + 1.5 X2 + eps >= 0}` and an outcome
//! `beta_z + beta_m M + X1 + 2 X2 + xi` (optionally dichotomized at 0),
//! with logistic `eps` and `xi`. Hospital effects `(alpha_z, beta_z)` are
//! bivariate normal with variances 4 and covariance `sigma`.

use log::{debug, info, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MediatorKind, PatientRecord};
use crate::error::{Error, Result};
use crate::mediation::{decompose, AssignmentMechanism, Decomposition, COMPONENTS};
use crate::model::ResponseFitter;
use crate::model_spec::{Family, HospitalEffects, ModelSpec, Role};
use crate::multinom::fit_assignment;
use crate::par::map_indexed;
use crate::rng::{logistic, substream};
use crate::uncertainty::{credible_interval, draw_posterior, PosteriorConfig, PosteriorInputs, MAX_FAILURE_RATE};

const PARAMS_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const ORACLE_STREAM: u64 = 3;
const BOOTSTRAP_STREAM: u64 = 4;

/// Batches used for oracle standard errors.
const ORACLE_BATCHES: usize = 100;
/// Below this many draws the oracle warns and inflates its standard errors.
pub const MIN_ORACLE_DRAWS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeType {
    Continuous,
    Binary,
}

fn default_intercept_var() -> f64 {
    0.25
}
fn default_slope_var() -> f64 {
    0.5
}
fn default_effect_var() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub q: usize,
    /// Covariance of the mediator and outcome hospital effects.
    pub sigma: f64,
    /// Effect of the mediator on the outcome.
    pub mediator_effect: f64,
    pub outcome_type: OutcomeType,
    /// Variance of the assignment intercepts.
    #[serde(default = "default_intercept_var")]
    pub assignment_intercept_var: f64,
    /// Variance of the assignment slopes.
    #[serde(default = "default_slope_var")]
    pub assignment_slope_var: f64,
    /// Variance of each hospital effect.
    #[serde(default = "default_effect_var")]
    pub hospital_effect_var: f64,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(n: usize, q: usize, sigma: f64, mediator_effect: f64, outcome_type: OutcomeType, seed: u64) -> Self {
        SimulationConfig {
            n,
            q,
            sigma,
            mediator_effect,
            outcome_type,
            assignment_intercept_var: default_intercept_var(),
            assignment_slope_var: default_slope_var(),
            hospital_effect_var: default_effect_var(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 2 || self.n < self.q {
            return Err(Error::Config(format!(
                "need q >= 2 and n >= q (got n = {}, q = {})",
                self.n, self.q
            )));
        }
        let v = self.hospital_effect_var;
        if !(v >= 0.0) || self.sigma.abs() > v {
            return Err(Error::Config(format!(
                "hospital-effect covariance [[{v}, {s}], [{s}, {v}]] is not positive semi-definite",
                s = self.sigma
            )));
        }
        if !(self.assignment_intercept_var >= 0.0 && self.assignment_slope_var >= 0.0) {
            return Err(Error::Config("assignment variances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Realized hospital effects and assignment parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    /// Hospital effects on the mediator.
    pub alpha: Vec<f64>,
    /// Hospital effects on the outcome.
    pub beta: Vec<f64>,
    /// Assignment intercepts.
    pub psi: Vec<f64>,
    /// Assignment slopes on `(X1, X2)`.
    pub phi: Vec<[f64; 2]>,
    pub mediator_effect: f64,
    pub outcome_type: OutcomeType,
}

impl TrueParameters {
    fn assignment_probs(&self, x1: f64, x2: f64, out: &mut [f64]) {
        let mut mx = f64::NEG_INFINITY;
        for (z, o) in out.iter_mut().enumerate() {
            *o = self.psi[z] + self.phi[z][0] * x1 + self.phi[z][1] * x2;
            mx = mx.max(*o);
        }
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - mx).exp();
            s += *o;
        }
        for o in out.iter_mut() {
            *o /= s;
        }
    }
}

/// Draws hospital parameters; `stream` selects an independent set.
pub fn draw_parameters(config: &SimulationConfig, stream: u64) -> TrueParameters {
    let mut rng = substream(config.seed, &[PARAMS_STREAM, stream]);
    let q = config.q;
    let v = config.hospital_effect_var;
    // Cholesky of [[v, s], [s, v]]
    let l11 = v.sqrt();
    let l21 = if l11 > 0.0 { config.sigma / l11 } else { 0.0 };
    let l22 = (v - l21 * l21).max(0.0).sqrt();
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let mut alpha = Vec::with_capacity(q);
    let mut beta = Vec::with_capacity(q);
    for _ in 0..q {
        let (a, b) = (normal(), normal());
        alpha.push(l11 * a);
        beta.push(l21 * a + l22 * b);
    }
    let si = config.assignment_intercept_var.sqrt();
    let ss = config.assignment_slope_var.sqrt();
    let psi = (0..q).map(|_| si * normal()).collect();
    let phi = (0..q).map(|_| [ss * normal(), ss * normal()]).collect();
    TrueParameters {
        alpha,
        beta,
        psi,
        phi,
        mediator_effect: config.mediator_effect,
        outcome_type: config.outcome_type,
    }
}

pub fn hospital_labels(q: usize) -> Vec<String> {
    (1..=q).map(|z| format!("H{z}")).collect()
}

/// Redraw attempts before a replication with an empty hospital is given up.
const MAX_ATTEMPTS: u64 = 1000;

/// One dataset of replication `rep` under fixed parameters. Draws that
/// leave a hospital without patients are rejected and redrawn, so the data
/// follow the generator conditional on all `q` hospitals being observed.
pub fn generate_replication(config: &SimulationConfig, params: &TrueParameters, rep: u64) -> Result<Dataset> {
    for attempt in 0..MAX_ATTEMPTS {
        let records = draw_records(config, params, rep, attempt);
        let mut seen = vec![false; config.q];
        for r in &records {
            seen[r.0] = true;
        }
        if seen.iter().all(|&s| s) {
            if attempt > 0 {
                debug!("replication {rep}: {attempt} draw(s) rejected for empty hospitals");
            }
            let labels = hospital_labels(config.q);
            let records = records
                .into_iter()
                .map(|(z, rec)| PatientRecord {
                    hospital: labels[z].clone(),
                    ..rec
                })
                .collect();
            return Dataset::with_labels(labels, records, vec!["x1".into(), "x2".into()], MediatorKind::Binary);
        }
    }
    Err(Error::Validation(format!(
        "replication {rep}: some hospital stayed empty in {MAX_ATTEMPTS} draws"
    )))
}

fn draw_records(
    config: &SimulationConfig,
    params: &TrueParameters,
    rep: u64,
    attempt: u64,
) -> Vec<(usize, PatientRecord)> {
    let mut rng = substream(config.seed, &[DATA_STREAM, rep, attempt]);
    let q = config.q;
    let mut probs = vec![0.0; q];
    let mut records = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let x1: f64 = rng.sample(StandardNormal);
        let x2 = f64::from(u8::from(rng.random::<f64>() < 0.5));
        params.assignment_probs(x1, x2, &mut probs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut z = q - 1;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                z = k;
                break;
            }
        }
        let m_star = params.alpha[z] + x1 + 1.5 * x2 + logistic(&mut rng);
        let m = f64::from(u8::from(m_star >= 0.0));
        let y_star = params.beta[z] + params.mediator_effect * m + x1 + 2.0 * x2 + logistic(&mut rng);
        let y = match config.outcome_type {
            OutcomeType::Continuous => y_star,
            OutcomeType::Binary => f64::from(u8::from(y_star >= 0.0)),
        };
        let rec = PatientRecord {
            outcome: y,
            mediator: m,
            hospital: String::new(),
            covariates: vec![x1, x2],
        };
        records.push((z, rec));
    }
    records
}

/// Draws the scenario's parameters and its first dataset.
pub fn generate(config: &SimulationConfig) -> Result<(Dataset, TrueParameters)> {
    config.validate()?;
    let params = draw_parameters(config, 0);
    let ds = generate_replication(config, &params, 0)?;
    Ok((ds, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub omega0: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub casemix: f64,
    pub residual: f64,
    pub total_variance: f64,
    /// Monte Carlo standard errors, same order as `COMPONENTS`.
    pub std_errors: Vec<f64>,
    pub mc_draws: usize,
}

impl OracleResult {
    pub fn component(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "omega0" => self.omega0,
            "omega1" => self.omega1,
            "omega2" => self.omega2,
            "omega3" => self.omega3,
            "casemix" => self.casemix,
            "residual" => self.residual,
            "total_variance" => self.total_variance,
            _ => return Err(Error::UnknownComponent(name.to_string())),
        })
    }

    pub fn std_error(&self, name: &str) -> Result<f64> {
        COMPONENTS
            .iter()
            .position(|c| *c == name)
            .map(|k| self.std_errors[k])
            .ok_or_else(|| Error::UnknownComponent(name.to_string()))
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Population components for covariate draw `(x1, x2)`:
/// `[omega0, omega1, omega2, omega3, Tbar, within]`, with omega3 taken as
/// the cross product directly.
fn population_terms(p: &TrueParameters, x1: f64, x2: f64, s: &mut OracleScratch) -> [f64; 6] {
    let q = p.alpha.len();
    p.assignment_probs(x1, x2, &mut s.e);
    for z in 0..q {
        s.eta[z] = expit(p.alpha[z] + x1 + 1.5 * x2);
        let base = p.beta[z] + x1 + 2.0 * x2;
        let (m0, m1) = (base, base + p.mediator_effect);
        match p.outcome_type {
            OutcomeType::Continuous => {
                s.mu0[z] = m0;
                s.mu1[z] = m1;
            }
            OutcomeType::Binary => {
                s.mu0[z] = expit(m0);
                s.mu1[z] = expit(m1);
            }
        }
    }
    // explicit grid E(Y_{z M_{z*}} | x)
    for z in 0..q {
        for zs in 0..q {
            s.grid[z * q + zs] = s.mu1[z] * s.eta[zs] + s.mu0[z] * (1.0 - s.eta[zs]);
        }
    }
    let mut tbar = 0.0;
    for z in 0..q {
        tbar += s.grid[z * q + z] * s.e[z];
    }
    let logistic_var = std::f64::consts::PI * std::f64::consts::PI / 3.0;
    let mut out = [0.0; 6];
    out[4] = tbar;
    for z in 0..q {
        let t = s.grid[z * q + z];
        let mut a = 0.0;
        for zs in 0..q {
            a += s.grid[z * q + zs] * s.e[zs];
        }
        let (nie, nde) = (t - a, a - tbar);
        let e = s.e[z];
        out[0] += e * (t - tbar) * (t - tbar);
        out[1] += e * nie * nie;
        out[2] += e * nde * nde;
        out[3] += 2.0 * e * nie * nde;
        let within = match p.outcome_type {
            OutcomeType::Continuous => {
                let d = s.mu1[z] - s.mu0[z];
                logistic_var + s.eta[z] * (1.0 - s.eta[z]) * d * d
            }
            OutcomeType::Binary => t * (1.0 - t),
        };
        out[5] += e * within;
    }
    out
}

struct OracleScratch {
    e: Vec<f64>,
    eta: Vec<f64>,
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    grid: Vec<f64>,
}

/// True components for fixed parameters, by Monte Carlo over X.
pub fn oracle_truth(config: &SimulationConfig, params: &TrueParameters, mc_draws: usize) -> Result<OracleResult> {
    oracle_with_stream(config, params, mc_draws, 0)
}

fn oracle_with_stream(
    config: &SimulationConfig,
    params: &TrueParameters,
    mc_draws: usize,
    stream: u64,
) -> Result<OracleResult> {
    if mc_draws < ORACLE_BATCHES {
        return Err(Error::Config(format!("oracle needs at least {ORACLE_BATCHES} draws")));
    }
    if mc_draws < MIN_ORACLE_DRAWS {
        warn!("oracle with {mc_draws} draws (< {MIN_ORACLE_DRAWS}); standard errors inflated");
    }
    let q = params.alpha.len();
    let per = mc_draws / ORACLE_BATCHES;
    // per batch: sums of omega0..3, Tbar, Tbar^2, within
    let batches = map_indexed(ORACLE_BATCHES, |b| {
        let mut rng = substream(config.seed, &[ORACLE_STREAM, stream, b as u64]);
        let mut s = OracleScratch {
            e: vec![0.0; q],
            eta: vec![0.0; q],
            mu0: vec![0.0; q],
            mu1: vec![0.0; q],
            grid: vec![0.0; q * q],
        };
        let mut acc = [0.0; 7];
        for _ in 0..per {
            let x1: f64 = rng.sample(StandardNormal);
            let x2 = f64::from(u8::from(rng.random::<f64>() < 0.5));
            let t = population_terms(params, x1, x2, &mut s);
            for k in 0..4 {
                acc[k] += t[k];
            }
            acc[4] += t[4];
            acc[5] += t[4] * t[4];
            acc[6] += t[5];
        }
        acc.map(|v| v / per as f64)
    });
    let nb = ORACLE_BATCHES as f64;
    let mean = |k: usize| batches.iter().map(|b| b[k]).sum::<f64>() / nb;
    let se = |f: &dyn Fn(&[f64; 7]) -> f64| {
        let vals: Vec<f64> = batches.iter().map(f).collect();
        let m = vals.iter().sum::<f64>() / nb;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nb - 1.0);
        (var / nb).sqrt()
    };
    let (w0, w1, w2, w3) = (mean(0), mean(1), mean(2), mean(3));
    let tmean = mean(4);
    let casemix = (mean(5) - tmean * tmean).max(0.0);
    let within = mean(6);
    let total = within + w0 + casemix;
    let inflate = (MIN_ORACLE_DRAWS as f64 / (per * ORACLE_BATCHES) as f64)
        .max(1.0)
        .sqrt();
    let std_errors = vec![
        se(&|b| b[0]),
        se(&|b| b[1]),
        se(&|b| b[2]),
        se(&|b| b[3]),
        se(&|b| b[5] - b[4] * b[4]),
        se(&|b| b[6]),
        se(&|b| b[6] + b[0] + b[5] - b[4] * b[4]),
    ]
    .into_iter()
    .map(|v| v * inflate)
    .collect();
    Ok(OracleResult {
        omega0: w0,
        omega1: w1,
        omega2: w2,
        omega3: w3,
        casemix,
        residual: within,
        total_variance: total,
        std_errors,
        mc_draws: per * ORACLE_BATCHES,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismChoice {
    Observed,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub draws: usize,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    /// Model variants fitted to every replication.
    pub effects: Vec<HospitalEffects>,
    pub mechanism: MechanismChoice,
    /// Assignment-model slope threshold.
    #[serde(default)]
    pub small_hospital_threshold: usize,
    /// Credible intervals per replication (costly).
    #[serde(default)]
    pub bootstrap: Option<BootstrapSettings>,
    /// Draw fresh hospital parameters for every replication and compare
    /// with a per-replication oracle.
    #[serde(default)]
    pub redraw_hospital_effects: bool,
    /// Oracle Monte Carlo draws.
    pub oracle_draws: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            effects: vec![HospitalEffects::Fixed],
            mechanism: MechanismChoice::Observed,
            small_hospital_threshold: 0,
            bootstrap: None,
            redraw_hospital_effects: false,
            oracle_draws: 1_000_000,
        }
    }
}

/// Scenario file contents for the `simulate` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub config: SimulationConfig,
    pub replications: usize,
    #[serde(default)]
    pub settings: EstimatorSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub effects: HospitalEffects,
    pub estimate: Decomposition,
    /// Per-replication truth (redraw mode only).
    pub truth: Option<[f64; 4]>,
    /// Credible interval for omega0 (bootstrap only).
    pub omega0_interval: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: String,
    pub mean: f64,
    pub sd: f64,
    /// 2.5% and 97.5% quantiles of the sampling distribution.
    pub q025: f64,
    pub q975: f64,
    /// Monte Carlo standard error of the mean.
    pub mc_se: f64,
    pub mean_ci: (f64, f64),
    /// Oracle truth (fixed-parameter mode) or mean truth (redraw mode).
    pub truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub effects: HospitalEffects,
    pub replications: usize,
    pub components: Vec<ComponentSummary>,
    /// Share of replications whose omega0 interval covers the truth.
    pub omega0_coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub replication: usize,
    pub effects: HospitalEffects,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub config: SimulationConfig,
    pub settings: EstimatorSettings,
    pub requested: usize,
    pub oracle: Option<OracleResult>,
    pub variants: Vec<VariantSummary>,
    pub failed: Vec<FailedReplication>,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutput {
    pub summary: ScenarioSummary,
    pub rows: Vec<ReplicationResult>,
}

impl ScenarioOutput {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = vec!["replication".into(), "effects".into()];
        header.extend(COMPONENTS.iter().map(|c| c.to_string()));
        header.extend(
            [
                "true_omega0",
                "true_omega1",
                "true_omega2",
                "true_omega3",
                "ci_lower",
                "ci_upper",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.replication.to_string(), format!("{:?}", r.effects).to_lowercase()];
            for c in COMPONENTS {
                rec.push(r.estimate.component(c)?.to_string());
            }
            match r.truth {
                Some(t) => rec.extend(t.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
            match r.omega0_interval {
                Some((a, b)) => rec.extend([a.to_string(), b.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits every requested variant on one dataset and decomposes.
fn estimate_replication(
    ds: &Dataset,
    config: &SimulationConfig,
    settings: &EstimatorSettings,
    rep: usize,
) -> Vec<(HospitalEffects, Result<(Decomposition, Option<(f64, f64)>)>)> {
    let family = match config.outcome_type {
        OutcomeType::Continuous => Family::GaussianIdentity,
        OutcomeType::Binary => Family::BinomialLogit,
    };
    let covs = ["x1", "x2"];
    let mechanism = match settings.mechanism {
        MechanismChoice::Observed => {
            let mut spec = ModelSpec::new(Family::BinomialLogit, HospitalEffects::Fixed, &covs);
            spec.small_hospital_threshold = settings.small_hospital_threshold;
            fit_assignment(ds, &spec).map(AssignmentMechanism::Observed)
        }
        MechanismChoice::Uniform => Ok(AssignmentMechanism::Uniform),
    };
    settings
        .effects
        .iter()
        .map(|&effects| {
            let run = || -> Result<(Decomposition, Option<(f64, f64)>)> {
                let mechanism = match &mechanism {
                    Ok(m) => m,
                    Err(e) => return Err(Error::Validation(format!("assignment model: {e}"))),
                };
                let out_spec = ModelSpec::new(family, effects, &covs);
                let med_spec = ModelSpec::new(Family::BinomialLogit, effects, &covs);
                let out_fitter = ResponseFitter::new(ds, &out_spec, Role::Outcome)?.without_std_errors();
                let med_fitter = ResponseFitter::new(ds, &med_spec, Role::Mediator)?.without_std_errors();
                let outcome = out_fitter.fit(ds.outcome())?;
                let mediator = med_fitter.fit(ds.mediator())?;
                let dec = decompose(ds, &outcome, &mediator, mechanism)?;
                let interval = match &settings.bootstrap {
                    Some(b) => {
                        let seed = {
                            let mut r = substream(config.seed, &[BOOTSTRAP_STREAM, rep as u64]);
                            r.random::<u64>()
                        };
                        let inputs = PosteriorInputs {
                            dataset: ds,
                            outcome_fitter: &out_fitter,
                            mediator_fitter: &med_fitter,
                            outcome: &outcome,
                            mediator: &mediator,
                            mechanism,
                        };
                        let draws = draw_posterior(&inputs, &PosteriorConfig::new(b.draws, seed))?;
                        Some(credible_interval(&draws, "omega0", b.level)?)
                    }
                    None => None,
                };
                Ok((dec, interval))
            };
            (effects, run())
        })
        .collect()
}

fn summarize_component(name: &str, values: &[f64], truth: Option<f64>) -> ComponentSummary {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mc_se = sd / r.sqrt();
    ComponentSummary {
        component: name.to_string(),
        mean,
        sd,
        q025: crate::uncertainty::quantile_sorted(&sorted, 0.025),
        q975: crate::uncertainty::quantile_sorted(&sorted, 0.975),
        mc_se,
        mean_ci: (mean - 1.96 * mc_se, mean + 1.96 * mc_se),
        truth,
    }
}

/// Replications of generate -> fit -> decompose, summarized per model
/// variant. Failed replications are logged and excluded; more than 5%
/// failures is an error.
pub fn run_scenario(
    config: &SimulationConfig,
    replications: usize,
    settings: &EstimatorSettings,
) -> Result<ScenarioOutput> {
    config.validate()?;
    if replications == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    if settings.effects.is_empty() {
        return Err(Error::Config("no model variants requested".into()));
    }
    let fixed_params = draw_parameters(config, 0);
    let oracle = if settings.redraw_hospital_effects {
        None
    } else {
        Some(oracle_truth(config, &fixed_params, settings.oracle_draws)?)
    };
    info!(
        "scenario n={} q={} sigma={} beta_m={}: {replications} replications",
        config.n, config.q, config.sigma, config.mediator_effect
    );
    let per_rep = map_indexed(replications, |rep| {
        let (params, truth) = if settings.redraw_hospital_effects {
            let p = draw_parameters(config, rep as u64 + 1);
            let t = oracle_with_stream(config, &p, settings.oracle_draws, rep as u64 + 1)
                .map(|o| [o.omega0, o.omega1, o.omega2, o.omega3]);
            (p, Some(t))
        } else {
            (fixed_params.clone(), None)
        };
        let ds = generate_replication(config, &params, rep as u64);
        (ds, truth)
    });
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    // fitting runs in a second pass so datasets and fits pair up by index
    let fits = map_indexed(replications, |rep| match &per_rep[rep].0 {
        Ok(ds) => estimate_replication(ds, config, settings, rep),
        Err(e) => settings
            .effects
            .iter()
            .map(|&eff| (eff, Err(Error::Validation(e.to_string()))))
            .collect(),
    });
    for (rep, variants) in fits.into_iter().enumerate() {
        let truth = match &per_rep[rep].1 {
            Some(Ok(t)) => Some(*t),
            Some(Err(e)) => {
                for &eff in &settings.effects {
                    failed.push(FailedReplication {
                        replication: rep,
                        effects: eff,
                        message: format!("oracle: {e}"),
                    });
                }
                continue;
            }
            None => None,
        };
        for (effects, res) in variants {
            match res {
                Ok((estimate, omega0_interval)) => rows.push(ReplicationResult {
                    replication: rep,
                    effects,
                    estimate,
                    truth,
                    omega0_interval,
                }),
                Err(e) => {
                    warn!("replication {rep} ({effects:?}) failed: {e}");
                    failed.push(FailedReplication {
                        replication: rep,
                        effects,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    let total = replications * settings.effects.len();
    if failed.len() as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::TooManyFailures {
            failed: failed.len(),
            total,
        });
    }
    let variants = settings
        .effects
        .iter()
        .map(|&effects| {
            let mine: Vec<&ReplicationResult> = rows.iter().filter(|r| r.effects == effects).collect();
            let components = COMPONENTS
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let values: Vec<f64> = mine
                        .iter()
                        .map(|r| r.estimate.component(c).unwrap_or(f64::NAN))
                        .collect();
                    let truth = match (&oracle, k < 4) {
                        (Some(o), _) => o.component(c).ok(),
                        (None, true) => {
                            let t: Vec<f64> = mine.iter().filter_map(|r| r.truth.map(|t| t[k])).collect();
                            (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
                        }
                        (None, false) => None,
                    };
                    summarize_component(c, &values, truth)
                })
                .collect();
            let omega0_coverage = settings.bootstrap.as_ref().and_then(|_| {
                let covered: Vec<bool> = mine
                    .iter()
                    .filter_map(|r| {
                        let (lo, hi) = r.omega0_interval?;
                        let t = match (&oracle, r.truth) {
                            (Some(o), _) => o.omega0,
                            (None, Some(t)) => t[0],
                            _ => return None,
                        };
                        Some(lo <= t && t <= hi)
                    })
                    .collect();
                (!covered.is_empty()).then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
            });
            VariantSummary {
                effects,
                replications: mine.len(),
                components,
                omega0_coverage,
            }
        })
        .collect();
    Ok(ScenarioOutput {
        summary: ScenarioSummary {
            config: config.clone(),
            settings: settings.clone(),
            requested: replications,
            oracle,
            variants,
            failed,
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        // [TRIVIAL]
        let cfg = SimulationConfig::new(300, 5, 0.0, 7.0, OutcomeType::Continuous, 11);
        let (a, pa) = generate(&cfg).unwrap();
        let (b, pb) = generate(&cfg).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a.outcome(), b.outcome());
        assert_eq!(a.hospital(), b.hospital());
        let other = SimulationConfig { seed: 12, ..cfg };
        assert_ne!(generate(&other).unwrap().0.outcome(), a.outcome());
    }

    #[test]
    fn invalid_covariance_rejected() {
        // [TRIVIAL]
        let cfg = SimulationConfig::new(100, 5, 4.5, 7.0, OutcomeType::Continuous, 1);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn equal_effects_give_zero_truth() {
        // [TRIVIAL]
        let cfg = SimulationConfig::new(100, 4, 0.0, 7.0, OutcomeType::Continuous, 3);
        let mut p = draw_parameters(&cfg, 0);
        p.alpha = vec![0.3; 4];
        p.beta = vec![-1.0; 4];
        let o = oracle_truth(&cfg, &p, 100_000).unwrap();
        for v in [o.omega0, o.omega1, o.omega2, o.omega3] {
            assert!(v.abs() < 1e-20);
        }
    }

    #[test]
    fn no_mediator_effect_truth_is_all_direct() {
        // [PAPER] no mediator effect leaves only the direct term
        for ot in [OutcomeType::Continuous, OutcomeType::Binary] {
            let cfg = SimulationConfig::new(100, 6, 2.0, 0.0, ot, 5);
            let p = draw_parameters(&cfg, 0);
            let o = oracle_truth(&cfg, &p, 100_000).unwrap();
            assert!(o.omega1.abs() < 1e-20 && o.omega3.abs() < 1e-12);
            assert!((o.omega0 - o.omega2).abs() <= 1e-12 * o.omega0);
        }
    }

    #[test]
    fn mediator_only_truth_is_all_indirect() {
        // [TRIVIAL] mediator-only structure
        let cfg = SimulationConfig::new(100, 6, 0.0, 4.7, OutcomeType::Binary, 8);
        let mut p = draw_parameters(&cfg, 0);
        p.beta = vec![0.5; 6];
        let o = oracle_truth(&cfg, &p, 100_000).unwrap();
        assert!(o.omega2.abs() < 1e-20 && o.omega3.abs() < 1e-12);
        assert!((o.omega0 - o.omega1).abs() <= 1e-10 * o.omega0);
    }
}
