//! Fixed-effects GLM fitting (Gaussian-identity and binomial-logit) by
//! iteratively reweighted least squares.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{add_ridge, collinear_columns, inverse_spd, solve_spd, Gram};
use crate::model_spec::{expit, log1pexp, Family, HospitalEffects, ModelSpec, Role};

/// Ridge penalty (on the log-likelihood scale, `lambda * |theta|^2`) used
/// when a fit separates or its information matrix is singular.
pub const RIDGE_PENALTY: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct IrlsConfig {
    pub max_iterations: usize,
    /// Relative deviance change.
    pub tolerance: f64,
    /// Largest coefficient change accepted at convergence.
    pub step_tolerance: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            max_iterations: 100,
            tolerance: 1e-8,
            step_tolerance: 1e-7,
        }
    }
}

/// Structured view of a fixed-effects coefficient vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmCoefficients {
    pub intercept: f64,
    /// One entry per hospital; the reference hospital is exactly 0.
    pub hospital: Vec<f64>,
    /// Mediator coefficient (outcome model only).
    pub mediator: Option<f64>,
    /// Hospital x mediator interaction, one entry per hospital, reference 0.
    pub interaction: Option<Vec<f64>>,
    pub covariates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
}

#[derive(Clone, Debug)]
pub struct FittedGlm {
    pub family: Family,
    pub role: Role,
    pub coefficients: GlmCoefficients,
    /// Indices into the dataset covariate vector, aligned with
    /// `coefficients.covariates`.
    pub covariate_index: Vec<usize>,
    pub hospital_labels: Vec<String>,
    /// Residual variance (Gaussian family; `RSS / (n - k)`).
    pub residual_variance: Option<f64>,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the ridge fallback was needed.
    pub ridge_stabilized: bool,
    pub deviance_trace: Vec<f64>,
    pub table: Vec<CoefRow>,
    pub n: usize,
}

impl FittedGlm {
    /// Builds a model from known coefficients (no fitting).
    pub fn from_coefficients(
        family: Family,
        role: Role,
        coefficients: GlmCoefficients,
        covariate_index: Vec<usize>,
        hospital_labels: Vec<String>,
        residual_variance: Option<f64>,
    ) -> Result<Self> {
        let q = hospital_labels.len();
        if coefficients.hospital.len() != q {
            return Err(Error::Dimension("hospital coefficients must have length q".into()));
        }
        if coefficients.hospital[0] != 0.0 {
            return Err(Error::Validation("reference hospital coefficient must be 0".into()));
        }
        if let Some(int) = &coefficients.interaction {
            if int.len() != q || int[0] != 0.0 {
                return Err(Error::Validation("interaction needs length q with reference 0".into()));
            }
        }
        if coefficients.covariates.len() != covariate_index.len() {
            return Err(Error::Dimension("covariate coefficient/index mismatch".into()));
        }
        Ok(FittedGlm {
            family,
            role,
            coefficients,
            covariate_index,
            hospital_labels,
            residual_variance,
            deviance: f64::NAN,
            log_likelihood: f64::NAN,
            converged: true,
            iterations: 0,
            ridge_stabilized: false,
            deviance_trace: Vec::new(),
            table: Vec::new(),
            n: 0,
        })
    }

    pub fn q(&self) -> usize {
        self.hospital_labels.len()
    }

    /// Linear predictor at hospital index `z`, mediator value `m` (ignored by
    /// mediator models) and full dataset covariate vector `x`.
    pub fn linear_predictor(&self, z: usize, m: f64, x: &[f64]) -> f64 {
        let c = &self.coefficients;
        let mut eta = c.intercept + c.hospital[z];
        if let Some(b) = c.mediator {
            eta += b * m;
        }
        if let Some(int) = &c.interaction {
            eta += int[z] * m;
        }
        for (b, &j) in c.covariates.iter().zip(&self.covariate_index) {
            eta += b * x[j];
        }
        eta
    }

    pub fn mean(&self, z: usize, m: f64, x: &[f64]) -> f64 {
        self.family.inverse_link(self.linear_predictor(z, m, x))
    }

    /// Expected outcome mu(z, m, x) addressed by hospital label.
    pub fn predict_mu(&self, label: &str, m: f64, x: &[f64]) -> Result<f64> {
        let z = self.lookup(label)?;
        Ok(self.mean(z, m, x))
    }

    /// P(M = m | z, x) for a binary-mediator model addressed by label.
    pub fn predict_eta(&self, m: u8, label: &str, x: &[f64]) -> Result<f64> {
        let z = self.lookup(label)?;
        let p1 = self.mean(z, 0.0, x);
        Ok(if m == 1 { p1 } else { 1.0 - p1 })
    }

    fn lookup(&self, label: &str) -> Result<usize> {
        self.hospital_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownHospital(label.to_string()))
    }

    /// Copy with the structured coefficients replaced.
    pub fn with_coefficients(&self, coefficients: GlmCoefficients) -> Self {
        FittedGlm {
            coefficients,
            ..self.clone()
        }
    }
}

/// Column layout of a fixed-effects design.
#[derive(Clone, Debug)]
struct Layout {
    q: usize,
    has_mediator: bool,
    interaction: bool,
    covariate_index: Vec<usize>,
}

impl Layout {
    fn k(&self) -> usize {
        1 + (self.q - 1)
            + usize::from(self.has_mediator)
            + if self.interaction { self.q - 1 } else { 0 }
            + self.covariate_index.len()
    }

    fn unpack(&self, theta: &[f64]) -> GlmCoefficients {
        let q = self.q;
        let mut pos = 0;
        let intercept = theta[pos];
        pos += 1;
        let mut hospital = vec![0.0; q];
        hospital[1..q].copy_from_slice(&theta[pos..pos + q - 1]);
        pos += q - 1;
        let mediator = if self.has_mediator {
            pos += 1;
            Some(theta[pos - 1])
        } else {
            None
        };
        let interaction = if self.interaction {
            let mut v = vec![0.0; q];
            v[1..q].copy_from_slice(&theta[pos..pos + q - 1]);
            pos += q - 1;
            Some(v)
        } else {
            None
        };
        let covariates = theta[pos..pos + self.covariate_index.len()].to_vec();
        GlmCoefficients {
            intercept,
            hospital,
            mediator,
            interaction,
            covariates,
        }
    }
}

/// A design matrix with a reusable solver, so that parametric-bootstrap
/// refits only pay for the response-dependent work.
#[derive(Clone, Debug)]
pub struct GlmFitter {
    family: Family,
    role: Role,
    layout: Layout,
    x: Vec<f64>,
    n: usize,
    k: usize,
    names: Vec<String>,
    hospital_labels: Vec<String>,
    /// `(X'X)^-1`, Gaussian family only.
    gaussian_inverse: Option<DMatrix<f64>>,
    config: IrlsConfig,
}

impl GlmFitter {
    pub fn new(dataset: &Dataset, spec: &ModelSpec, role: Role) -> Result<Self> {
        spec.validate(role)?;
        if role == Role::Assignment {
            return Err(Error::Config("use fit_assignment for the assignment model".into()));
        }
        let covariate_index = spec
            .covariate_terms
            .iter()
            .map(|c| dataset.covariate_index(c))
            .collect::<Result<Vec<_>>>()?;
        let q = dataset.q();
        let layout = Layout {
            q,
            has_mediator: role == Role::Outcome,
            interaction: spec.interaction,
            covariate_index,
        };
        let k = layout.k();
        let labels = dataset.hospital_labels();
        let mut names = vec!["(intercept)".to_string()];
        names.extend(labels[1..].iter().map(|l| format!("hospital[{l}]")));
        if layout.has_mediator {
            names.push("mediator".into());
        }
        if layout.interaction {
            names.extend(labels[1..].iter().map(|l| format!("hospital[{l}]:mediator")));
        }
        names.extend(spec.covariate_terms.iter().cloned());

        let n = dataset.n();
        let mut x = vec![0.0; n * k];
        for i in 0..n {
            let row = &mut x[i * k..(i + 1) * k];
            let z = dataset.hospital()[i];
            let m = dataset.mediator()[i];
            let xi = dataset.covariates_of(i);
            let mut pos = 0;
            row[pos] = 1.0;
            pos += 1;
            if z > 0 {
                row[pos + z - 1] = 1.0;
            }
            pos += q - 1;
            if layout.has_mediator {
                row[pos] = m;
                pos += 1;
            }
            if layout.interaction {
                if z > 0 {
                    row[pos + z - 1] = m;
                }
                pos += q - 1;
            }
            for (c, &j) in layout.covariate_index.iter().enumerate() {
                row[pos + c] = xi[j];
            }
        }

        let mut gram = Gram::new(k);
        for i in 0..n {
            gram.add(&x[i * k..(i + 1) * k], 1.0);
        }
        let xtx = gram.into_matrix();
        let dropped = collinear_columns(&xtx, 1e-10);
        if !dropped.is_empty() {
            let columns = dropped.iter().map(|&j| names[j].clone()).collect();
            return Err(Error::SingularDesign { columns });
        }
        let gaussian_inverse = match spec.family {
            Family::GaussianIdentity => {
                Some(inverse_spd(&xtx).ok_or_else(|| Error::SingularDesign { columns: names.clone() })?)
            }
            Family::BinomialLogit => None,
        };
        Ok(GlmFitter {
            family: spec.family,
            role,
            layout,
            x,
            n,
            k,
            names,
            hospital_labels: labels.to_vec(),
            gaussian_inverse,
            config: IrlsConfig::default(),
        })
    }

    pub fn with_config(mut self, config: IrlsConfig) -> Self {
        self.config = config;
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.k
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    fn eta(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Unpenalized log-likelihood. For the Gaussian family the residual
    /// variance is profiled out at its ML value.
    pub fn log_likelihood(&self, theta: &[f64], y: &[f64]) -> f64 {
        let eta = self.eta(theta);
        match self.family {
            Family::GaussianIdentity => {
                let rss: f64 = y.iter().zip(&eta).map(|(a, b)| (a - b).powi(2)).sum();
                let n = self.n as f64;
                -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0)
            }
            Family::BinomialLogit => y.iter().zip(&eta).map(|(&yi, &e)| yi * e - log1pexp(e)).sum(),
        }
    }

    /// Gradient of `log_likelihood`.
    pub fn score(&self, theta: &[f64], y: &[f64]) -> Vec<f64> {
        let eta = self.eta(theta);
        let mut g = vec![0.0; self.k];
        let scale = match self.family {
            Family::GaussianIdentity => {
                let rss: f64 = y.iter().zip(&eta).map(|(a, b)| (a - b).powi(2)).sum();
                self.n as f64 / rss
            }
            Family::BinomialLogit => 1.0,
        };
        for i in 0..self.n {
            let r = y[i] - self.family.inverse_link(eta[i]);
            for (gj, xj) in g.iter_mut().zip(self.row(i)) {
                *gj += scale * r * xj;
            }
        }
        g
    }

    fn check_response(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n {
            return Err(Error::Dimension(format!(
                "response has {} values, design has {} rows",
                y.len(),
                self.n
            )));
        }
        if self.family == Family::BinomialLogit && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("binomial response must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn fit(&self, y: &[f64]) -> Result<FittedGlm> {
        self.check_response(y)?;
        match self.family {
            Family::GaussianIdentity => Ok(self.fit_gaussian(y)),
            Family::BinomialLogit => {
                let design = RowDesign {
                    x: &self.x,
                    n: self.n,
                    k: self.k,
                };
                let fit = fit_binomial(&design, y, &self.config, &format!("{:?} model", self.role))?;
                Ok(self.assemble(
                    fit.theta,
                    &fit.vcov,
                    fit.deviance,
                    -0.5 * fit.deviance,
                    None,
                    fit.iterations,
                    fit.ridge,
                    fit.trace,
                ))
            }
        }
    }

    fn fit_gaussian(&self, y: &[f64]) -> FittedGlm {
        let inv = self.gaussian_inverse.as_ref().expect("gaussian factorization");
        let mut xty = DVector::zeros(self.k);
        for i in 0..self.n {
            for (a, xa) in self.row(i).iter().enumerate() {
                xty[a] += xa * y[i];
            }
        }
        let theta = inv * xty;
        let theta: Vec<f64> = theta.iter().copied().collect();
        let eta = self.eta(&theta);
        let rss: f64 = y.iter().zip(&eta).map(|(a, b)| (a - b).powi(2)).sum();
        let n = self.n as f64;
        // an exactly determined fit has no residual degrees of freedom
        let sigma2 = rss / ((self.n - self.k).max(1) as f64);
        let vcov = inv * sigma2;
        let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0);
        self.assemble(theta, &vcov, rss, loglik, Some(sigma2), 1, false, vec![rss])
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        theta: Vec<f64>,
        vcov: &DMatrix<f64>,
        deviance: f64,
        log_likelihood: f64,
        residual_variance: Option<f64>,
        iterations: usize,
        ridge_stabilized: bool,
        deviance_trace: Vec<f64>,
    ) -> FittedGlm {
        FittedGlm {
            family: self.family,
            role: self.role,
            coefficients: self.layout.unpack(&theta),
            covariate_index: self.layout.covariate_index.clone(),
            hospital_labels: self.hospital_labels.clone(),
            residual_variance,
            deviance,
            log_likelihood,
            converged: true,
            iterations,
            ridge_stabilized,
            deviance_trace,
            table: coef_table(&self.names, &theta, vcov),
            n: self.n,
        }
    }

    /// Flattens structured coefficients back into design order.
    pub fn pack(&self, c: &GlmCoefficients) -> Vec<f64> {
        let mut theta = vec![c.intercept];
        theta.extend_from_slice(&c.hospital[1..]);
        if let Some(b) = c.mediator {
            theta.push(b);
        }
        if let Some(int) = &c.interaction {
            theta.extend_from_slice(&int[1..]);
        }
        theta.extend_from_slice(&c.covariates);
        theta
    }
}

pub(crate) fn coef_table(names: &[String], theta: &[f64], vcov: &DMatrix<f64>) -> Vec<CoefRow> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = vcov[(j, j)].max(0.0).sqrt();
            CoefRow {
                name: name.clone(),
                estimate: theta[j],
                std_error: se,
                statistic: theta[j] / se,
            }
        })
        .collect()
}

/// Borrowed row-major design matrix.
pub(crate) struct RowDesign<'a> {
    pub x: &'a [f64],
    pub n: usize,
    pub k: usize,
}

impl RowDesign<'_> {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    pub fn eta(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub(crate) fn binomial_deviance(eta: &[f64], y: &[f64]) -> f64 {
    -2.0 * y.iter().zip(eta).map(|(&yi, &e)| yi * e - log1pexp(e)).sum::<f64>()
}

pub(crate) struct BinomialFit {
    pub theta: Vec<f64>,
    pub deviance: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub vcov: DMatrix<f64>,
    pub ridge: bool,
}

enum IrlsOutcome {
    Converged(BinomialFit),
    Separated,
    Stalled,
}

/// Logistic regression by IRLS with step halving; falls back to a ridge
/// penalized fit on separation or stalling.
pub(crate) fn fit_binomial(design: &RowDesign, y: &[f64], cfg: &IrlsConfig, model: &str) -> Result<BinomialFit> {
    match irls_binomial(design, y, 0.0, cfg, model)? {
        IrlsOutcome::Converged(fit) => Ok(fit),
        IrlsOutcome::Separated | IrlsOutcome::Stalled => {
            warn!("{model}: separated or stalled binomial fit; refitting with ridge penalty");
            match irls_binomial(design, y, RIDGE_PENALTY, cfg, model)? {
                IrlsOutcome::Converged(fit) => Ok(fit),
                _ => Err(Error::NonConvergence {
                    model: format!("{model} (ridge)"),
                    iterations: cfg.max_iterations,
                    objective: f64::NAN,
                    last_iterate: Vec::new(),
                }),
            }
        }
    }
}

fn irls_binomial(design: &RowDesign, y: &[f64], ridge: f64, cfg: &IrlsConfig, model: &str) -> Result<IrlsOutcome> {
    let k = design.k;
    let n = design.n;
    let penalized = |theta: &[f64], eta: &[f64]| -> f64 {
        binomial_deviance(eta, y) + 2.0 * ridge * theta.iter().map(|t| t * t).sum::<f64>()
    };

    // start from the usual (y + 1/2) / 2 fitted values
    let mut eta: Vec<f64> = y
        .iter()
        .map(|&yi| {
            let mu = (yi + 0.5) / 2.0;
            (mu / (1.0 - mu)).ln()
        })
        .collect();
    let mut theta = vec![0.0; k];
    let mut trace = Vec::new();
    let mut dev_old = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        let mut gram = Gram::new(k);
        let mut rhs = DVector::zeros(k);
        for i in 0..n {
            let mu = expit(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-12);
            let zi = eta[i] + (y[i] - mu) / w;
            let row = design.row(i);
            gram.add(row, w);
            let wz = w * zi;
            for (a, xa) in row.iter().enumerate() {
                rhs[a] += xa * wz;
            }
        }
        let mut info = gram.into_matrix();
        add_ridge(&mut info, 2.0 * ridge);
        let Some(sol) = solve_spd(&info, &rhs) else {
            if ridge > 0.0 {
                return Err(Error::SingularDesign {
                    columns: vec![format!("{model} information matrix")],
                });
            }
            return Ok(IrlsOutcome::Separated);
        };
        let mut candidate: Vec<f64> = sol.iter().copied().collect();
        let mut cand_eta = design.eta(&candidate);
        let mut dev_new = penalized(&candidate, &cand_eta);
        if it > 0 {
            let mut halvings = 0;
            while !(dev_new <= dev_old * (1.0 + 1e-12)) && halvings < 40 {
                for (c, t) in candidate.iter_mut().zip(&theta) {
                    *c = 0.5 * (*c + t);
                }
                cand_eta = design.eta(&candidate);
                dev_new = penalized(&candidate, &cand_eta);
                halvings += 1;
            }
            if !(dev_new <= dev_old * (1.0 + 1e-12)) {
                candidate = theta.clone();
                cand_eta = eta.clone();
                dev_new = dev_old;
            }
        }
        let step = candidate
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        theta = candidate;
        eta = cand_eta;
        trace.push(dev_new);
        let rel = (dev_old - dev_new).abs() / (dev_new.abs() + 0.1);
        if it > 0 && rel < cfg.tolerance {
            if step < cfg.step_tolerance {
                converged = true;
                break;
            }
            if ridge == 0.0 && eta.iter().any(|e| e.abs() > 15.0) {
                return Ok(IrlsOutcome::Separated);
            }
        }
        dev_old = dev_new;
    }
    if !converged {
        if ridge == 0.0 {
            return Ok(IrlsOutcome::Stalled);
        }
        return Err(Error::NonConvergence {
            model: model.to_string(),
            iterations,
            objective: dev_old,
            last_iterate: theta,
        });
    }
    let mut gram = Gram::new(k);
    for i in 0..n {
        let mu = expit(eta[i]);
        gram.add(design.row(i), (mu * (1.0 - mu)).max(1e-300));
    }
    let mut info = gram.into_matrix();
    add_ridge(&mut info, 2.0 * ridge);
    let vcov = inverse_spd(&info).unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
    Ok(IrlsOutcome::Converged(BinomialFit {
        deviance: binomial_deviance(&eta, y),
        theta,
        trace,
        iterations,
        vcov,
        ridge: ridge > 0.0,
    }))
}

/// Fits an outcome (`Role::Outcome`, response Y) or mediator
/// (`Role::Mediator`, response M) model with fixed hospital effects.
pub fn fit_glm(dataset: &Dataset, spec: &ModelSpec, role: Role) -> Result<FittedGlm> {
    if spec.hospital_effects != HospitalEffects::Fixed {
        return Err(Error::Config("fit_glm needs fixed hospital effects".into()));
    }
    let fitter = GlmFitter::new(dataset, spec, role)?;
    let y = match role {
        Role::Outcome => dataset.outcome(),
        _ => dataset.mediator(),
    };
    fitter.fit(y)
}
