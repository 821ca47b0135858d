//! Random-intercept GLMM fitting by maximum likelihood.
//!
//! Gaussian-identity models are fitted on the exact profiled likelihood in
//! `lambda = tau^2 / sigma^2`. Binomial-logit models integrate each
//! hospital's intercept out by adaptive Gauss–Hermite quadrature and
//! maximize over `(beta, ln tau)` by quasi-Newton.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::{binomial_deviance, coef_table, fit_binomial, CoefRow, GlmCoefficients, IrlsConfig, RowDesign};
use crate::linalg::{collinear_columns, inverse_spd, solve_spd, Gram};
use crate::model_spec::{expit, log1pexp, Family, HospitalEffects, ModelSpec, Role};
use crate::optim::{minimize_bfgs, minimize_brent, BfgsOptions};
use crate::quadrature::GaussHermite;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
pub struct GlmmOptions {
    /// Quadrature nodes per hospital (1 = Laplace).
    pub nodes: usize,
    pub bfgs: BfgsOptions,
    /// Finite-difference standard errors for the binomial family. Costs
    /// roughly `2k^2` likelihood evaluations.
    pub std_errors: bool,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions {
            nodes: 15,
            bfgs: BfgsOptions {
                relative_tolerance: 1e-8,
                ..Default::default()
            },
            std_errors: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FittedGlmm {
    pub family: Family,
    pub role: Role,
    /// Fixed part; `hospital` is all zeros (hospital deviations live in
    /// `modes`).
    pub fixed: GlmCoefficients,
    pub covariate_index: Vec<usize>,
    pub hospital_labels: Vec<String>,
    pub tau2: f64,
    /// Conditional modes of the hospital intercepts.
    pub modes: Vec<f64>,
    pub residual_variance: Option<f64>,
    pub log_likelihood: f64,
    /// Log-likelihood of the model without hospital terms.
    pub pooled_log_likelihood: f64,
    /// `2 (ll - pooled_ll)`, the likelihood-ratio statistic for tau^2 = 0.
    pub lrt: f64,
    /// tau^2 sits on the zero boundary.
    pub boundary: bool,
    pub converged: bool,
    pub iterations: usize,
    /// Marginal log-likelihood after each outer iteration.
    pub trace: Vec<f64>,
    pub table: Vec<CoefRow>,
    pub n: usize,
}

impl FittedGlmm {
    pub fn q(&self) -> usize {
        self.hospital_labels.len()
    }

    pub fn fixed_linear_predictor(&self, m: f64, x: &[f64]) -> f64 {
        let c = &self.fixed;
        let mut eta = c.intercept;
        if let Some(b) = c.mediator {
            eta += b * m;
        }
        for (b, &j) in c.covariates.iter().zip(&self.covariate_index) {
            eta += b * x[j];
        }
        eta
    }

    pub fn linear_predictor(&self, z: usize, m: f64, x: &[f64]) -> f64 {
        self.fixed_linear_predictor(m, x) + self.modes[z]
    }

    pub fn mean(&self, z: usize, m: f64, x: &[f64]) -> f64 {
        self.family.inverse_link(self.linear_predictor(z, m, x))
    }

    pub fn predict_mu(&self, label: &str, m: f64, x: &[f64]) -> Result<f64> {
        Ok(self.mean(self.lookup(label)?, m, x))
    }

    pub fn predict_eta(&self, m: u8, label: &str, x: &[f64]) -> Result<f64> {
        let p1 = self.mean(self.lookup(label)?, 0.0, x);
        Ok(if m == 1 { p1 } else { 1.0 - p1 })
    }

    fn lookup(&self, label: &str) -> Result<usize> {
        self.hospital_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownHospital(label.to_string()))
    }
}

/// Per-hospital sufficient statistics of the design for the Gaussian
/// profiled likelihood.
#[derive(Clone, Debug)]
struct GaussianStats {
    xtx: DMatrix<f64>,
    sizes: Vec<f64>,
    /// Column sums of each hospital's rows.
    sums: Vec<DVector<f64>>,
}

/// Design without hospital columns, rows grouped by hospital.
#[derive(Clone, Debug)]
pub struct GlmmFitter {
    family: Family,
    role: Role,
    has_mediator: bool,
    covariate_index: Vec<usize>,
    hospital_labels: Vec<String>,
    names: Vec<String>,
    /// Row-major, in hospital-sorted order.
    x: Vec<f64>,
    n: usize,
    k: usize,
    /// Dataset row of each sorted row.
    order: Vec<usize>,
    /// Sorted rows `offsets[j]..offsets[j + 1]` belong to hospital j.
    offsets: Vec<usize>,
    gaussian: Option<GaussianStats>,
    gh: GaussHermite,
    options: GlmmOptions,
}

impl GlmmFitter {
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
        let has_mediator = role == Role::Outcome;
        let k = 1 + usize::from(has_mediator) + covariate_index.len();
        let mut names = vec!["(intercept)".to_string()];
        if has_mediator {
            names.push("mediator".into());
        }
        names.extend(spec.covariate_terms.iter().cloned());

        let q = dataset.q();
        let n = dataset.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| dataset.hospital()[i]);
        let mut offsets = vec![0; q + 1];
        for &z in dataset.hospital() {
            offsets[z + 1] += 1;
        }
        for j in 0..q {
            offsets[j + 1] += offsets[j];
        }
        let mut x = vec![0.0; n * k];
        for (r, &i) in order.iter().enumerate() {
            let row = &mut x[r * k..(r + 1) * k];
            row[0] = 1.0;
            let mut pos = 1;
            if has_mediator {
                row[pos] = dataset.mediator()[i];
                pos += 1;
            }
            let xi = dataset.covariates_of(i);
            for (c, &j) in covariate_index.iter().enumerate() {
                row[pos + c] = xi[j];
            }
        }
        let mut gram = Gram::new(k);
        for r in 0..n {
            gram.add(&x[r * k..(r + 1) * k], 1.0);
        }
        let xtx = gram.into_matrix();
        let dropped = collinear_columns(&xtx, 1e-10);
        if !dropped.is_empty() {
            let columns = dropped.iter().map(|&j| names[j].clone()).collect();
            return Err(Error::SingularDesign { columns });
        }
        let gaussian = (spec.family == Family::GaussianIdentity).then(|| {
            let mut sizes = Vec::with_capacity(q);
            let mut sums = Vec::with_capacity(q);
            for j in 0..q {
                let mut s = DVector::zeros(k);
                for r in offsets[j]..offsets[j + 1] {
                    for (a, v) in x[r * k..(r + 1) * k].iter().enumerate() {
                        s[a] += v;
                    }
                }
                sizes.push((offsets[j + 1] - offsets[j]) as f64);
                sums.push(s);
            }
            GaussianStats { xtx, sizes, sums }
        });
        Ok(GlmmFitter {
            family: spec.family,
            role,
            has_mediator,
            covariate_index,
            hospital_labels: dataset.hospital_labels().to_vec(),
            names,
            x,
            n,
            k,
            order,
            offsets,
            gaussian,
            gh: GaussHermite::new(15),
            options: GlmmOptions::default(),
        })
    }

    pub fn with_options(mut self, options: GlmmOptions) -> Self {
        self.gh = GaussHermite::new(options.nodes.max(1));
        self.options = options;
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn q(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.k..(r + 1) * self.k]
    }

    fn design(&self) -> RowDesign<'_> {
        RowDesign {
            x: &self.x,
            n: self.n,
            k: self.k,
        }
    }

    /// Response in hospital-sorted order.
    fn sorted(&self, y: &[f64]) -> Result<Vec<f64>> {
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
        Ok(self.order.iter().map(|&i| y[i]).collect())
    }

    fn model_name(&self) -> String {
        format!("{:?} random-intercept model", self.role)
    }

    pub fn fit(&self, y: &[f64]) -> Result<FittedGlmm> {
        let ys = self.sorted(y)?;
        match self.family {
            Family::GaussianIdentity => self.fit_gaussian(&ys),
            Family::BinomialLogit => self.fit_binomial(&ys, None),
        }
    }

    /// Binomial refit started from a previous solution `(beta, ln tau)`.
    pub fn fit_from(&self, y: &[f64], start: &FittedGlmm) -> Result<FittedGlmm> {
        let ys = self.sorted(y)?;
        match self.family {
            Family::GaussianIdentity => self.fit_gaussian(&ys),
            Family::BinomialLogit => {
                let mut x0 = self.pack_fixed(&start.fixed);
                x0.push(0.5 * start.tau2.max(1e-4).ln());
                self.fit_binomial(&ys, Some(x0))
            }
        }
    }

    fn pack_fixed(&self, c: &GlmCoefficients) -> Vec<f64> {
        let mut v = vec![c.intercept];
        if let Some(b) = c.mediator {
            v.push(b);
        }
        v.extend_from_slice(&c.covariates);
        v
    }

    fn unpack_fixed(&self, beta: &[f64]) -> GlmCoefficients {
        let mut pos = 1;
        let mediator = if self.has_mediator {
            pos += 1;
            Some(beta[1])
        } else {
            None
        };
        GlmCoefficients {
            intercept: beta[0],
            hospital: vec![0.0; self.q()],
            mediator,
            interaction: None,
            covariates: beta[pos..].to_vec(),
        }
    }

    // ---- Gaussian: exact profiled likelihood ------------------------------

    fn fit_gaussian(&self, ys: &[f64]) -> Result<FittedGlmm> {
        let st = self.gaussian.as_ref().expect("gaussian statistics");
        let q = self.q();
        let k = self.k;
        let mut xty = DVector::zeros(k);
        let mut yy = 0.0;
        let mut totals = vec![0.0; q];
        for j in 0..q {
            for r in self.offsets[j]..self.offsets[j + 1] {
                let yr = ys[r];
                totals[j] += yr;
                yy += yr * yr;
                for (a, v) in self.row(r).iter().enumerate() {
                    xty[a] += v * yr;
                }
            }
        }
        let n = self.n as f64;
        // (beta, sigma^2, ll, A) at a given lambda
        let profile = |lambda: f64| -> Option<(DVector<f64>, f64, f64, DMatrix<f64>)> {
            let mut a = st.xtx.clone();
            let mut b = xty.clone();
            let mut yq = yy;
            let mut logdet = 0.0;
            for j in 0..q {
                let nj = st.sizes[j];
                let c = lambda / (1.0 + nj * lambda);
                let s = &st.sums[j];
                a -= c * s * s.transpose();
                b -= (c * totals[j]) * s;
                yq -= c * totals[j] * totals[j];
                logdet += (nj * lambda).ln_1p();
            }
            let beta = solve_spd(&a, &b)?;
            let rss = (yq - b.dot(&beta)).max(0.0);
            let sigma2 = rss / n;
            let ll = -0.5 * (n * (LN_2PI + sigma2.max(1e-300).ln()) + logdet + n);
            Some((beta, sigma2, ll, a))
        };
        let ll_at = |ln_lambda: f64| profile(ln_lambda.exp()).map_or(f64::NEG_INFINITY, |p| p.2);

        let mut trace = Vec::new();
        let mut best = (f64::NEG_INFINITY, -30.0);
        let mut grid = -30.0;
        while grid <= 15.0 {
            let v = ll_at(grid);
            if v > best.0 {
                best = (v, grid);
                trace.push(v);
            }
            grid += 1.0;
        }
        let (ln_lambda, neg) = minimize_brent(|t| -ll_at(t), best.1 - 1.0, best.1 + 1.0, 1e-10);
        let (ln_lambda, ll_hat) = if -neg >= best.0 {
            (ln_lambda, -neg)
        } else {
            (best.1, best.0)
        };
        trace.push(ll_hat);
        let pooled = profile(0.0).ok_or_else(|| Error::SingularDesign {
            columns: self.names.clone(),
        })?;
        let boundary = pooled.2 >= ll_hat - 1e-9;
        let lambda = if boundary { 0.0 } else { ln_lambda.exp() };
        let (beta, sigma2, ll, a) = if boundary {
            pooled.clone()
        } else {
            profile(lambda).ok_or_else(|| Error::NonConvergence {
                model: self.model_name(),
                iterations: trace.len(),
                objective: ll_hat,
                last_iterate: vec![ln_lambda],
            })?
        };
        let modes: Vec<f64> = (0..q)
            .map(|j| {
                let c = lambda / (1.0 + st.sizes[j] * lambda);
                c * (totals[j] - st.sums[j].dot(&beta))
            })
            .collect();
        let vcov = inverse_spd(&a)
            .map(|m| m * sigma2)
            .unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
        let beta: Vec<f64> = beta.iter().copied().collect();
        Ok(self.assemble(
            beta,
            &vcov,
            lambda * sigma2,
            modes,
            Some(sigma2),
            ll,
            pooled.2,
            boundary,
            true,
            trace.len(),
            trace,
        ))
    }

    // ---- Binomial: adaptive Gauss–Hermite ----------------------------------

    /// Conditional mode of hospital `j`'s intercept and the curvature of the
    /// joint log-density there. `eta` holds the fixed linear predictor.
    fn binomial_mode(&self, j: usize, eta: &[f64], ys: &[f64], tau2: f64) -> (f64, f64) {
        let rows = self.offsets[j]..self.offsets[j + 1];
        let mut b = 0.0;
        let mut d2 = -1.0 / tau2;
        for _ in 0..60 {
            let mut d1 = -b / tau2;
            d2 = -1.0 / tau2;
            for r in rows.clone() {
                let p = expit(eta[r] + b);
                d1 += ys[r] - p;
                d2 -= p * (1.0 - p);
            }
            let step = (-d1 / d2).clamp(-5.0, 5.0);
            b += step;
            if step.abs() < 1e-10 * (1.0 + b.abs()) {
                break;
            }
        }
        (b, d2)
    }

    fn binomial_cluster_loglik(&self, j: usize, eta: &[f64], ys: &[f64], tau2: f64) -> f64 {
        let rows = self.offsets[j]..self.offsets[j + 1];
        let joint = |b: f64| -> f64 {
            let mut s = -0.5 * b * b / tau2;
            for r in rows.clone() {
                let e = eta[r] + b;
                s += ys[r] * e - log1pexp(e);
            }
            s
        };
        let (mode, d2) = self.binomial_mode(j, eta, ys, tau2);
        let sd = (-1.0 / d2).sqrt();
        let scale = std::f64::consts::SQRT_2 * sd;
        let terms: Vec<f64> = self
            .gh
            .nodes
            .iter()
            .zip(&self.gh.weights)
            .map(|(t, w)| w.ln() + t * t + joint(mode + scale * t))
            .collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + terms.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        scale.ln() + lse - 0.5 * (LN_2PI + tau2.ln())
    }

    fn binomial_marginal(&self, params: &[f64], ys: &[f64]) -> f64 {
        let k = self.k;
        let eta = self.design().eta(&params[..k]);
        let tau2 = (2.0 * params[k]).exp();
        (0..self.q())
            .map(|j| self.binomial_cluster_loglik(j, &eta, ys, tau2))
            .sum()
    }

    fn fit_binomial(&self, ys: &[f64], start: Option<Vec<f64>>) -> Result<FittedGlmm> {
        let k = self.k;
        let q = self.q();
        let model = self.model_name();
        let pooled = fit_binomial(&self.design(), ys, &IrlsConfig::default(), &format!("{model} (pooled)"))?;
        let pooled_ll = -0.5 * binomial_deviance(&self.design().eta(&pooled.theta), ys);

        let x0 = match start {
            Some(x0) => x0,
            None => {
                // one Newton step per hospital from the pooled fit gives a
                // rough spread of hospital intercepts
                let eta = self.design().eta(&pooled.theta);
                let steps: Vec<f64> = (0..q)
                    .map(|j| {
                        let (mut num, mut den) = (0.0, 1e-3);
                        for r in self.offsets[j]..self.offsets[j + 1] {
                            let p = expit(eta[r]);
                            num += ys[r] - p;
                            den += p * (1.0 - p);
                        }
                        (num / den).clamp(-5.0, 5.0)
                    })
                    .collect();
                let mean = steps.iter().sum::<f64>() / q as f64;
                let var = steps.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / q as f64;
                let mut x0 = pooled.theta.clone();
                x0.push(0.5 * var.clamp(0.0025, 9.0).ln());
                x0
            }
        };
        let objective = |p: &[f64]| {
            let mut p = p.to_vec();
            p[k] = p[k].clamp(-12.0, 4.0);
            -self.binomial_marginal(&p, ys)
        };
        let res = minimize_bfgs(objective, &x0, &self.options.bfgs);
        if !res.converged {
            return Err(Error::NonConvergence {
                model,
                iterations: res.iterations,
                objective: -res.value,
                last_iterate: res.x,
            });
        }
        debug!("binomial GLMM converged in {} iterations", res.iterations);
        let trace: Vec<f64> = res.trace.iter().map(|v| -v).collect();
        let ll = -res.value;
        let ln_tau = res.x[k].clamp(-12.0, 4.0);
        let boundary = pooled_ll >= ll - 1e-6 || ln_tau <= -6.0;
        if boundary {
            return Ok(self.assemble(
                pooled.theta.clone(),
                &pooled.vcov,
                0.0,
                vec![0.0; q],
                None,
                pooled_ll,
                pooled_ll,
                true,
                true,
                res.iterations,
                trace,
            ));
        }
        let beta = res.x[..k].to_vec();
        let tau2 = (2.0 * ln_tau).exp();
        let eta = self.design().eta(&beta);
        let modes: Vec<f64> = (0..q).map(|j| self.binomial_mode(j, &eta, ys, tau2).0).collect();
        let vcov = if self.options.std_errors {
            let mut p = res.x.clone();
            p[k] = ln_tau;
            self.fd_covariance(&p, ys)
        } else {
            DMatrix::from_element(k, k, f64::NAN)
        };
        Ok(self.assemble(
            beta,
            &vcov,
            tau2,
            modes,
            None,
            ll,
            pooled_ll,
            false,
            true,
            res.iterations,
            trace,
        ))
    }

    /// Inverse of the finite-difference observed information, fixed block.
    fn fd_covariance(&self, params: &[f64], ys: &[f64]) -> DMatrix<f64> {
        let d = params.len();
        let f = |p: &[f64]| -self.binomial_marginal(p, ys);
        let h: Vec<f64> = params.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
        let f0 = f(params);
        let mut hess = DMatrix::zeros(d, d);
        let mut p = params.to_vec();
        for a in 0..d {
            p[a] = params[a] + h[a];
            let fp = f(&p);
            p[a] = params[a] - h[a];
            let fm = f(&p);
            p[a] = params[a];
            hess[(a, a)] = (fp - 2.0 * f0 + fm) / (h[a] * h[a]);
            for b in 0..a {
                let mut eval = |sa: f64, sb: f64| {
                    p[a] = params[a] + sa * h[a];
                    p[b] = params[b] + sb * h[b];
                    let v = f(&p);
                    p[a] = params[a];
                    p[b] = params[b];
                    v
                };
                let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h[a] * h[b]);
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
        let k = self.k;
        match inverse_spd(&hess) {
            Some(inv) => inv.view((0, 0), (k, k)).into_owned(),
            None => {
                warn!("observed information is not positive definite; standard errors unavailable");
                DMatrix::from_element(k, k, f64::NAN)
            }
        }
    }

    /// Marginal log-likelihood by adaptive Gauss–Hermite quadrature with
    /// the configured node count, for any family. `sigma` is the residual
    /// sd (Gaussian only). Rows of `y` are in dataset order.
    pub fn quadrature_log_likelihood(&self, beta: &[f64], tau: f64, sigma: Option<f64>, y: &[f64]) -> Result<f64> {
        let ys = self.sorted(y)?;
        match self.family {
            Family::BinomialLogit => {
                let mut p = beta.to_vec();
                p.push(tau.ln());
                Ok(self.binomial_marginal(&p, &ys))
            }
            Family::GaussianIdentity => {
                let sigma = sigma.ok_or_else(|| Error::Config("gaussian likelihood needs sigma".into()))?;
                let s2 = sigma * sigma;
                let tau2 = tau * tau;
                let eta = self.design().eta(beta);
                let mut total = 0.0;
                for j in 0..self.q() {
                    let rows = self.offsets[j]..self.offsets[j + 1];
                    let joint = |b: f64| -> f64 {
                        let mut s = -0.5 * b * b / tau2;
                        for r in rows.clone() {
                            s -= 0.5 * ((ys[r] - eta[r] - b).powi(2) / s2 + LN_2PI + s2.ln());
                        }
                        s
                    };
                    let nj = rows.len() as f64;
                    let prec = nj / s2 + 1.0 / tau2;
                    let resid: f64 = rows.clone().map(|r| ys[r] - eta[r]).sum();
                    let mode = resid / s2 / prec;
                    let scale = std::f64::consts::SQRT_2 / prec.sqrt();
                    let terms: Vec<f64> = self
                        .gh
                        .nodes
                        .iter()
                        .zip(&self.gh.weights)
                        .map(|(t, w)| w.ln() + t * t + joint(mode + scale * t))
                        .collect();
                    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + terms.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    total += scale.ln() + lse - 0.5 * (LN_2PI + tau2.ln());
                }
                Ok(total)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        beta: Vec<f64>,
        vcov: &DMatrix<f64>,
        tau2: f64,
        modes: Vec<f64>,
        residual_variance: Option<f64>,
        log_likelihood: f64,
        pooled_log_likelihood: f64,
        boundary: bool,
        converged: bool,
        iterations: usize,
        trace: Vec<f64>,
    ) -> FittedGlmm {
        FittedGlmm {
            family: self.family,
            role: self.role,
            table: coef_table(&self.names, &beta, vcov),
            fixed: self.unpack_fixed(&beta),
            covariate_index: self.covariate_index.clone(),
            hospital_labels: self.hospital_labels.clone(),
            tau2,
            modes,
            residual_variance,
            log_likelihood,
            pooled_log_likelihood,
            lrt: (2.0 * (log_likelihood - pooled_log_likelihood)).max(0.0),
            boundary,
            converged,
            iterations,
            trace,
            n: self.n,
        }
    }
}

pub fn fit_glmm(dataset: &Dataset, spec: &ModelSpec, role: Role) -> Result<FittedGlmm> {
    if spec.hospital_effects != HospitalEffects::Random {
        return Err(Error::Config("fit_glmm needs random hospital effects".into()));
    }
    let fitter = GlmmFitter::new(dataset, spec, role)?;
    let y = match role {
        Role::Outcome => dataset.outcome(),
        _ => dataset.mediator(),
    };
    fitter.fit(y)
}
