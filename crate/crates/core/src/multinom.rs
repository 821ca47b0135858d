//! Multinomial logistic model for hospital assignment, fitted by
//! Newton–Raphson with step halving.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::RIDGE_PENALTY;
use crate::linalg::{add_ridge, inverse_spd, solve_spd};
use crate::model_spec::ModelSpec;

#[derive(Clone, Debug)]
pub struct AssignmentModel {
    pub hospital_labels: Vec<String>,
    pub covariate_names: Vec<String>,
    pub covariate_index: Vec<usize>,
    /// Intercepts, one per hospital; the baseline (first) is 0.
    pub psi: Vec<f64>,
    /// Slopes, `q x p` row-major; the baseline row and masked rows are 0.
    pub phi: Vec<f64>,
    /// Hospitals with free slopes.
    pub slope_free: Vec<bool>,
    /// Inverse observed information over the free parameters, ordered as
    /// `theta()`.
    pub vcov: DMatrix<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub ridge_stabilized: bool,
}

impl AssignmentModel {
    pub fn q(&self) -> usize {
        self.hospital_labels.len()
    }

    fn p(&self) -> usize {
        self.covariate_index.len()
    }

    /// e(z; x) for every hospital, given a full dataset covariate vector.
    pub fn probs_into(&self, x: &[f64], out: &mut [f64]) {
        let p = self.p();
        for (z, o) in out.iter_mut().enumerate() {
            let mut s = self.psi[z];
            if self.slope_free[z] {
                let row = &self.phi[z * p..(z + 1) * p];
                for (b, &j) in row.iter().zip(&self.covariate_index) {
                    s += b * x[j];
                }
            }
            *o = s;
        }
        softmax_in_place(out);
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q()];
        self.probs_into(x, &mut out);
        out
    }

    pub fn predict_e(&self, label: &str, x: &[f64]) -> Result<f64> {
        let z = self
            .hospital_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownHospital(label.to_string()))?;
        Ok(self.probs(x)[z])
    }

    /// Free parameters: psi_2..psi_q, then the slope rows of slope-free
    /// hospitals in hospital order.
    pub fn theta(&self) -> Vec<f64> {
        let p = self.p();
        let mut t = self.psi[1..].to_vec();
        for z in 1..self.q() {
            if self.slope_free[z] {
                t.extend_from_slice(&self.phi[z * p..(z + 1) * p]);
            }
        }
        t
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.hospital_labels[1..].iter().map(|l| format!("psi[{l}]")).collect();
        for z in 1..self.q() {
            if self.slope_free[z] {
                for c in &self.covariate_names {
                    names.push(format!("phi[{}]:{c}", self.hospital_labels[z]));
                }
            }
        }
        names
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        let expected = self.theta().len();
        if theta.len() != expected {
            return Err(Error::Dimension(format!(
                "assignment parameters: expected {expected}, got {}",
                theta.len()
            )));
        }
        let p = self.p();
        let mut out = self.clone();
        out.psi[1..].copy_from_slice(&theta[..self.q() - 1]);
        let mut pos = self.q() - 1;
        for z in 1..self.q() {
            if self.slope_free[z] {
                out.phi[z * p..(z + 1) * p].copy_from_slice(&theta[pos..pos + p]);
                pos += p;
            }
        }
        Ok(out)
    }
}

pub(crate) fn softmax_in_place(s: &mut [f64]) {
    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in s.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in s.iter_mut() {
        *v /= total;
    }
}

struct Problem<'a> {
    z: &'a [usize],
    /// `(1, x)` per row, row-major with stride `d = 1 + p`.
    u: Vec<f64>,
    n: usize,
    q: usize,
    d: usize,
    slope_free: Vec<bool>,
    /// Offset of each non-baseline hospital's block in theta.
    block_start: Vec<usize>,
    block_len: Vec<usize>,
    dim: usize,
}

impl Problem<'_> {
    fn scores(&self, theta: &[f64], i: usize, out: &mut [f64]) {
        let u = &self.u[i * self.d..(i + 1) * self.d];
        out[0] = 0.0;
        for z in 1..self.q {
            let s = self.block_start[z];
            let mut v = theta[s];
            if self.slope_free[z] {
                for (a, ua) in u[1..].iter().enumerate() {
                    v += theta[s + 1 + a] * ua;
                }
            }
            out[z] = v;
        }
    }

    fn log_likelihood(&self, theta: &[f64], ridge: f64) -> f64 {
        let mut s = vec![0.0; self.q];
        let mut ll = 0.0;
        for i in 0..self.n {
            self.scores(theta, i, &mut s);
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            ll += s[self.z[i]] - lse;
        }
        ll - ridge * theta.iter().map(|t| t * t).sum::<f64>()
    }

    /// Gradient and negative Hessian of the (penalized) log-likelihood.
    fn derivatives(&self, theta: &[f64], ridge: f64) -> (DVector<f64>, DMatrix<f64>) {
        let (q, d) = (self.q, self.d);
        let m = q - 1;
        let mut grad = DVector::zeros(self.dim);
        // blocks[a][b] is the d x d sum of p_a (delta_ab - p_b) u u'
        let mut blocks = vec![0.0; m * m * d * d];
        let mut pr = vec![0.0; q];
        for i in 0..self.n {
            self.scores(theta, i, &mut pr);
            softmax_in_place(&mut pr);
            let u = &self.u[i * d..(i + 1) * d];
            for a in 1..q {
                let r = f64::from(u8::from(self.z[i] == a)) - pr[a];
                let s = self.block_start[a];
                for c in 0..self.block_len[a] {
                    grad[s + c] += r * u[c];
                }
                for b in a..q {
                    let w = pr[a] * (f64::from(u8::from(a == b)) - pr[b]);
                    let base = ((a - 1) * m + (b - 1)) * d * d;
                    for r1 in 0..d {
                        let wr = w * u[r1];
                        for r2 in 0..d {
                            blocks[base + r1 * d + r2] += wr * u[r2];
                        }
                    }
                }
            }
        }
        let mut info = DMatrix::zeros(self.dim, self.dim);
        for a in 1..q {
            for b in a..q {
                let base = ((a - 1) * m + (b - 1)) * d * d;
                let (sa, sb) = (self.block_start[a], self.block_start[b]);
                for r1 in 0..self.block_len[a] {
                    for r2 in 0..self.block_len[b] {
                        let v = blocks[base + r1 * d + r2];
                        info[(sa + r1, sb + r2)] = v;
                        info[(sb + r2, sa + r1)] = v;
                    }
                }
            }
        }
        for (g, t) in grad.iter_mut().zip(theta) {
            *g -= 2.0 * ridge * t;
        }
        add_ridge(&mut info, 2.0 * ridge);
        (grad, info)
    }
}

enum NewtonOutcome {
    Converged {
        theta: Vec<f64>,
        info: DMatrix<f64>,
        iterations: usize,
        ll: f64,
    },
    Failed {
        theta: Vec<f64>,
        iterations: usize,
        ll: f64,
    },
}

fn newton(prob: &Problem, start: Vec<f64>, ridge: f64) -> NewtonOutcome {
    let mut theta = start;
    let mut ll = prob.log_likelihood(&theta, ridge);
    for it in 0..100 {
        let (grad, info) = prob.derivatives(&theta, ridge);
        let gmax = grad.amax();
        if gmax < 1e-9 * (prob.n as f64).max(1.0).sqrt() {
            return NewtonOutcome::Converged {
                theta,
                info,
                iterations: it,
                ll,
            };
        }
        let Some(step) = solve_spd(&info, &grad) else {
            return NewtonOutcome::Failed {
                theta,
                iterations: it,
                ll,
            };
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let cll = prob.log_likelihood(&cand, ridge);
            if cll >= ll - 1e-12 * ll.abs() {
                let small = step.amax() * t < 1e-12;
                theta = cand;
                ll = cll;
                accepted = true;
                if small {
                    let (_, info) = prob.derivatives(&theta, ridge);
                    return NewtonOutcome::Converged {
                        theta,
                        info,
                        iterations: it + 1,
                        ll,
                    };
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent possible along the Newton direction: at the optimum
            // to machine precision if the gradient is small
            let (grad, info) = prob.derivatives(&theta, ridge);
            if grad.amax() < 1e-6 {
                return NewtonOutcome::Converged {
                    theta,
                    info,
                    iterations: it + 1,
                    ll,
                };
            }
            return NewtonOutcome::Failed {
                theta,
                iterations: it + 1,
                ll,
            };
        }
    }
    NewtonOutcome::Failed {
        theta,
        iterations: 100,
        ll,
    }
}

/// Fits e(z; x) on the covariate terms of `spec`. Hospitals with fewer than
/// `spec.small_hospital_threshold` patients get an intercept only; the
/// baseline is the first hospital label.
pub fn fit_assignment(dataset: &Dataset, spec: &ModelSpec) -> Result<AssignmentModel> {
    let q = dataset.q();
    if q < 2 {
        return Err(Error::Validation("q >= 2 required".into()));
    }
    let covariate_index = spec
        .covariate_terms
        .iter()
        .map(|c| dataset.covariate_index(c))
        .collect::<Result<Vec<_>>>()?;
    let p = covariate_index.len();
    let d = 1 + p;
    let counts = dataset.hospital_counts();
    let slope_free: Vec<bool> = (0..q)
        .map(|z| z > 0 && p > 0 && counts[z] >= spec.small_hospital_threshold)
        .collect();
    let mut block_start = vec![0; q];
    let mut block_len = vec![0; q];
    // intercepts first, then slope rows
    for z in 1..q {
        block_start[z] = z - 1;
    }
    let mut pos = q - 1;
    let mut slope_start = vec![usize::MAX; q];
    for z in 1..q {
        if slope_free[z] {
            slope_start[z] = pos;
            pos += p;
        }
    }
    let dim = pos;
    let n = dataset.n();
    let mut u = vec![0.0; n * d];
    for i in 0..n {
        u[i * d] = 1.0;
        let xi = dataset.covariates_of(i);
        for (c, &j) in covariate_index.iter().enumerate() {
            u[i * d + 1 + c] = xi[j];
        }
    }
    // The solver wants contiguous per-hospital blocks; work in a permuted
    // parameter order and map back at the end.
    let mut perm = Vec::with_capacity(dim);
    let mut start = 0;
    for z in 1..q {
        block_start[z] = start;
        block_len[z] = if slope_free[z] { d } else { 1 };
        perm.push(z - 1);
        if slope_free[z] {
            perm.extend(slope_start[z]..slope_start[z] + p);
        }
        start += block_len[z];
    }
    let prob = Problem {
        z: dataset.hospital(),
        u,
        n,
        q,
        d,
        slope_free: slope_free.clone(),
        block_start,
        block_len,
        dim,
    };
    let mut start_theta = vec![0.0; dim];
    for z in 1..q {
        start_theta[prob.block_start[z]] = (counts[z] as f64 / counts[0] as f64).ln();
    }

    let mut ridge_stabilized = false;
    let (theta_b, info, iterations, ll) = match newton(&prob, start_theta.clone(), 0.0) {
        NewtonOutcome::Converged {
            theta,
            info,
            iterations,
            ll,
        } => (theta, info, iterations, ll),
        NewtonOutcome::Failed { .. } => {
            warn!("assignment model: singular or non-convergent Newton fit; refitting with ridge penalty");
            ridge_stabilized = true;
            match newton(&prob, start_theta, RIDGE_PENALTY) {
                NewtonOutcome::Converged {
                    theta,
                    info,
                    iterations,
                    ll,
                } => (theta, info, iterations, ll),
                NewtonOutcome::Failed { theta, iterations, ll } => {
                    return Err(Error::NonConvergence {
                        model: "assignment model".into(),
                        iterations,
                        objective: ll,
                        last_iterate: theta,
                    })
                }
            }
        }
    };
    let vcov_b = inverse_spd(&info).unwrap_or_else(|| {
        warn!("assignment information matrix is singular; covariance unavailable");
        DMatrix::from_element(dim, dim, f64::NAN)
    });
    // back to the public ordering
    let mut theta = vec![0.0; dim];
    let mut vcov = DMatrix::zeros(dim, dim);
    for (bi, &pi) in perm.iter().enumerate() {
        theta[pi] = theta_b[bi];
        for (bj, &pj) in perm.iter().enumerate() {
            vcov[(pi, pj)] = vcov_b[(bi, bj)];
        }
    }
    let mut psi = vec![0.0; q];
    psi[1..].copy_from_slice(&theta[..q - 1]);
    let mut phi = vec![0.0; q * p];
    for z in 1..q {
        if slope_free[z] {
            phi[z * p..(z + 1) * p].copy_from_slice(&theta[slope_start[z]..slope_start[z] + p]);
        }
    }
    Ok(AssignmentModel {
        hospital_labels: dataset.hospital_labels().to_vec(),
        covariate_names: spec.covariate_terms.clone(),
        covariate_index,
        psi,
        phi,
        slope_free,
        vcov,
        log_likelihood: ll,
        iterations,
        converged: true,
        ridge_stabilized,
    })
}

/// Multinomial log-likelihood of an assignment model on a dataset.
pub fn assignment_log_likelihood(model: &AssignmentModel, dataset: &Dataset) -> f64 {
    let mut pr = vec![0.0; model.q()];
    (0..dataset.n())
        .map(|i| {
            model.probs_into(dataset.covariates_of(i), &mut pr);
            pr[dataset.hospital()[i]].ln()
        })
        .sum()
}
