//! Standardized potential outcomes and the between-hospital variance
//! decomposition built on them.
//!
//! For patient `i`, hospital `z` and mediator-reference hospital `z*`,
//! `G[z][z*] = E(Y_{z M_{z*}} | x_i)`. With assignment weights `e_z` the
//! per-patient terms are
//!
//! * `T_z = G[z][z]`, `Tbar = sum_z e_z T_z`
//! * `A_z = sum_{z*} G[z][z*] e_{z*}`
//! * indirect `T_z - A_z`, direct `A_z - Tbar`
//!
//! and each omega is the `(1/n) sum_i` of an `e`-weighted sum of squares.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MediatorKind};
use crate::error::{Error, Result};
use crate::model::ResponseModel;
use crate::model_spec::Family;
use crate::multinom::AssignmentModel;
use crate::par::map_chunks;
use crate::quadrature::GaussHermite;

/// Quadrature nodes for continuous-mediator integrals.
pub const MEDIATOR_NODES: usize = 30;

/// Hypothetical (or observed) hospital assignment probabilities.
#[derive(Clone, Debug)]
pub enum AssignmentMechanism {
    /// Fitted e(z; x).
    Observed(AssignmentModel),
    /// 1/q for every hospital.
    Uniform,
    /// One probability vector per patient, `n x q` row-major.
    Custom { q: usize, weights: Vec<f64> },
}

impl AssignmentMechanism {
    pub fn kind(&self) -> &'static str {
        match self {
            AssignmentMechanism::Observed(_) => "observed",
            AssignmentMechanism::Uniform => "uniform",
            AssignmentMechanism::Custom { .. } => "custom",
        }
    }

    pub fn custom(q: usize, weights: Vec<f64>) -> Result<Self> {
        if q < 2 || weights.len() % q != 0 {
            return Err(Error::Dimension(format!(
                "custom weights: {} values do not form rows of {q}",
                weights.len()
            )));
        }
        for (r, row) in weights.chunks(q).enumerate() {
            if row.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
                return Err(Error::Validation(format!(
                    "custom weights row {}: probabilities must lie in (0, 1]",
                    r + 1
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Validation(format!(
                    "custom weights row {}: probabilities sum to {s}",
                    r + 1
                )));
            }
        }
        Ok(AssignmentMechanism::Custom { q, weights })
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        match self {
            AssignmentMechanism::Observed(m) => {
                if m.hospital_labels != dataset.hospital_labels() {
                    return Err(Error::Dimension(
                        "assignment model hospitals differ from the dataset".into(),
                    ));
                }
            }
            AssignmentMechanism::Uniform => {}
            AssignmentMechanism::Custom { q, weights } => {
                if *q != dataset.q() || weights.len() != q * dataset.n() {
                    return Err(Error::Dimension(format!(
                        "custom mechanism has {} rows of {q}; dataset has {} patients and {} hospitals",
                        weights.len() / q,
                        dataset.n(),
                        dataset.q()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Assignment probabilities for patient `i`.
    pub fn weights_into(&self, dataset: &Dataset, i: usize, out: &mut [f64]) {
        match self {
            AssignmentMechanism::Observed(m) => m.probs_into(dataset.covariates_of(i), out),
            AssignmentMechanism::Uniform => out.fill(1.0 / out.len() as f64),
            AssignmentMechanism::Custom { q, weights } => out.copy_from_slice(&weights[i * q..(i + 1) * q]),
        }
    }
}

/// Reads per-patient assignment probabilities: a header naming every
/// hospital label, then one row per patient in dataset order.
pub fn read_custom_mechanism(path: impl AsRef<Path>, dataset: &Dataset) -> Result<AssignmentMechanism> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let q = dataset.q();
    let cols = dataset
        .hospital_labels()
        .iter()
        .map(|l| {
            headers
                .iter()
                .position(|h| h == l)
                .ok_or_else(|| Error::Config(format!("custom mechanism file lacks column `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut weights = Vec::with_capacity(q * dataset.n());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (z, &c) in cols.iter().enumerate() {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                row: r + 2,
                column: dataset.hospital_labels()[z].clone(),
                message: format!("`{raw}` is not a number"),
            })?;
            weights.push(v);
        }
    }
    let mech = AssignmentMechanism::custom(q, weights)?;
    mech.check(dataset)?;
    Ok(mech)
}

/// Writes a mechanism's per-patient probabilities in the format read by
/// `read_custom_mechanism`. Values round-trip exactly.
pub fn write_mechanism_csv<W: Write>(writer: W, dataset: &Dataset, mechanism: &AssignmentMechanism) -> Result<()> {
    mechanism.check(dataset)?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset.hospital_labels())?;
    let mut e = vec![0.0; dataset.q()];
    for i in 0..dataset.n() {
        mechanism.weights_into(dataset, i, &mut e);
        w.write_record(e.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentages {
    pub omega1: Option<f64>,
    pub omega2: Option<f64>,
    pub omega3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Between-hospital variance.
    pub omega0: f64,
    /// Weighted mean of squared indirect effects.
    pub omega1: f64,
    /// Weighted mean of squared direct effects.
    pub omega2: f64,
    /// Indirect-direct covariance term, `omega0 - omega1 - omega2`.
    pub omega3: f64,
    pub casemix: f64,
    pub residual: f64,
    pub total_variance: f64,
    /// Shares of omega0, in percent; absent when omega0 is 0 (to rounding).
    pub percentages: Percentages,
}

pub const COMPONENTS: [&str; 7] = [
    "omega0",
    "omega1",
    "omega2",
    "omega3",
    "casemix",
    "residual",
    "total_variance",
];

impl Decomposition {
    pub fn from_omegas(omega0: f64, omega1: f64, omega2: f64, casemix: f64, total_variance: f64) -> Self {
        let omega3 = omega0 - omega1 - omega2;
        // rounding noise around an exact zero is not a meaningful share
        let zero = omega0 <= 1e-20 * total_variance || omega0 == 0.0;
        let pct = |v: f64| (!zero).then(|| 100.0 * v / omega0);
        Decomposition {
            omega0,
            omega1,
            omega2,
            omega3,
            casemix,
            residual: total_variance - casemix - omega0,
            total_variance,
            percentages: Percentages {
                omega1: pct(omega1),
                omega2: pct(omega2),
                omega3: pct(omega3),
            },
        }
    }

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

    pub fn omegas(&self) -> [f64; 4] {
        [self.omega0, self.omega1, self.omega2, self.omega3]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HospitalEffectRow {
    pub hospital: String,
    /// Mass-weighted mean over patients of the indirect effect.
    pub indirect: f64,
    /// Mass-weighted mean over patients of the direct effect.
    pub direct: f64,
    /// Mean assignment probability.
    pub mass: f64,
}

/// Per-hospital effects. Each effect is averaged over patients with
/// weights `e(z; x_i)`, so that `sum_z mass_z * effect_z` equals the
/// population mean of `sum_z e_z * effect_z(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerHospitalEffects {
    pub rows: Vec<HospitalEffectRow>,
}

impl PerHospitalEffects {
    pub fn indirect(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.indirect).collect()
    }

    pub fn direct(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.direct).collect()
    }

    pub fn mass(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mass).collect()
    }
}

/// mu(z,1,x) eta(1|z*,x) + mu(z,0,x) eta(0|z*,x) for a binary mediator.
pub fn potential_outcome(
    z: &str,
    z_star: &str,
    x: &[f64],
    outcome: &ResponseModel,
    mediator: &ResponseModel,
) -> Result<f64> {
    let mu1 = outcome.predict_mu(z, 1.0, x)?;
    let mu0 = outcome.predict_mu(z, 0.0, x)?;
    let eta1 = mediator.predict_eta(1, z_star, x)?;
    Ok(mu1 * eta1 + mu0 * (1.0 - eta1))
}

/// Integral of mu(z, m, x) against the Gaussian mediator density under
/// hospital `z*`, by Gauss–Hermite quadrature.
pub fn potential_outcome_continuous(
    z: &str,
    z_star: &str,
    x: &[f64],
    outcome: &ResponseModel,
    mediator: &ResponseModel,
    nodes: usize,
) -> Result<f64> {
    let sd = mediator_sd(mediator)?;
    let mean = mediator.predict_mu(z_star, 0.0, x)?;
    outcome.predict_mu(z, 0.0, x)?;
    let zi = outcome
        .hospital_labels()
        .iter()
        .position(|l| l == z)
        .ok_or_else(|| Error::UnknownHospital(z.to_string()))?;
    let gh = GaussHermite::new(nodes);
    Ok(gh.normal_expectation(mean, sd, |m| outcome.mean(zi, m, x)))
}

fn mediator_sd(mediator: &ResponseModel) -> Result<f64> {
    if mediator.family() != Family::GaussianIdentity {
        return Err(Error::UnsupportedFamily(format!(
            "a continuous mediator needs a gaussian-identity mediator model, got {}",
            mediator.family().name()
        )));
    }
    Ok(mediator.residual_variance().unwrap_or(0.0).max(0.0).sqrt())
}

/// Everything the per-patient loop needs.
struct Engine<'a> {
    dataset: &'a Dataset,
    outcome: &'a ResponseModel,
    mediator: &'a ResponseModel,
    mechanism: &'a AssignmentMechanism,
    q: usize,
    /// Continuous mediator: (sd, quadrature rule when mu is non-linear in m).
    continuous: Option<(f64, Option<GaussHermite>)>,
}

/// Per-patient vectors, reused across patients.
struct Scratch {
    e: Vec<f64>,
    t: Vec<f64>,
    a: Vec<f64>,
    v: Vec<f64>,
    mu0: Vec<f64>,
    slope: Vec<f64>,
    med: Vec<f64>,
    grid: Vec<f64>,
}

impl Scratch {
    fn new(q: usize) -> Self {
        Scratch {
            e: vec![0.0; q],
            t: vec![0.0; q],
            a: vec![0.0; q],
            v: vec![0.0; q],
            mu0: vec![0.0; q],
            slope: vec![0.0; q],
            med: vec![0.0; q],
            grid: vec![0.0; q * q],
        }
    }
}

impl<'a> Engine<'a> {
    fn new(
        dataset: &'a Dataset,
        outcome: &'a ResponseModel,
        mediator: &'a ResponseModel,
        mechanism: &'a AssignmentMechanism,
    ) -> Result<Self> {
        let q = dataset.q();
        for (what, m) in [("outcome", outcome), ("mediator", mediator)] {
            if m.hospital_labels() != dataset.hospital_labels() {
                return Err(Error::Dimension(format!(
                    "{what} model hospitals differ from the dataset"
                )));
            }
        }
        mechanism.check(dataset)?;
        let continuous = match dataset.mediator_kind() {
            MediatorKind::Binary => {
                if mediator.family() != Family::BinomialLogit {
                    return Err(Error::UnsupportedFamily(format!(
                        "a binary mediator needs a binomial-logit mediator model, got {}",
                        mediator.family().name()
                    )));
                }
                None
            }
            MediatorKind::Continuous => {
                let sd = mediator_sd(mediator)?;
                let rule = (!outcome.is_linear_in_mediator()).then(|| GaussHermite::new(MEDIATOR_NODES));
                Some((sd, rule))
            }
        };
        Ok(Engine {
            dataset,
            outcome,
            mediator,
            mechanism,
            q,
            continuous,
        })
    }

    /// Fills `s.grid` (q x q) for patient `i`.
    fn grid(&self, i: usize, s: &mut Scratch) {
        let q = self.q;
        let x = self.dataset.covariates_of(i);
        match &self.continuous {
            Some((sd, Some(gh))) => {
                for zs in 0..q {
                    s.med[zs] = self.mediator.mean(zs, 0.0, x);
                }
                for z in 0..q {
                    for zs in 0..q {
                        s.grid[z * q + zs] = gh.normal_expectation(s.med[zs], *sd, |m| self.outcome.mean(z, m, x));
                    }
                }
            }
            _ => {
                self.fill_linear(x, s);
                for z in 0..q {
                    for zs in 0..q {
                        s.grid[z * q + zs] = s.mu0[z] + s.slope[z] * s.med[zs];
                    }
                }
            }
        }
    }

    /// mu is affine in the mediator: `mu0 + slope * m`, with `med` the
    /// mediator mean (continuous) or P(M = 1) (binary).
    fn fill_linear(&self, x: &[f64], s: &mut Scratch) {
        for z in 0..self.q {
            let m0 = self.outcome.mean(z, 0.0, x);
            let m1 = self.outcome.mean(z, 1.0, x);
            s.mu0[z] = m0;
            s.slope[z] = m1 - m0;
            s.med[z] = self.mediator.mean(z, 0.0, x);
        }
    }

    /// Fills `t`, `a`, `v` and `e` for patient `i`; returns Tbar.
    fn patient(&self, i: usize, s: &mut Scratch) -> f64 {
        let q = self.q;
        let x = self.dataset.covariates_of(i);
        self.mechanism.weights_into(self.dataset, i, &mut s.e);
        let sigma2 = self.outcome.residual_variance().unwrap_or(0.0);
        let binomial_outcome = self.outcome.family() == Family::BinomialLogit;
        match &self.continuous {
            Some((_, Some(_))) => {
                self.grid(i, s);
                for z in 0..q {
                    s.t[z] = s.grid[z * q + z];
                    s.a[z] = (0..q).map(|zs| s.grid[z * q + zs] * s.e[zs]).sum();
                    // only reached for a binomial outcome
                    s.v[z] = s.t[z] * (1.0 - s.t[z]);
                }
            }
            _ => {
                self.fill_linear(x, s);
                let mbar: f64 = s.med.iter().zip(&s.e).map(|(m, e)| m * e).sum();
                let med_var = self.continuous.as_ref().map(|(sd, _)| sd * sd);
                for z in 0..q {
                    s.t[z] = s.mu0[z] + s.slope[z] * s.med[z];
                    s.a[z] = s.mu0[z] + s.slope[z] * mbar;
                    s.v[z] = if binomial_outcome {
                        s.t[z] * (1.0 - s.t[z])
                    } else {
                        let var_m = med_var.unwrap_or(s.med[z] * (1.0 - s.med[z]));
                        sigma2 + s.slope[z] * s.slope[z] * var_m
                    };
                }
            }
        }
        s.t.iter().zip(&s.e).map(|(t, e)| t * e).sum()
    }
}

#[derive(Clone, Default)]
struct ChunkSums {
    omega0: f64,
    omega1: f64,
    omega2: f64,
    /// Per patient: (Tbar, within-patient variance).
    patients: Vec<(f64, f64)>,
    indirect: Vec<f64>,
    direct: Vec<f64>,
    mass: Vec<f64>,
}

fn run(engine: &Engine) -> (Decomposition, PerHospitalEffects) {
    let q = engine.q;
    let n = engine.dataset.n();
    let chunks = map_chunks(n, |range| {
        let mut s = Scratch::new(q);
        let mut c = ChunkSums {
            indirect: vec![0.0; q],
            direct: vec![0.0; q],
            mass: vec![0.0; q],
            ..Default::default()
        };
        for i in range {
            let tbar = engine.patient(i, &mut s);
            let (mut w0, mut w1, mut w2, mut within) = (0.0, 0.0, 0.0, 0.0);
            for z in 0..q {
                let e = s.e[z];
                let nie = s.t[z] - s.a[z];
                let nde = s.a[z] - tbar;
                let dev = s.t[z] - tbar;
                w0 += e * dev * dev;
                w1 += e * nie * nie;
                w2 += e * nde * nde;
                within += e * s.v[z];
                c.indirect[z] += e * nie;
                c.direct[z] += e * nde;
                c.mass[z] += e;
            }
            c.omega0 += w0;
            c.omega1 += w1;
            c.omega2 += w2;
            c.patients.push((tbar, within + w0));
        }
        c
    });
    let nf = n as f64;
    let mut total = ChunkSums {
        indirect: vec![0.0; q],
        direct: vec![0.0; q],
        mass: vec![0.0; q],
        ..Default::default()
    };
    for c in &chunks {
        total.omega0 += c.omega0;
        total.omega1 += c.omega1;
        total.omega2 += c.omega2;
        for z in 0..q {
            total.indirect[z] += c.indirect[z];
            total.direct[z] += c.direct[z];
            total.mass[z] += c.mass[z];
        }
    }
    let mbar = chunks.iter().flat_map(|c| c.patients.iter()).map(|p| p.0).sum::<f64>() / nf;
    let (mut casemix, mut tot) = (0.0, 0.0);
    for &(tbar, within) in chunks.iter().flat_map(|c| c.patients.iter()) {
        let d = (tbar - mbar) * (tbar - mbar);
        casemix += d;
        tot += within + d;
    }
    let dec = Decomposition::from_omegas(
        total.omega0 / nf,
        total.omega1 / nf,
        total.omega2 / nf,
        casemix / nf,
        tot / nf,
    );
    let rows = (0..q)
        .map(|z| HospitalEffectRow {
            hospital: engine.dataset.hospital_labels()[z].clone(),
            indirect: total.indirect[z] / total.mass[z],
            direct: total.direct[z] / total.mass[z],
            mass: total.mass[z] / nf,
        })
        .collect();
    (dec, PerHospitalEffects { rows })
}

pub fn decompose(
    dataset: &Dataset,
    outcome: &ResponseModel,
    mediator: &ResponseModel,
    mechanism: &AssignmentMechanism,
) -> Result<Decomposition> {
    Ok(decompose_with_effects(dataset, outcome, mediator, mechanism)?.0)
}

pub fn hospital_effects(
    dataset: &Dataset,
    outcome: &ResponseModel,
    mediator: &ResponseModel,
    mechanism: &AssignmentMechanism,
) -> Result<PerHospitalEffects> {
    Ok(decompose_with_effects(dataset, outcome, mediator, mechanism)?.1)
}

/// Decomposition and per-hospital effects from a single pass.
pub fn decompose_with_effects(
    dataset: &Dataset,
    outcome: &ResponseModel,
    mediator: &ResponseModel,
    mechanism: &AssignmentMechanism,
) -> Result<(Decomposition, PerHospitalEffects)> {
    let engine = Engine::new(dataset, outcome, mediator, mechanism)?;
    Ok(run(&engine))
}

/// Linear structural model with two equally likely hospitals: hospital
/// effect `b2` on the outcome, mediator effect `b3` on the outcome and
/// hospital effect `b4` on the mediator. Returns omega0..omega3.
pub fn decompose_linear_special_case(b2: f64, b3: f64, b4: f64) -> [f64; 4] {
    let ind = b3 * b4;
    [
        0.25 * (b2 + ind) * (b2 + ind),
        0.25 * ind * ind,
        0.25 * b2 * b2,
        0.5 * b2 * ind,
    ]
}

/// Two-hospital pairwise-contrast form of the decomposition, with
/// `pi = e(second hospital; x)`. Agrees with `decompose`.
pub fn decompose_two_hospital_closed_form(
    dataset: &Dataset,
    outcome: &ResponseModel,
    mediator: &ResponseModel,
    mechanism: &AssignmentMechanism,
) -> Result<Decomposition> {
    if dataset.q() != 2 {
        return Err(Error::Precondition(format!(
            "two-hospital closed form needs q = 2, got {}",
            dataset.q()
        )));
    }
    let engine = Engine::new(dataset, outcome, mediator, mechanism)?;
    let mut s = Scratch::new(2);
    let (mut w0, mut w1, mut w2, mut w3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..dataset.n() {
        engine.grid(i, &mut s);
        engine.mechanism.weights_into(dataset, i, &mut s.e);
        let pi = s.e[1];
        let g = |z: usize, zs: usize| s.grid[z * 2 + zs];
        let (y11, y10, y01, y00) = (g(1, 1), g(1, 0), g(0, 1), g(0, 0));
        let k = pi * (1.0 - pi);
        w0 += k * (y11 - y00) * (y11 - y00);
        w1 += k * ((y11 - y10).powi(2) * (1.0 - pi) + (y01 - y00).powi(2) * pi);
        w2 += k * ((y10 - y00).powi(2) * (1.0 - pi) + (y11 - y01).powi(2) * pi);
        w3 += 2.0 * k * ((y11 - y10) * (y10 - y00) * (1.0 - pi) + (y00 - y01) * (y01 - y11) * pi);
    }
    let nf = dataset.n() as f64;
    let full = run(&engine).0;
    let mut d = Decomposition::from_omegas(w0 / nf, w1 / nf, w2 / nf, full.casemix, full.total_variance);
    // report the closed-form covariance rather than the difference
    d.omega3 = w3 / nf;
    Ok(d)
}

/// Dumps `G[z][z*]` for every patient as CSV (`row,z,z_star,value`).
pub fn write_grid<W: Write>(
    writer: W,
    dataset: &Dataset,
    outcome: &ResponseModel,
    mediator: &ResponseModel,
) -> Result<()> {
    let engine = Engine::new(dataset, outcome, mediator, &AssignmentMechanism::Uniform)?;
    let q = dataset.q();
    let labels = dataset.hospital_labels();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "z", "z_star", "value"])?;
    let mut s = Scratch::new(q);
    for i in 0..dataset.n() {
        engine.grid(i, &mut s);
        for z in 0..q {
            for zs in 0..q {
                w.write_record([
                    (i + 1).to_string(),
                    labels[z].clone(),
                    labels[zs].clone(),
                    s.grid[z * q + zs].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// The `q x q` grid for one patient, row `z`, column `z*`.
pub fn potential_outcome_grid(
    dataset: &Dataset,
    outcome: &ResponseModel,
    mediator: &ResponseModel,
    i: usize,
) -> Result<Vec<f64>> {
    let engine = Engine::new(dataset, outcome, mediator, &AssignmentMechanism::Uniform)?;
    let mut s = Scratch::new(dataset.q());
    engine.grid(i, &mut s);
    Ok(s.grid)
}
