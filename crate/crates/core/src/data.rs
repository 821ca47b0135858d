//! Patient-level dataset, CSV ingestion and per-hospital summaries.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the mediator column is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediatorKind {
    Binary,
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub outcome: f64,
    pub mediator: f64,
    pub hospital: String,
    pub covariates: Vec<f64>,
}

/// An immutable, validated collection of patients.
///
/// Storage is columnar; hospitals are referred to internally by their index
/// into `hospital_labels` (0-based, the first label is the reference level).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    hospital_labels: Vec<String>,
    covariate_names: Vec<String>,
    mediator_kind: MediatorKind,
    outcome: Vec<f64>,
    mediator: Vec<f64>,
    hospital: Vec<usize>,
    covariates: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset with hospital labels ordered by first appearance.
    pub fn from_records(
        records: Vec<PatientRecord>,
        covariate_names: Vec<String>,
        mediator_kind: MediatorKind,
    ) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for r in &records {
            if !seen.contains_key(&r.hospital) {
                seen.insert(r.hospital.clone(), labels.len());
                labels.push(r.hospital.clone());
            }
        }
        Self::with_labels(labels, records, covariate_names, mediator_kind)
    }

    /// Builds a dataset with an explicit hospital label order. Every label
    /// must be used by at least one record.
    pub fn with_labels(
        hospital_labels: Vec<String>,
        records: Vec<PatientRecord>,
        covariate_names: Vec<String>,
        mediator_kind: MediatorKind,
    ) -> Result<Self> {
        let p = covariate_names.len();
        let index: HashMap<&str, usize> = hospital_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        if index.len() != hospital_labels.len() {
            return Err(Error::Validation("duplicate hospital labels".into()));
        }
        let n = records.len();
        let mut outcome = Vec::with_capacity(n);
        let mut mediator = Vec::with_capacity(n);
        let mut hospital = Vec::with_capacity(n);
        let mut covariates = Vec::with_capacity(n * p);
        for (i, r) in records.into_iter().enumerate() {
            let z = *index
                .get(r.hospital.as_str())
                .ok_or_else(|| Error::UnknownHospital(r.hospital.clone()))?;
            if r.covariates.len() != p {
                return Err(Error::Dimension(format!(
                    "record {i} has {} covariates, expected {p}",
                    r.covariates.len()
                )));
            }
            if mediator_kind == MediatorKind::Binary && r.mediator != 0.0 && r.mediator != 1.0 {
                return Err(Error::Validation(format!(
                    "record {i}: binary mediator must be 0 or 1, got {}",
                    r.mediator
                )));
            }
            if !r.outcome.is_finite() || !r.mediator.is_finite() || r.covariates.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!("record {i} has non-finite values")));
            }
            outcome.push(r.outcome);
            mediator.push(r.mediator);
            hospital.push(z);
            covariates.extend_from_slice(&r.covariates);
        }
        let ds = Dataset {
            hospital_labels,
            covariate_names,
            mediator_kind,
            outcome,
            mediator,
            hospital,
            covariates,
        };
        ds.check_invariants()?;
        Ok(ds)
    }

    fn check_invariants(&self) -> Result<()> {
        let q = self.q();
        if q < 2 {
            return Err(Error::Validation(format!(
                "q >= 2 required (found {q} distinct hospital)"
            )));
        }
        if self.n() < q {
            return Err(Error::Validation(format!(
                "n >= q required (n = {}, q = {q})",
                self.n()
            )));
        }
        let counts = self.hospital_counts();
        if let Some(z) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Validation(format!(
                "hospital `{}` has no patients",
                self.hospital_labels[z]
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn q(&self) -> usize {
        self.hospital_labels.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn hospital_labels(&self) -> &[String] {
        &self.hospital_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn mediator_kind(&self) -> MediatorKind {
        self.mediator_kind
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn mediator(&self) -> &[f64] {
        &self.mediator
    }

    /// Hospital index (0-based) for every patient.
    pub fn hospital(&self) -> &[usize] {
        &self.hospital
    }

    pub fn covariates_of(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.covariates[i * p..(i + 1) * p]
    }

    /// Writes `outcome,mediator,hospital,<covariates>` with round-trip
    /// float formatting.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["outcome".to_string(), "mediator".into(), "hospital".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![
                self.outcome[i].to_string(),
                self.mediator[i].to_string(),
                self.hospital_labels[self.hospital[i]].clone(),
            ];
            rec.extend(self.covariates_of(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn record(&self, i: usize) -> PatientRecord {
        PatientRecord {
            outcome: self.outcome[i],
            mediator: self.mediator[i],
            hospital: self.hospital_labels[self.hospital[i]].clone(),
            covariates: self.covariates_of(i).to_vec(),
        }
    }

    pub fn hospital_index(&self, label: &str) -> Result<usize> {
        self.hospital_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownHospital(label.to_string()))
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))
    }

    pub fn hospital_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.q()];
        for &z in &self.hospital {
            counts[z] += 1;
        }
        counts
    }

    /// Copy of the dataset with the outcome column replaced.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        if outcome.len() != self.n() {
            return Err(Error::Dimension("outcome length differs from n".into()));
        }
        Ok(Dataset {
            outcome,
            ..self.clone()
        })
    }

    /// Copy of the dataset with the mediator column replaced.
    pub fn with_mediator(&self, mediator: Vec<f64>) -> Result<Self> {
        if mediator.len() != self.n() {
            return Err(Error::Dimension("mediator length differs from n".into()));
        }
        if self.mediator_kind == MediatorKind::Binary && mediator.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Validation("binary mediator must be 0 or 1".into()));
        }
        Ok(Dataset {
            mediator,
            ..self.clone()
        })
    }
}

/// Names of the CSV columns holding each variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub outcome: String,
    pub mediator: String,
    pub hospital: String,
    pub covariates: Vec<String>,
    pub mediator_kind: MediatorKind,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    pub rejected_rows: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "N/A" | "NaN" | "nan" | "null" | "NULL")
}

pub fn ingest_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<Ingested> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.as_ref().display())))?;
    ingest_reader(file, mapping)
}

/// Reads a header-first CSV. Rows with a missing value in any mapped column
/// are dropped with a warning; malformed values are errors.
pub fn ingest_reader<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing column `{name}`")))
    };
    let y_col = col(&mapping.outcome)?;
    let m_col = col(&mapping.mediator)?;
    let z_col = col(&mapping.hospital)?;
    let x_cols = mapping.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut rejected = 0usize;
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        // header is line 1
        let line = k + 2;
        let mut used = vec![y_col, m_col, z_col];
        used.extend_from_slice(&x_cols);
        if used.iter().any(|&c| row.get(c).map_or(true, is_missing)) {
            warn!("row {line}: missing value in a declared column, row dropped");
            rejected += 1;
            continue;
        }
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = row.get(c).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row: line,
                    column: name.to_string(),
                    message: format!("`{s}` is not a finite number"),
                })
        };
        let outcome = num(y_col, &mapping.outcome)?;
        let mediator = num(m_col, &mapping.mediator)?;
        if mapping.mediator_kind == MediatorKind::Binary && mediator != 0.0 && mediator != 1.0 {
            return Err(Error::Validation(format!(
                "row {line}: mediator `{}` must be 0 or 1, got {mediator}",
                mapping.mediator
            )));
        }
        let covariates = x_cols
            .iter()
            .zip(&mapping.covariates)
            .map(|(&c, name)| num(c, name))
            .collect::<Result<Vec<_>>>()?;
        records.push(PatientRecord {
            outcome,
            mediator,
            hospital: row.get(z_col).unwrap_or("").to_string(),
            covariates,
        });
    }
    if rejected > 0 {
        warn!("{rejected} row(s) rejected for missing values");
    }
    let dataset = Dataset::from_records(records, mapping.covariates.clone(), mapping.mediator_kind)?;
    Ok(Ingested {
        dataset,
        rejected_rows: rejected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub n: usize,
    pub mediator_rate: f64,
    pub outcome_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub hospitals: Vec<GroupSummary>,
    pub overall: GroupSummary,
    pub covariate_means: Vec<(String, f64)>,
}

/// Per-hospital patient counts, mediator rates and outcome means, plus an
/// overall row. For a continuous mediator the "rate" is its mean.
pub fn summarize(dataset: &Dataset) -> Summary {
    let q = dataset.q();
    let mut n = vec![0usize; q];
    let mut m_sum = vec![0.0; q];
    let mut y_sum = vec![0.0; q];
    for i in 0..dataset.n() {
        let z = dataset.hospital[i];
        n[z] += 1;
        m_sum[z] += dataset.mediator[i];
        y_sum[z] += dataset.outcome[i];
    }
    let hospitals = (0..q)
        .map(|z| GroupSummary {
            label: dataset.hospital_labels[z].clone(),
            n: n[z],
            mediator_rate: m_sum[z] / n[z] as f64,
            outcome_mean: y_sum[z] / n[z] as f64,
        })
        .collect();
    let total = dataset.n() as f64;
    let overall = GroupSummary {
        label: "overall".to_string(),
        n: dataset.n(),
        mediator_rate: dataset.mediator.iter().sum::<f64>() / total,
        outcome_mean: dataset.outcome.iter().sum::<f64>() / total,
    };
    let p = dataset.p();
    let covariate_means = (0..p)
        .map(|j| {
            let s: f64 = (0..dataset.n()).map(|i| dataset.covariates[i * p + j]).sum();
            (dataset.covariate_names[j].clone(), s / total)
        })
        .collect();
    Summary {
        hospitals,
        overall,
        covariate_means,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mapping() -> ColumnMapping {
        ColumnMapping {
            outcome: "y".into(),
            mediator: "m".into(),
            hospital: "h".into(),
            covariates: vec!["x".into()],
            mediator_kind: MediatorKind::Binary,
        }
    }

    #[test]
    fn four_rows_two_hospitals() {
        // [TRIVIAL] direct construction
        let csv = "y,m,h,x\n1.0,1,A,0.5\n2.0,0,B,1.5\n1.5,1,A,0.0\n0.5,0,B,2.0\n";
        let ing = ingest_reader(csv.as_bytes(), &mapping()).unwrap();
        let ds = ing.dataset;
        assert_eq!((ds.n(), ds.q(), ds.p()), (4, 2, 1));
        assert_eq!(ds.hospital_labels(), &["A".to_string(), "B".to_string()]);
        assert_eq!(ing.rejected_rows, 0);
    }

    #[test]
    fn missing_mediator_row_is_dropped() {
        // [TRIVIAL] validation rule
        let csv = "y,m,h,x\n1.0,1,A,0.5\n2.0,,B,1.5\n1.5,1,A,0.0\n0.5,0,B,2.0\n";
        let ing = ingest_reader(csv.as_bytes(), &mapping()).unwrap();
        assert_eq!(ing.dataset.n(), 3);
        assert_eq!(ing.rejected_rows, 1);
    }

    #[test]
    fn single_hospital_is_rejected() {
        // [TRIVIAL] q >= 2 invariant
        let csv = "y,m,h,x\n1.0,1,A,0.5\n2.0,0,A,1.5\n";
        let err = ingest_reader(csv.as_bytes(), &mapping()).unwrap_err();
        assert!(err.to_string().contains("q >= 2 required"), "{err}");
    }

    #[test]
    fn missing_column_is_config_error() {
        // [TRIVIAL]
        let csv = "y,med,h,x\n1.0,1,A,0.5\n";
        let err = ingest_reader(csv.as_bytes(), &mapping()).unwrap_err();
        assert!(matches!(err, Error::Config(ref s) if s.contains("`m`")));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn non_numeric_outcome_reports_row() {
        // [TRIVIAL]
        let csv = "y,m,h,x\n1.0,1,A,0.5\nabc,0,B,1.5\n";
        match ingest_reader(csv.as_bytes(), &mapping()).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "y");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn mediator_outside_binary_support() {
        // [TRIVIAL]
        let csv = "y,m,h,x\n1.0,2,A,0.5\n2.0,0,B,1.5\n";
        let err = ingest_reader(csv.as_bytes(), &mapping()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn ingestion_is_idempotent() {
        // [TRIVIAL]
        let csv = "y,m,h,x\n1.0,1,B,0.5\n2.0,0,A,1.5\n1.5,1,C,0.0\n0.5,0,B,2.0\n";
        let a = ingest_reader(csv.as_bytes(), &mapping()).unwrap().dataset;
        let b = ingest_reader(csv.as_bytes(), &mapping()).unwrap().dataset;
        assert_eq!(a, b);
        assert_eq!(a.hospital_labels(), &["B", "A", "C"]);
    }

    #[test]
    fn summary_counts_and_rates() {
        // [TRIVIAL]
        let mut recs = Vec::new();
        for i in 0..8 {
            recs.push(PatientRecord {
                outcome: i as f64,
                mediator: 1.0,
                hospital: if i < 3 { "A".into() } else { "B".into() },
                covariates: vec![],
            });
        }
        let ds = Dataset::from_records(recs, vec![], MediatorKind::Binary).unwrap();
        let s = summarize(&ds);
        assert_eq!(s.hospitals[0].n, 3);
        assert_eq!(s.hospitals[1].n, 5);
        assert_eq!(s.overall.n, 8);
        assert_eq!(s.overall.mediator_rate, 1.0);
        assert_eq!(s.hospitals[0].outcome_mean, 1.0);
    }
}
