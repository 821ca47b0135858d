//! JSON run reports and their fixed-width text rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mediation::{Decomposition, HospitalEffectRow};
use crate::model::ModelSummary;
use crate::uncertainty::Interval;

pub const SCHEMA_VERSION: u32 = 1;

/// Wall-clock seconds per stage. Excluded from reproducibility comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fit_seconds: f64,
    pub decompose_seconds: f64,
    pub bootstrap_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub software_version: String,
    pub seed: u64,
    pub mechanism: String,
    pub n: usize,
    pub q: usize,
    pub rejected_rows: usize,
    #[serde(flatten)]
    pub decomposition: Decomposition,
    pub level: f64,
    pub bootstrap_draws: usize,
    pub bootstrap_failures: usize,
    pub credible_intervals: Vec<Interval>,
    pub model_summaries: Vec<ModelSummary>,
    pub per_hospital_effects: Vec<HospitalEffectRow>,
    pub timing: Timing,
}

impl Report {
    pub fn interval(&self, component: &str) -> Option<(f64, f64)> {
        self.credible_intervals
            .iter()
            .find(|i| i.component == component)
            .map(|i| (i.lower, i.upper))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} is not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Rows of the text table: label and component.
const ROWS: [(&str, &str); 7] = [
    ("Total", "omega0"),
    ("Direct effect", "omega2"),
    ("Indirect effect", "omega1"),
    ("Covariance", "omega3"),
    ("Case-mix", "casemix"),
    ("Residual", "residual"),
    ("Total variance", "total_variance"),
];

const LABEL_WIDTH: usize = 18;
const VALUE_WIDTH: usize = 22;
const DASH: &str = "\u{2014}";

fn percent_of(report: &Report, component: &str) -> Option<Option<f64>> {
    let d = &report.decomposition;
    let p = &d.percentages;
    let zero = p.omega1.is_none();
    let v = match component {
        "omega0" => Some(100.0),
        "omega1" => p.omega1,
        "omega2" => p.omega2,
        "omega3" => p.omega3,
        _ => return None,
    };
    Some(if zero { None } else { v })
}

/// Fixed-width table: estimate with its share of omega0 (rows of the
/// between-hospital part only) and the credible interval when present.
pub fn render_table(report: &Report) -> String {
    let level = 100.0 * report.level;
    let mut out = format!(
        "{:<LABEL_WIDTH$}{:<VALUE_WIDTH$}{level:.0}% interval\n",
        "Component", "Estimate (% total)"
    );
    for (label, c) in ROWS {
        let v = report.decomposition.component(c).unwrap_or(f64::NAN);
        let value = match percent_of(report, c) {
            Some(Some(p)) => format!("{v:.4} ({p:.2}%)"),
            Some(None) => format!("{v:.4} ({DASH})"),
            None => format!("{v:.4}"),
        };
        let ci = report
            .interval(c)
            .map(|(a, b)| format!("({a:.4}, {b:.4})"))
            .unwrap_or_default();
        let line = format!("{label:<LABEL_WIDTH$}{value:<VALUE_WIDTH$}{ci}");
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub estimate: f64,
    /// `Some(None)` for a dash, `None` when the row carries no share.
    pub percent: Option<Option<f64>>,
    pub interval: Option<(f64, f64)>,
}

fn parse_number(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("malformed number `{s}` in table")))
}

/// Inverse of [`render_table`] up to formatting precision.
pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let chars: Vec<char> = line.chars().collect();
        if chars.len() < LABEL_WIDTH {
            return Err(Error::Config(format!("short table line `{line}`")));
        }
        let label: String = chars[..LABEL_WIDTH].iter().collect::<String>().trim().to_string();
        let rest: String = chars[LABEL_WIDTH..].iter().collect();
        let (value, ci) = if rest.chars().count() > VALUE_WIDTH {
            let v: String = rest.chars().take(VALUE_WIDTH).collect();
            let c: String = rest.chars().skip(VALUE_WIDTH).collect();
            (v, c)
        } else {
            (rest, String::new())
        };
        let value = value.trim();
        let (estimate, percent) = match value.split_once(' ') {
            Some((e, p)) => {
                let inner = p.trim().trim_start_matches('(').trim_end_matches(')');
                let pct = if inner == DASH {
                    None
                } else {
                    Some(parse_number(inner.trim_end_matches('%'))?)
                };
                (parse_number(e)?, Some(pct))
            }
            None => (parse_number(value)?, None),
        };
        let ci = ci.trim();
        let interval = if ci.is_empty() {
            None
        } else {
            let inner = ci.trim_start_matches('(').trim_end_matches(')');
            let (a, b) = inner
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("malformed interval `{ci}`")))?;
            Some((parse_number(a)?, parse_number(b)?))
        };
        rows.push(TableRow {
            label,
            estimate,
            percent,
            interval,
        });
    }
    Ok(rows)
}
