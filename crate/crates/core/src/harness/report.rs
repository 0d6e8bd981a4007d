//! Result tables as CSV (fixed columns) and JSON (lossless superset).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::PolicyBundle;
use crate::env::reset;
use crate::error::{Error, Result};
use crate::harness::eval::TaskEval;
use crate::harness::profile::{backbone_tokens, decision_macs, decision_peak};

pub const CSV_COLUMNS: [&str; 12] = [
    "variant",
    "task",
    "full",
    "partial",
    "n",
    "se",
    "ceiling",
    "chunk_acc",
    "tokens",
    "macs",
    "latency_ms",
    "peak_scalars",
];

/// One (variant, task) row. `se` is the binomial standard error of `full`.
/// Cost columns are per decision; latency is absent when not measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub task: String,
    pub full: f64,
    pub partial: f64,
    pub n: usize,
    pub se: f64,
    pub ceiling: Option<f64>,
    pub chunk_acc: Option<f64>,
    pub tokens: Option<usize>,
    pub macs: Option<u64>,
    pub latency_ms: Option<f64>,
    pub peak_scalars: Option<u64>,
}

impl ResultRow {
    /// Rates from `eval`; cost columns computed from the bundle's configs.
    pub fn from_eval(variant: &str, eval: &TaskEval, bundle: &PolicyBundle) -> Self {
        let instr_len = reset(eval.task, 0).3.tokens().len();
        Self {
            variant: variant.to_string(),
            task: eval.task.name().to_string(),
            full: eval.full,
            partial: eval.partial,
            n: eval.episodes,
            se: eval.full_se,
            ceiling: eval.ceiling,
            chunk_acc: eval.chunk_accuracy,
            tokens: Some(backbone_tokens(bundle, instr_len)),
            macs: Some(decision_macs(bundle, instr_len)),
            latency_ms: None,
            peak_scalars: Some(decision_peak(bundle, instr_len)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub rows: Vec<ResultRow>,
    /// Loss curves, per-episode outcomes and anything else worth keeping.
    pub details: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl Results {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            for (name, v) in [("full", r.full), ("partial", r.partial)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!("{} {}: {name} rate {v} outside [0, 1]", r.variant, r.task)));
                }
            }
            for field in [&r.variant, &r.task] {
                if field.contains([',', '"', '\n']) {
                    return Err(Error::Contract(format!("`{field}` cannot be written to CSV")));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.variant,
                r.task,
                r.full,
                r.partial,
                r.n,
                r.se,
                opt(&r.ceiling),
                opt(&r.chunk_acc),
                opt(&r.tokens),
                opt(&r.macs),
                opt(&r.latency_ms),
                opt(&r.peak_scalars)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }
}

fn field<T: FromStr>(raw: &str, col: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::config(format!("bad {col} value `{raw}`")))
}

fn opt_field<T: FromStr>(raw: &str, col: &str) -> Result<Option<T>> {
    if raw.is_empty() {
        Ok(None)
    } else {
        field(raw, col).map(Some)
    }
}

/// Reads rows written by [`Results::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_COLUMNS.join(",").as_str()) {
        return Err(Error::config("CSV header does not match the report columns"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != CSV_COLUMNS.len() {
                return Err(Error::config(format!("CSV row has {} fields: {line}", f.len())));
            }
            Ok(ResultRow {
                variant: f[0].to_string(),
                task: f[1].to_string(),
                full: field(f[2], "full")?,
                partial: field(f[3], "partial")?,
                n: field(f[4], "n")?,
                se: field(f[5], "se")?,
                ceiling: opt_field(f[6], "ceiling")?,
                chunk_acc: opt_field(f[7], "chunk_acc")?,
                tokens: opt_field(f[8], "tokens")?,
                macs: opt_field(f[9], "macs")?,
                latency_ms: opt_field(f[10], "latency_ms")?,
                peak_scalars: opt_field(f[11], "peak_scalars")?,
            })
        })
        .collect()
}

pub fn write_report(results: &Results, format: ReportFormat, path: &Path) -> Result<()> {
    results.validate()?;
    let text = match format {
        ReportFormat::Csv => results.to_csv(),
        ReportFormat::Json => results.to_json(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Results> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
