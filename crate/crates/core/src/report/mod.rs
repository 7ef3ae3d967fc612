//! Analysis artifacts: CSV tables, SVG charts and the run summary JSON.
//!
//! Every emitter is a pure function of its input. The only time-dependent
//! value anywhere is the summary's `generated_at` field, which the caller
//! supplies.

pub mod svg;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::Side;
use crate::metrics::{DispersionResult, InstanceStat, MonocultureVerdict, Statistic};
use crate::util::write_atomic;

pub use svg::{emit_svg, render_svg, ChartKind, ChartSpec, Series};

pub const AGGREGATE_ROW: &str = "__aggregate__";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid chart: {0}")]
    InvalidChart(String),
    #[error("malformed CSV row: {0}")]
    Malformed(String),
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    write_atomic(path, bytes).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Shortest representation that parses back to the same f64.
fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub const DISPERSION_HEADER: &[&str] = &[
    "attribute_id",
    "statistic",
    "side",
    "provenance",
    "instance_id",
    "n",
    "value",
];

/// One row per instance plus an aggregate row (the mean over instances,
/// with `n` the number of instances). No instances gives a header-only table.
pub fn dispersion_csv(result: &DispersionResult) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DISPERSION_HEADER)?;
    let side = result.side.to_string();
    for s in &result.per_instance {
        let n = s.n.to_string();
        w.write_record([
            result.attribute_id.as_str(),
            result.statistic.name(),
            side.as_str(),
            result.provenance.as_str(),
            s.instance_id.as_str(),
            n.as_str(),
            opt(s.value).as_str(),
        ])?;
    }
    if !result.per_instance.is_empty() {
        let n = result.aggregate.n_instances.to_string();
        w.write_record([
            result.attribute_id.as_str(),
            result.statistic.name(),
            side.as_str(),
            result.provenance.as_str(),
            AGGREGATE_ROW,
            n.as_str(),
            opt(result.aggregate.mean).as_str(),
        ])?;
    }
    w.into_inner().map_err(|e| ReportError::Io {
        path: "<memory>".into(),
        source: e.into_error(),
    })
}

pub fn emit_dispersion_csv(result: &DispersionResult, path: &Path) -> Result<(), ReportError> {
    write(path, &dispersion_csv(result)?)
}

/// Parsed form of a dispersion CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionTable {
    pub rows: Vec<InstanceStat>,
    pub aggregate_mean: Option<f64>,
}

fn parse_opt(s: &str) -> Result<Option<f64>, ReportError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| ReportError::Malformed(format!("bad number `{s}`")))
}

pub fn read_dispersion_csv(bytes: &[u8]) -> Result<DispersionTable, ReportError> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut rows = Vec::new();
    let mut aggregate_mean = None;
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| ReportError::Malformed(format!("{rec:?}")))
        };
        let value = parse_opt(field(6)?)?;
        if field(4)? == AGGREGATE_ROW {
            aggregate_mean = value;
        } else {
            let n = field(5)?
                .parse()
                .map_err(|_| ReportError::Malformed(format!("{rec:?}")))?;
            rows.push(InstanceStat {
                instance_id: field(4)?.to_string(),
                n,
                value,
            });
        }
    }
    Ok(DispersionTable {
        rows,
        aggregate_mean,
    })
}

pub const VERDICT_HEADER: &[&str] = &[
    "attribute_id",
    "statistic",
    "src_provenance",
    "gen_provenance",
    "n_instances",
    "fraction_narrower",
    "aggregate_narrower",
    "mean_src_dispersion",
    "mean_gen_dispersion",
    "effect",
];

pub fn verdicts_csv(verdicts: &[MonocultureVerdict]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(VERDICT_HEADER)?;
    for v in verdicts {
        w.write_record([
            v.attribute_id.clone(),
            v.statistic.name().to_string(),
            v.src_provenance.clone(),
            v.gen_provenance.clone(),
            v.n_instances.to_string(),
            num(v.fraction_narrower),
            v.aggregate_narrower.to_string(),
            num(v.mean_src_dispersion),
            num(v.mean_gen_dispersion),
            num(v.effect),
        ])?;
    }
    w.into_inner().map_err(|e| ReportError::Io {
        path: "<memory>".into(),
        source: e.into_error(),
    })
}

pub fn emit_verdicts_csv(verdicts: &[MonocultureVerdict], path: &Path) -> Result<(), ReportError> {
    write(path, &verdicts_csv(verdicts)?)
}

pub fn read_verdicts_csv(bytes: &[u8]) -> Result<Vec<MonocultureVerdict>, ReportError> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || ReportError::Malformed(format!("{rec:?}"));
        let f = |i: usize| rec.get(i).ok_or_else(bad);
        let x = |i: usize| -> Result<f64, ReportError> { f(i)?.parse().map_err(|_| bad()) };
        let statistic: Statistic =
            serde_json::from_value(Value::String(f(1)?.to_string())).map_err(|_| bad())?;
        out.push(MonocultureVerdict {
            attribute_id: f(0)?.to_string(),
            statistic,
            src_provenance: f(2)?.to_string(),
            gen_provenance: f(3)?.to_string(),
            n_instances: f(4)?.parse().map_err(|_| bad())?,
            fraction_narrower: x(5)?,
            aggregate_narrower: f(6)?.parse().map_err(|_| bad())?,
            mean_src_dispersion: x(7)?,
            mean_gen_dispersion: x(8)?,
            effect: x(9)?,
        });
    }
    Ok(out)
}

/// Summary format version; bump when fields change meaning.
pub const SUMMARY_VERSION: &str = "1";
pub const METRICS_VERSION: &str = "1";

/// Everything about a run in one machine-readable document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub summary_version: String,
    pub metrics_version: String,
    /// The only field allowed to differ between identical runs.
    pub generated_at: String,
    /// Run configuration, filters and stage hashes as supplied by the caller.
    pub manifest: Value,
    pub dispersion: Vec<DispersionResult>,
    pub verdicts: Vec<MonocultureVerdict>,
    /// Unconditional analyses, keyed by name.
    pub unconditional: Value,
}

impl RunSummary {
    pub fn new(generated_at: impl Into<String>, manifest: Value) -> Self {
        Self {
            summary_version: SUMMARY_VERSION.into(),
            metrics_version: METRICS_VERSION.into(),
            generated_at: generated_at.into(),
            manifest,
            dispersion: Vec::new(),
            verdicts: Vec::new(),
            unconditional: Value::Object(Default::default()),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("summary serializes");
        v.push(b'\n');
        v
    }
}

pub fn emit_summary(summary: &RunSummary, path: &Path) -> Result<(), ReportError> {
    write(path, &summary.to_json())
}

/// JSON Schema (draft 2020-12) for [`RunSummary`].
pub const SUMMARY_SCHEMA: &str = include_str!("../../data/summary.schema.json");

/// Chart of per-instance mean buckets per provenance, darkest (lowest) at the
/// bottom. Results without a distribution are skipped.
pub fn mean_bucket_chart(title: &str, results: &[&DispersionResult]) -> Option<ChartSpec> {
    let with: Vec<(&DispersionResult, &crate::metrics::DistributionSummary)> = results
        .iter()
        .filter_map(|r| Some((*r, r.aggregate.distribution.as_ref()?)))
        .collect();
    let (_, first) = with.first()?;
    let legend = first.labels();
    let series = legend
        .iter()
        .enumerate()
        .map(|(b, label)| Series {
            label: label.clone(),
            x: Vec::new(),
            values: with.iter().map(|(_, d)| d.fractions[b]).collect(),
        })
        .collect();
    Some(ChartSpec {
        kind: ChartKind::StackedBar,
        title: title.into(),
        x_label: "response set".into(),
        y_label: "share of instances".into(),
        categories: with.iter().map(|(r, _)| bar_label(r)).collect(),
        series,
    })
}

fn bar_label(r: &DispersionResult) -> String {
    match r.side {
        Side::Src => "src".into(),
        Side::Gen => r.provenance.clone(),
    }
}
