//! Analyze and report stages: dispersion per conditional distribution,
//! source-versus-generated verdicts, pooled analyses and the written report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use gemometer_core::attributes::text::{
    normalize_text, unique_word_count, word_distribution_entropy, word_frequency_table,
};
use gemometer_core::attributes::{AttributeData, AttributeValue, ExtractedRecord};
use gemometer_core::dataset::{PairedDataset, ResponseRecord, Side};
use gemometer_core::fingerprint::{pairwise_fingerprint_matrix, FingerprintSet};
use gemometer_core::metrics::{
    build_series, dispersion_result, instance_statistic, kde, label_counts, monoculture_verdict,
    unconditional_top_k, DispersionResult, InstanceStat, MetricPlan, MetricsError,
    MonocultureVerdict, PlanEntry, Statistic, Unconditional,
};
use gemometer_core::report::svg::{render_svg, ChartKind, ChartSpec, Series};
use gemometer_core::report::{dispersion_csv, mean_bucket_chart, verdicts_csv, RunSummary};
use gemometer_core::util::sha256_fields;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::pipeline::{run_description, Ctx, PrintRow, Stage, StageResult, ATTRIBUTES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub dispersion: Vec<DispersionResult>,
    pub verdicts: Vec<MonocultureVerdict>,
    pub unconditional: Value,
}

/// Attribute id to (response id to value).
pub type ValueTable = BTreeMap<String, BTreeMap<String, AttributeValue>>;

pub fn value_table(records: impl IntoIterator<Item = ExtractedRecord>) -> ValueTable {
    let mut t = ValueTable::new();
    for r in records {
        t.entry(r.value.attribute_id.clone())
            .or_default()
            .insert(r.response_id, r.value);
    }
    t
}

fn fingerprint_stats(
    ds: &PairedDataset,
    prints: &BTreeMap<String, FingerprintSet>,
    exclude: &BTreeSet<String>,
) -> BTreeMap<(Side, String), Vec<InstanceStat>> {
    let mut out: BTreeMap<(Side, String), Vec<InstanceStat>> = BTreeMap::new();
    for (key, recs) in ds.conditional_groups() {
        let sets: Vec<FingerprintSet> = recs
            .iter()
            .filter(|r| !exclude.contains(&r.response_id))
            .filter_map(|r| prints.get(&r.response_id).cloned())
            .collect();
        if sets.is_empty() {
            continue;
        }
        let value = pairwise_fingerprint_matrix(&sets).ok().map(|m| m.mean);
        out.entry((key.side, key.provenance.clone()))
            .or_default()
            .push(InstanceStat {
                instance_id: key.instance_id.clone(),
                n: sets.len(),
                value,
            });
    }
    out
}

fn labels_of(data: &AttributeData) -> Vec<String> {
    match data {
        AttributeData::LabelSet(s) => s.iter().cloned().collect(),
        other => other.as_label().into_iter().collect(),
    }
}

/// Responses per (side, provenance), pooled over instances.
fn pooled<'a>(
    ds: &'a PairedDataset,
    exclude: &BTreeSet<String>,
) -> BTreeMap<(Side, String), Vec<&'a ResponseRecord>> {
    let mut out: BTreeMap<(Side, String), Vec<&ResponseRecord>> = BTreeMap::new();
    for r in ds
        .responses
        .iter()
        .filter(|r| !exclude.contains(&r.response_id))
    {
        out.entry((r.side, r.provenance.key())).or_default().push(r);
    }
    out
}

fn unconditional(
    ds: &PairedDataset,
    entry: &PlanEntry,
    values: Option<&BTreeMap<String, AttributeValue>>,
    exclude: &BTreeSet<String>,
) -> Result<Value, String> {
    let mut out = Map::new();
    for u in &entry.unconditional {
        let mut rows = Vec::new();
        for ((side, prov), recs) in pooled(ds, exclude) {
            let with_value: Vec<(&ResponseRecord, &AttributeValue)> = recs
                .iter()
                .filter_map(|r| Some((*r, values?.get(&r.response_id)?)))
                .collect();
            if with_value.is_empty() {
                continue;
            }
            let labels: Vec<String> = with_value
                .iter()
                .flat_map(|(_, v)| labels_of(&v.data))
                .collect();
            let head = json!({ "side": side, "provenance": prov });
            let row = match u {
                Unconditional::TopK { k } => {
                    if labels.is_empty() {
                        continue;
                    }
                    let top = unconditional_top_k(&labels, *k).map_err(|e| e.to_string())?;
                    json!({ "k": k, "items": top.into_iter().map(|(l, s)| json!({"label": l, "share": s})).collect::<Vec<_>>() })
                }
                Unconditional::Histogram => {
                    if labels.is_empty() {
                        continue;
                    }
                    let total = labels.len() as f64;
                    let shares: Map<String, Value> = label_counts(&labels)
                        .into_iter()
                        .map(|(l, c)| (l, json!(c as f64 / total)))
                        .collect();
                    json!({ "shares": shares })
                }
                Unconditional::WordStats => {
                    let texts: Vec<&str> =
                        with_value.iter().map(|(r, _)| r.text.as_str()).collect();
                    let tokens = normalize_text(&texts);
                    let table = word_frequency_table(&tokens);
                    json!({
                        "responses": texts.len(),
                        "tokens": tokens.len(),
                        "unique_words": unique_word_count(&table),
                        "word_entropy": word_distribution_entropy(&table).ok(),
                    })
                }
            };
            let mut merged = head.as_object().cloned().expect("object");
            merged.extend(row.as_object().cloned().expect("object"));
            rows.push(Value::Object(merged));
        }
        let name = match u {
            Unconditional::TopK { .. } => "top_k",
            Unconditional::Histogram => "histogram",
            Unconditional::WordStats => "word_stats",
        };
        out.insert(name.into(), Value::Array(rows));
    }
    Ok(Value::Object(out))
}

/// Every planned statistic for every (side, provenance), then a verdict for
/// each generated provenance against each source provenance.
pub fn analyze(
    ds: &PairedDataset,
    values: &ValueTable,
    prints: &BTreeMap<String, FingerprintSet>,
    rejected: &BTreeSet<String>,
    plan: &MetricPlan,
) -> Result<Analysis, String> {
    if values.values().all(BTreeMap::is_empty) && prints.is_empty() {
        return Err(
            "nothing to analyze: no attribute values were extracted, judged or fingerprinted"
                .into(),
        );
    }
    let none = BTreeSet::new();
    let mut dispersion = Vec::new();
    let mut uncond = Map::new();
    for entry in &plan.entries {
        let attr = entry.attribute_id.as_str();
        let exclude = if entry.accepted_only { rejected } else { &none };
        let attr_values = values.get(attr);
        for &stat in &entry.statistics {
            let groups = if stat == Statistic::MeanPairwiseFingerprint {
                fingerprint_stats(ds, prints, exclude)
            } else {
                let Some(vals) = attr_values else {
                    log::warn!("analyze: no values for `{attr}`; skipping {stat}");
                    continue;
                };
                let mut g: BTreeMap<(Side, String), Vec<InstanceStat>> = BTreeMap::new();
                for series in build_series(ds, attr, vals, exclude) {
                    let s = instance_statistic(stat, &series)
                        .map_err(|e| format!("{attr}/{stat}: {e}"))?;
                    g.entry((series.side, series.provenance.clone()))
                        .or_default()
                        .push(s);
                }
                g
            };
            for ((side, prov), stats) in groups {
                dispersion.push(dispersion_result(attr, stat, side, &prov, stats));
            }
        }
        if !entry.unconditional.is_empty() {
            uncond.insert(
                attr.to_string(),
                unconditional(ds, entry, attr_values, exclude)?,
            );
        }
    }
    let mut verdicts = Vec::new();
    for src in dispersion
        .iter()
        .filter(|r| r.side == Side::Src && r.statistic != Statistic::Mean)
    {
        for gen in dispersion.iter().filter(|g| {
            g.side == Side::Gen
                && g.attribute_id == src.attribute_id
                && g.statistic == src.statistic
        }) {
            match monoculture_verdict(src, gen) {
                Ok(v) => verdicts.push(v),
                Err(MetricsError::NoOverlap) => {
                    log::warn!(
                        "analyze: {}/{}: no instance has values on both sides for {}",
                        gen.attribute_id,
                        gen.statistic,
                        gen.provenance
                    )
                }
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    Ok(Analysis {
        dispersion,
        verdicts,
        unconditional: Value::Object(uncond),
    })
}

pub fn run_analyze(ctx: &Ctx) -> StageResult {
    let ds = ctx.load_dataset(Stage::Generate)?;
    let mut records: Vec<ExtractedRecord> = ctx.read_jsonl(Stage::Extract, ATTRIBUTES)?;
    records.extend(ctx.read_jsonl::<ExtractedRecord>(Stage::Judge, ATTRIBUTES)?);
    let values = value_table(records);
    let prints: BTreeMap<String, FingerprintSet> = ctx
        .read_jsonl::<PrintRow>(Stage::Fingerprint, "prints.jsonl")?
        .into_iter()
        .map(|p| (p.response_id, p.fingerprint))
        .collect();
    let rejected: BTreeSet<String> = ctx
        .read_jsonl(Stage::Generate, "rejected.jsonl")?
        .into_iter()
        .collect();
    let analysis = analyze(&ds, &values, &prints, &rejected, &ctx.cfg.metric_plan())?;
    log::info!(
        "analyze: {} dispersion results, {} verdicts",
        analysis.dispersion.len(),
        analysis.verdicts.len()
    );
    let mut bytes = serde_json::to_vec_pretty(&analysis).map_err(|e| e.to_string())?;
    bytes.push(b'\n');
    Ok(vec![ctx.write(Stage::Analyze, "analysis.json", &bytes)?])
}

/// Compact legend label for a provenance key.
pub fn short_label(side: Side, provenance: &str) -> String {
    if side == Side::Src {
        return if provenance == "source" {
            "src".into()
        } else {
            format!("src:{provenance}")
        };
    }
    let parts: Vec<&str> = provenance.split('|').collect();
    if parts.len() < 7 {
        return provenance.to_string();
    }
    let mut s = format!("{} {} {}", parts[1], parts[3], parts[4]);
    if parts[2] != "-" {
        s.push_str(&format!(" [{}]", parts[2]));
    }
    if parts[6] != "decay=none" {
        s.push_str(" decay");
    }
    s
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

fn figures(analysis: &Analysis) -> Vec<(String, ChartSpec)> {
    let mut out = Vec::new();
    let mut keys: Vec<(&str, Statistic)> = Vec::new();
    for r in &analysis.dispersion {
        if !keys.contains(&(r.attribute_id.as_str(), r.statistic)) {
            keys.push((r.attribute_id.as_str(), r.statistic));
        }
    }
    for (attr, stat) in keys {
        let results: Vec<&DispersionResult> = analysis
            .dispersion
            .iter()
            .filter(|r| r.attribute_id == attr && r.statistic == stat)
            .collect();
        let bucketed =
            stat == Statistic::Mean && results.iter().all(|r| r.aggregate.distribution.is_some());
        if bucketed {
            if let Some(mut chart) =
                mean_bucket_chart(&format!("{attr}: per-instance mean"), &results)
            {
                chart.categories = results
                    .iter()
                    .map(|r| short_label(r.side, &r.provenance))
                    .collect();
                out.push((format!("{}_mean_buckets.svg", slug(attr)), chart));
            }
            continue;
        }
        let series: Vec<Series> = results
            .iter()
            .filter_map(|r| {
                let c = kde(&r.values(), None).ok()?;
                Some(Series {
                    label: short_label(r.side, &r.provenance),
                    x: c.xs,
                    values: c.ys,
                })
            })
            .collect();
        if !series.is_empty() {
            out.push((
                format!("{}_{}_kde.svg", slug(attr), stat.name()),
                ChartSpec {
                    kind: ChartKind::KdeCurve,
                    title: format!("{attr}: per-instance {stat}"),
                    x_label: stat.name().into(),
                    y_label: "density".into(),
                    categories: Vec::new(),
                    series,
                },
            ));
        }
    }
    let Some(uncond) = analysis.unconditional.as_object() else {
        return out;
    };
    for (attr, analyses) in uncond {
        for (name, kind, key) in [
            ("histogram", ChartKind::Histogram, "shares"),
            ("top_k", ChartKind::GroupedBar, "items"),
        ] {
            let Some(rows) = analyses.get(name).and_then(Value::as_array) else {
                continue;
            };
            let shares: Vec<(String, BTreeMap<String, f64>)> = rows
                .iter()
                .map(|row| {
                    let side = if row["side"] == "src" {
                        Side::Src
                    } else {
                        Side::Gen
                    };
                    let label = short_label(side, row["provenance"].as_str().unwrap_or_default());
                    let m: BTreeMap<String, f64> = match key {
                        "shares" => row[key]
                            .as_object()
                            .map(|o| {
                                o.iter()
                                    .map(|(k, v)| (k.clone(), v.as_f64().unwrap_or(0.0)))
                                    .collect()
                            })
                            .unwrap_or_default(),
                        _ => row[key]
                            .as_array()
                            .map(|a| {
                                a.iter()
                                    .map(|i| {
                                        (
                                            i["label"].as_str().unwrap_or_default().to_string(),
                                            i["share"].as_f64().unwrap_or(0.0),
                                        )
                                    })
                                    .collect()
                            })
                            .unwrap_or_default(),
                    };
                    (label, m)
                })
                .collect();
            if shares.is_empty() {
                continue;
            }
            let categories: Vec<String> = shares
                .iter()
                .flat_map(|(_, m)| m.keys().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let series = shares
                .iter()
                .map(|(label, m)| Series {
                    label: label.clone(),
                    x: Vec::new(),
                    values: categories
                        .iter()
                        .map(|c| m.get(c).copied().unwrap_or(0.0))
                        .collect(),
                })
                .collect();
            out.push((
                format!("{}_{name}.svg", slug(attr)),
                ChartSpec {
                    kind,
                    title: format!(
                        "{attr}: pooled {}",
                        if name == "top_k" {
                            "top labels"
                        } else {
                            "label shares"
                        }
                    ),
                    x_label: attr.clone(),
                    y_label: "share".into(),
                    categories,
                    series,
                },
            ));
        }
    }
    out
}

pub fn run_report(ctx: &Ctx) -> StageResult {
    let analysis = read_analysis(&ctx.path(Stage::Analyze, "analysis.json"))?;
    write_report(
        analysis,
        run_description(ctx.cfg, ctx.hashes),
        |name, bytes| ctx.write(Stage::Report, name, bytes),
    )
}

pub fn read_analysis(path: &Path) -> Result<Analysis, String> {
    let raw = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&raw).map_err(|e| format!("{}: {e}", path.display()))
}

/// Dispersion and verdict CSVs, figures and the run summary. `write` stores
/// one file under a relative name and returns the name to record.
pub fn write_report(
    analysis: Analysis,
    manifest: Value,
    mut write: impl FnMut(&str, &[u8]) -> Result<String, String>,
) -> StageResult {
    let mut artifacts = Vec::new();
    for r in &analysis.dispersion {
        let name = format!(
            "dispersion/{}__{}__{}__{}.csv",
            slug(&r.attribute_id),
            r.statistic.name(),
            r.side,
            &sha256_fields([r.provenance.as_str()])[..10]
        );
        artifacts.push(write(
            &name,
            &dispersion_csv(r).map_err(|e| e.to_string())?,
        )?);
    }
    artifacts.push(write(
        "verdicts.csv",
        &verdicts_csv(&analysis.verdicts).map_err(|e| e.to_string())?,
    )?);
    for (name, chart) in figures(&analysis) {
        let svg = render_svg(&chart).map_err(|e| format!("{name}: {e}"))?;
        artifacts.push(write(&format!("figures/{name}"), svg.as_bytes())?);
    }
    let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let mut summary = RunSummary::new(stamp, manifest);
    summary.dispersion = analysis.dispersion;
    summary.verdicts = analysis.verdicts;
    summary.unconditional = analysis.unconditional;
    artifacts.push(write("summary.json", &summary.to_json())?);
    for v in &summary.verdicts {
        log::info!(
            "{} {} [{}]: narrower in {:.0}% of instances, aggregate narrower: {}",
            v.attribute_id,
            v.statistic,
            short_label(Side::Gen, &v.gen_provenance),
            v.fraction_narrower * 100.0,
            v.aggregate_narrower
        );
    }
    Ok(artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_compact() {
        assert_eq!(short_label(Side::Src, "source"), "src");
        assert_eq!(
            short_label(Side::Gen, "m|review_plain|-|T=1|p=0.95|max=500|decay=none"),
            "review_plain T=1 p=0.95"
        );
        assert_eq!(
            short_label(
                Side::Gen,
                "m|review_persona|Ada|T=1|p=1|max=500|decay=10->1.2@50"
            ),
            "review_persona T=1 p=1 [Ada] decay"
        );
    }

    #[test]
    fn empty_values_are_nothing_to_analyze() {
        let err = analyze(
            &PairedDataset::default(),
            &ValueTable::new(),
            &BTreeMap::new(),
            &BTreeSet::new(),
            &MetricPlan::reviews(),
        )
        .unwrap_err();
        assert!(err.contains("nothing to analyze"));
    }
}
