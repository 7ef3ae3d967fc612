//! Per-instance dispersion and the source-versus-generated comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    distribution_of_means, label_counts, mean_pairwise_cosine, mean_pairwise_jaccard, mean_std,
    shannon_entropy, DistributionSummary, MetricsError, DEFAULT_BUCKET_WIDTH,
};
use crate::attributes::{AttributeData, AttributeKind, AttributeValue};
use crate::dataset::{PairedDataset, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Entropy,
    Std,
    UniqueCount,
    MeanPairwiseJaccard,
    MeanPairwiseCosine,
    MeanPairwiseFingerprint,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Entropy => "entropy",
            Statistic::Std => "std",
            Statistic::UniqueCount => "unique_count",
            Statistic::MeanPairwiseJaccard => "mean_pairwise_jaccard",
            Statistic::MeanPairwiseCosine => "mean_pairwise_cosine",
            Statistic::MeanPairwiseFingerprint => "mean_pairwise_fingerprint",
        }
    }

    fn is_similarity(self) -> bool {
        matches!(
            self,
            Statistic::MeanPairwiseJaccard
                | Statistic::MeanPairwiseCosine
                | Statistic::MeanPairwiseFingerprint
        )
    }

    /// Spread implied by a statistic value (higher is more diverse).
    /// Similarities become `1 - s`; the mean is a location, not a spread.
    pub fn dispersion(self, value: f64) -> Result<f64, MetricsError> {
        match self {
            Statistic::Mean => Err(MetricsError::NotDispersion(self.to_string())),
            s if s.is_similarity() => Ok(1.0 - value),
            _ => Ok(value),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn kind_name(k: AttributeKind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Attribute values of one conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSeries {
    pub attribute_id: String,
    pub instance_id: String,
    pub side: Side,
    pub provenance: String,
    pub response_ids: Vec<String>,
    pub values: Vec<AttributeData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStat {
    pub instance_id: String,
    /// Sample size behind `value`.
    pub n: usize,
    /// `None` marks an insufficient sample.
    pub value: Option<f64>,
}

/// Compute `stat` on one series. Spread statistics need two or more values;
/// smaller series yield `value: None`.
pub fn instance_statistic(
    stat: Statistic,
    series: &ConditionalSeries,
) -> Result<InstanceStat, MetricsError> {
    let n = series.values.len();
    let kind = match series.values.first() {
        Some(v) => v.kind(),
        None => {
            return Ok(InstanceStat {
                instance_id: series.instance_id.clone(),
                n,
                value: None,
            })
        }
    };
    if series.values.iter().any(|v| v.kind() != kind) {
        return Err(MetricsError::MixedKinds(series.attribute_id.clone()));
    }
    let inapplicable = || MetricsError::Inapplicable {
        statistic: stat.to_string(),
        kind: kind_name(kind),
    };
    let enough = n >= 2 || stat == Statistic::Mean;
    let value = match stat {
        Statistic::Mean | Statistic::Std => {
            let xs: Vec<f64> = series
                .values
                .iter()
                .map(|v| v.as_f64().ok_or_else(inapplicable))
                .collect::<Result<_, _>>()?;
            let ms = mean_std(&xs).expect("non-empty");
            if stat == Statistic::Mean {
                Some(ms.mean)
            } else {
                ms.std
            }
        }
        Statistic::Entropy => {
            let labels: Vec<String> = series
                .values
                .iter()
                .map(|v| v.as_label().ok_or_else(inapplicable))
                .collect::<Result<_, _>>()?;
            if enough {
                Some(shannon_entropy(&label_counts(&labels))?)
            } else {
                None
            }
        }
        Statistic::UniqueCount => {
            let mut all = BTreeSet::new();
            for v in &series.values {
                match v {
                    AttributeData::LabelSet(s) => all.extend(s.iter().cloned()),
                    _ => return Err(inapplicable()),
                }
            }
            enough.then_some(all.len() as f64)
        }
        Statistic::MeanPairwiseJaccard => {
            let sets: Vec<BTreeSet<String>> = series
                .values
                .iter()
                .map(|v| match v {
                    AttributeData::LabelSet(s) => Ok(s.clone()),
                    _ => Err(inapplicable()),
                })
                .collect::<Result<_, _>>()?;
            mean_pairwise_jaccard(&sets)
        }
        Statistic::MeanPairwiseCosine => {
            let vecs: Vec<Vec<f64>> = series
                .values
                .iter()
                .map(|v| match v {
                    AttributeData::Embedding(e) => Ok(e.clone()),
                    _ => Err(inapplicable()),
                })
                .collect::<Result<_, _>>()?;
            mean_pairwise_cosine(&vecs).map_err(|e| match e {
                MetricsError::ZeroNorm { index } => MetricsError::ZeroNormResponse {
                    response_id: series.response_ids.get(index).cloned().unwrap_or_default(),
                },
                other => other,
            })?
        }
        Statistic::MeanPairwiseFingerprint => return Err(inapplicable()),
    };
    Ok(InstanceStat {
        instance_id: series.instance_id.clone(),
        n,
        value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_instances: usize,
    pub n_insufficient: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Bucketed per-instance values, for bounded means.
    pub distribution: Option<DistributionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionResult {
    pub attribute_id: String,
    pub statistic: Statistic,
    pub side: Side,
    pub provenance: String,
    /// Sorted by instance id.
    pub per_instance: Vec<InstanceStat>,
    pub aggregate: Aggregate,
}

impl DispersionResult {
    /// Values present, in instance order.
    pub fn values(&self) -> Vec<f64> {
        self.per_instance.iter().filter_map(|s| s.value).collect()
    }
}

/// Assemble a result from per-instance statistics (any order).
pub fn dispersion_result(
    attribute_id: &str,
    statistic: Statistic,
    side: Side,
    provenance: &str,
    mut per_instance: Vec<InstanceStat>,
) -> DispersionResult {
    per_instance.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let values: Vec<f64> = per_instance.iter().filter_map(|s| s.value).collect();
    let ms = mean_std(&values);
    let bounded = statistic == Statistic::Mean
        && !values.is_empty()
        && values.iter().all(|v| (0.0..=1.0).contains(v));
    let distribution = if bounded {
        distribution_of_means(&values, DEFAULT_BUCKET_WIDTH).ok()
    } else {
        None
    };
    DispersionResult {
        attribute_id: attribute_id.to_string(),
        statistic,
        side,
        provenance: provenance.to_string(),
        aggregate: Aggregate {
            n_instances: per_instance.len(),
            n_insufficient: per_instance.len() - values.len(),
            mean: ms.map(|m| m.mean),
            std: ms.and_then(|m| m.std),
            distribution,
        },
        per_instance,
    }
}

/// Group extracted values by (instance, side, provenance) for one attribute.
/// `values` maps response id to value; responses without a value are skipped.
pub fn build_series(
    ds: &PairedDataset,
    attribute_id: &str,
    values: &BTreeMap<String, AttributeValue>,
    exclude: &BTreeSet<String>,
) -> Vec<ConditionalSeries> {
    let mut out = Vec::new();
    for (key, recs) in ds.conditional_groups() {
        let mut s = ConditionalSeries {
            attribute_id: attribute_id.to_string(),
            instance_id: key.instance_id.clone(),
            side: key.side,
            provenance: key.provenance.clone(),
            response_ids: Vec::new(),
            values: Vec::new(),
        };
        for r in recs {
            if exclude.contains(&r.response_id) {
                continue;
            }
            if let Some(v) = values.get(&r.response_id) {
                s.response_ids.push(r.response_id.clone());
                s.values.push(v.data.clone());
            }
        }
        if !s.values.is_empty() {
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonocultureVerdict {
    pub attribute_id: String,
    pub statistic: Statistic,
    pub src_provenance: String,
    pub gen_provenance: String,
    /// Instances with a value on both sides.
    pub n_instances: usize,
    /// Share of matched instances where the generated side is strictly narrower.
    pub fraction_narrower: f64,
    pub aggregate_narrower: bool,
    pub mean_src_dispersion: f64,
    pub mean_gen_dispersion: f64,
    /// `mean_src_dispersion - mean_gen_dispersion`.
    pub effect: f64,
}

/// Compare two results of the same attribute and statistic, instance by
/// instance, by dispersion.
pub fn monoculture_verdict(
    src: &DispersionResult,
    gen: &DispersionResult,
) -> Result<MonocultureVerdict, MetricsError> {
    if src.attribute_id != gen.attribute_id || src.statistic != gen.statistic {
        return Err(MetricsError::Mismatch(
            format!("{}/{}", src.attribute_id, src.statistic),
            format!("{}/{}", gen.attribute_id, gen.statistic),
        ));
    }
    let stat = src.statistic;
    stat.dispersion(0.0)?;
    let gen_by_id: BTreeMap<&str, f64> = gen
        .per_instance
        .iter()
        .filter_map(|s| Some((s.instance_id.as_str(), s.value?)))
        .collect();
    let mut pairs = Vec::new();
    for s in &src.per_instance {
        if let (Some(a), Some(&b)) = (s.value, gen_by_id.get(s.instance_id.as_str())) {
            pairs.push((stat.dispersion(a)?, stat.dispersion(b)?));
        }
    }
    if pairs.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    let n = pairs.len() as f64;
    let narrower = pairs.iter().filter(|(a, b)| b < a).count();
    let mean_src = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_gen = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(MonocultureVerdict {
        attribute_id: src.attribute_id.clone(),
        statistic: stat,
        src_provenance: src.provenance.clone(),
        gen_provenance: gen.provenance.clone(),
        n_instances: pairs.len(),
        fraction_narrower: narrower as f64 / n,
        aggregate_narrower: mean_gen < mean_src,
        mean_src_dispersion: mean_src,
        mean_gen_dispersion: mean_gen,
        effect: mean_src - mean_gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(id: &str, side: Side, values: Vec<AttributeData>) -> ConditionalSeries {
        ConditionalSeries {
            attribute_id: "sentiment".into(),
            instance_id: id.into(),
            side,
            provenance: side.to_string(),
            response_ids: (0..values.len()).map(|i| format!("{id}-{i}")).collect(),
            values,
        }
    }

    fn result(side: Side, stats: Vec<InstanceStat>) -> DispersionResult {
        dispersion_result(
            "sentiment",
            Statistic::Entropy,
            side,
            &side.to_string(),
            stats,
        )
    }

    fn stat(id: &str, v: f64) -> InstanceStat {
        InstanceStat {
            instance_id: id.into(),
            n: 10,
            value: Some(v),
        }
    }

    #[test]
    fn small_series_are_insufficient() {
        let s = series("a", Side::Src, vec![AttributeData::Binary(1)]);
        assert_eq!(
            instance_statistic(Statistic::Entropy, &s).unwrap().value,
            None
        );
        assert_eq!(
            instance_statistic(Statistic::Mean, &s).unwrap().value,
            Some(1.0)
        );
        assert_eq!(instance_statistic(Statistic::Std, &s).unwrap().value, None);
    }

    #[test]
    fn kinds_checked() {
        let s = series(
            "a",
            Side::Src,
            vec![
                AttributeData::Category("x".into()),
                AttributeData::Category("y".into()),
            ],
        );
        assert_eq!(
            instance_statistic(Statistic::Entropy, &s).unwrap().value,
            Some(1.0)
        );
        assert!(matches!(
            instance_statistic(Statistic::Mean, &s),
            Err(MetricsError::Inapplicable { .. })
        ));
        let mixed = series(
            "a",
            Side::Src,
            vec![AttributeData::Binary(1), AttributeData::Scalar(1.0)],
        );
        assert!(matches!(
            instance_statistic(Statistic::Mean, &mixed),
            Err(MetricsError::MixedKinds(_))
        ));
    }

    #[test]
    fn zero_norm_names_response() {
        let s = series(
            "a",
            Side::Gen,
            vec![
                AttributeData::Embedding(vec![1.0]),
                AttributeData::Embedding(vec![0.0]),
            ],
        );
        assert_eq!(
            instance_statistic(Statistic::MeanPairwiseCosine, &s),
            Err(MetricsError::ZeroNormResponse {
                response_id: "a-1".into()
            })
        );
    }

    #[test]
    fn identical_sides_are_not_narrower() {
        let src = result(Side::Src, vec![stat("a", 1.0), stat("b", 0.5)]);
        let gen = result(Side::Gen, vec![stat("b", 0.5), stat("a", 1.0)]);
        let v = monoculture_verdict(&src, &gen).unwrap();
        assert_eq!(v.fraction_narrower, 0.0);
        assert!(!v.aggregate_narrower);
        assert_eq!(v.effect, 0.0);
    }

    #[test]
    fn bernoulli_versus_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut src = Vec::new();
        let mut gen = Vec::new();
        for i in 0..100 {
            let id = format!("i{i:03}");
            let s: Vec<AttributeData> = (0..20)
                .map(|_| AttributeData::Binary(u8::from(rng.random_bool(0.5))))
                .collect();
            src.push(instance_statistic(Statistic::Entropy, &series(&id, Side::Src, s)).unwrap());
            let g = vec![AttributeData::Binary(1); 20];
            gen.push(instance_statistic(Statistic::Entropy, &series(&id, Side::Gen, g)).unwrap());
        }
        let v = monoculture_verdict(&result(Side::Src, src), &result(Side::Gen, gen)).unwrap();
        assert!(v.aggregate_narrower);
        assert!(v.fraction_narrower >= 0.95);
    }

    #[test]
    fn swap_negates_effect() {
        let a = result(
            Side::Src,
            vec![stat("a", 0.3), stat("b", 0.9), stat("c", 0.1)],
        );
        let b = result(
            Side::Gen,
            vec![stat("a", 0.7), stat("b", 0.2), stat("c", 0.4)],
        );
        let ab = monoculture_verdict(&a, &b).unwrap();
        let ba = monoculture_verdict(&b, &a).unwrap();
        assert_eq!(ab.effect, -ba.effect);
    }

    #[test]
    fn similarity_is_inverted_and_mean_rejected() {
        let mk = |side, v| {
            dispersion_result(
                "alg",
                Statistic::MeanPairwiseJaccard,
                side,
                "p",
                vec![stat("a", v)],
            )
        };
        let v = monoculture_verdict(&mk(Side::Src, 0.1), &mk(Side::Gen, 0.9)).unwrap();
        assert!(v.aggregate_narrower);
        assert!((v.effect - 0.8).abs() < 1e-12);
        let m = dispersion_result("s", Statistic::Mean, Side::Src, "p", vec![stat("a", 0.5)]);
        assert!(matches!(
            monoculture_verdict(&m, &m),
            Err(MetricsError::NotDispersion(_))
        ));
    }

    #[test]
    fn no_overlap_is_an_error() {
        let a = result(Side::Src, vec![stat("a", 1.0)]);
        let b = result(Side::Gen, vec![stat("z", 1.0)]);
        assert_eq!(monoculture_verdict(&a, &b), Err(MetricsError::NoOverlap));
    }

    #[test]
    fn mean_results_carry_distribution() {
        let r = dispersion_result(
            "s",
            Statistic::Mean,
            Side::Gen,
            "p",
            vec![stat("b", 1.0), stat("a", 0.96)],
        );
        assert_eq!(r.per_instance[0].instance_id, "a");
        let d = r.aggregate.distribution.unwrap();
        assert_eq!(d.fractions[19], 1.0);
    }
}
