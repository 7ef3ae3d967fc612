//! Dispersion statistics over attribute values.
//!
//! Base-2 entropy, population standard deviation, mean pairwise Jaccard and
//! cosine similarity, bucketed distributions of per-instance means, top-k
//! label shares and Gaussian KDE curves. [`dispersion`] builds per-instance
//! results on top of these and compares the two sides.

pub mod dispersion;
pub mod plan;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dispersion::{
    build_series, dispersion_result, instance_statistic, monoculture_verdict, ConditionalSeries,
    DispersionResult, InstanceStat, MonocultureVerdict, Statistic,
};
pub use plan::{MetricPlan, PlanEntry, Unconditional};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("entropy of an empty distribution")]
    EmptyDistribution,
    #[error("vector {index} has zero norm")]
    ZeroNorm { index: usize },
    #[error("vector {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding of response `{response_id}` has zero norm")]
    ZeroNormResponse { response_id: String },
    #[error("bucket width must be > 0, got {0}")]
    BadBucketWidth(f64),
    #[error("k must be >= 1")]
    BadK,
    #[error("KDE needs at least 2 finite values")]
    TooFewValues,
    #[error("bandwidth must be > 0, got {0}")]
    BadBandwidth(f64),
    #[error("statistic {statistic} does not apply to {kind} values")]
    Inapplicable { statistic: String, kind: String },
    #[error("series for `{0}` mixes value kinds")]
    MixedKinds(String),
    #[error("{0} is not a dispersion statistic")]
    NotDispersion(String),
    #[error("cannot compare {0} with {1}")]
    Mismatch(String, String),
    #[error("no instances have a value on both sides")]
    NoOverlap,
}

/// Base-2 entropy of an empirical distribution given by counts.
pub fn shannon_entropy<K>(counts: &BTreeMap<K, usize>) -> Result<f64, MetricsError> {
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(MetricsError::EmptyDistribution);
    }
    let total = total as f64;
    // `0.0 -` keeps a zero entropy from printing as -0.
    Ok(0.0
        - counts
            .values()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                p * p.log2()
            })
            .sum::<f64>())
}

pub fn label_counts<S: AsRef<str>>(labels: &[S]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(l.as_ref().to_string()).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation; `None` below two values.
    pub std: Option<f64>,
}

/// Arithmetic mean and population standard deviation (two-pass). `None` for
/// an empty list.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt());
    Some(MeanStd {
        n: values.len(),
        mean,
        std,
    })
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets counted as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Mean of J over unordered pairs; `None` with fewer than two sets.
pub fn mean_pairwise_jaccard<T: Ord>(sets: &[BTreeSet<T>]) -> Option<f64> {
    if sets.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            sum += jaccard(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    Some(sum / pairs as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch {
            index: 1,
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(MetricsError::ZeroNorm { index: 0 });
    }
    if nb == 0.0 {
        return Err(MetricsError::ZeroNorm { index: 1 });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean cosine similarity over unordered pairs; `Ok(None)` with fewer than
/// two vectors.
pub fn mean_pairwise_cosine(vectors: &[Vec<f64>]) -> Result<Option<f64>, MetricsError> {
    let Some(first) = vectors.first() else {
        return Ok(None);
    };
    let dim = first.len();
    let mut norms = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(MetricsError::DimensionMismatch {
                index,
                expected: dim,
                got: v.len(),
            });
        }
        let n = norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(MetricsError::ZeroNorm { index });
        }
        norms.push(n);
    }
    if vectors.len() < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(x, y)| x * y).sum();
            sum += dot / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(Some(sum / pairs as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub bucket_width: f64,
    /// `(lo, hi]` per bucket; the first bucket also holds 0.
    pub buckets: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl DistributionSummary {
    pub fn labels(&self) -> Vec<String> {
        self.buckets
            .iter()
            .map(|(lo, hi)| format!("({lo:.2},{hi:.2}]"))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub const DEFAULT_BUCKET_WIDTH: f64 = 0.05;

/// Index of the `(lo, hi]` bucket holding `v`, values outside `[0, 1]`
/// clamped to the end buckets.
pub fn bucket_index(v: f64, width: f64, n_buckets: usize) -> usize {
    let raw = (v / width - 1e-9).ceil() - 1.0;
    if raw.is_nan() || raw < 0.0 {
        0
    } else {
        (raw as usize).min(n_buckets - 1)
    }
}

/// Bucketed distribution of per-instance means over `[0, 1]`.
pub fn distribution_of_means(
    means: &[f64],
    bucket_width: f64,
) -> Result<DistributionSummary, MetricsError> {
    if !(bucket_width > 0.0) || bucket_width > 1.0 {
        return Err(MetricsError::BadBucketWidth(bucket_width));
    }
    let n = (1.0 / bucket_width - 1e-9).ceil() as usize;
    let buckets: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                i as f64 * bucket_width,
                ((i + 1) as f64 * bucket_width).min(1.0),
            )
        })
        .collect();
    let mut counts = vec![0usize; n];
    for &m in means {
        counts[bucket_index(m, bucket_width, n)] += 1;
    }
    let total = means.len();
    let fractions = counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        })
        .collect();
    Ok(DistributionSummary {
        bucket_width,
        buckets,
        counts,
        fractions,
    })
}

/// Most frequent labels with their share of all values; ties broken by label.
pub fn unconditional_top_k<S: AsRef<str>>(
    values: &[S],
    k: usize,
) -> Result<Vec<(String, f64)>, MetricsError> {
    if k == 0 {
        return Err(MetricsError::BadK);
    }
    let counts = label_counts(values);
    let total = values.len() as f64;
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(l, c)| (l, c as f64 / total))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub bandwidth: f64,
    /// All inputs were equal; the curve is a narrow spike at that value.
    pub degenerate: bool,
    /// The raw curve's trapezoid mass was off by more than 1% (grid too
    /// coarse for the bandwidth) and was rescaled to 1.
    pub rescaled: bool,
}

pub const KDE_POINTS: usize = 256;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule: `0.9 * min(σ, IQR/1.34) * n^(-1/5)`, using σ alone when
/// the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Gaussian KDE sampled at 256 points over `[min - 3h, max + 3h]`.
pub fn kde(values: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve, MetricsError> {
    if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::TooFewValues);
    }
    if let Some(h) = bandwidth {
        if !(h > 0.0) || !h.is_finite() {
            return Err(MetricsError::BadBandwidth(h));
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = lo == hi;
    let h = match bandwidth {
        Some(h) => h,
        None if degenerate => 1e-3 * lo.abs().max(1.0),
        None => silverman_bandwidth(values),
    };
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (b - a) / (KDE_POINTS - 1) as f64;
    let xs: Vec<f64> = (0..KDE_POINTS).map(|i| a + step * i as f64).collect();
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            values
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect();
    let mass = trapezoid(&xs, &ys);
    let rescaled = (mass - 1.0).abs() > 0.01;
    if rescaled && mass > 0.0 {
        ys.iter_mut().for_each(|y| *y /= mass);
    }
    Ok(KdeCurve {
        xs,
        ys,
        bandwidth: h,
        degenerate,
        rescaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&label_counts(&["a"])).unwrap(), 0.0);
        assert_eq!(shannon_entropy(&label_counts(&["a", "b"])).unwrap(), 1.0);
        let c = BTreeMap::from([("a", 7usize), ("b", 3)]);
        assert!((shannon_entropy(&c).unwrap() - 0.8813).abs() < 1e-4);
        assert_eq!(
            shannon_entropy(&BTreeMap::<String, usize>::new()),
            Err(MetricsError::EmptyDistribution)
        );
    }

    #[test]
    fn mean_std_examples() {
        let m = mean_std(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(m.std, Some(0.0));
        let m = mean_std(&[0.0, 1.0]).unwrap();
        assert_eq!((m.mean, m.std), (0.5, Some(0.5)));
        assert_eq!(mean_std(&[4.0]).unwrap().std, None);
        assert!(mean_std(&[]).is_none());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(
            mean_pairwise_jaccard(&[set(&["a"]), set(&["a"])]),
            Some(1.0)
        );
        assert_eq!(jaccard(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 1.0);
        assert_eq!(jaccard(&set(&[]), &set(&["x"])), 0.0);
        assert_eq!(mean_pairwise_jaccard(&[set(&["a"])]), None);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(
            mean_pairwise_cosine(&[vec![1.0, 2.0], vec![1.0, 2.0]])
                .unwrap()
                .map(|x| (x - 1.0).abs() < 1e-15),
            Some(true)
        );
        assert_eq!(
            mean_pairwise_cosine(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Some(0.0)
        );
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let m = mean_pairwise_cosine(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]])
            .unwrap()
            .unwrap();
        assert!((m - 0.4714).abs() < 1e-4);
        assert_eq!(
            mean_pairwise_cosine(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(MetricsError::ZeroNorm { index: 1 })
        );
        assert!(matches!(
            mean_pairwise_cosine(&[vec![1.0], vec![1.0, 0.0]]),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn buckets() {
        let d = distribution_of_means(&[1.0, 1.0], 0.05).unwrap();
        assert_eq!(d.buckets.len(), 20);
        assert_eq!(d.fractions[19], 1.0);
        assert_eq!(d.labels()[19], "(0.95,1.00]");
        let centers: Vec<f64> = (0..20).map(|i| 0.025 + 0.05 * i as f64).collect();
        let d = distribution_of_means(&centers, 0.05).unwrap();
        assert!(d.fractions.iter().all(|&f| (f - 0.05).abs() < 1e-12));
        // Upper edges belong to the lower bucket.
        for i in 1..=20 {
            assert_eq!(bucket_index(i as f64 * 0.05, 0.05, 20), i - 1);
        }
        assert_eq!(bucket_index(0.0, 0.05, 20), 0);
        assert_eq!(bucket_index(0.9500001, 0.05, 20), 19);
        assert!(distribution_of_means(&[], 0.0).is_err());
    }

    #[test]
    fn top_k() {
        assert_eq!(
            unconditional_top_k(&["x"], 3).unwrap(),
            vec![("x".to_string(), 1.0)]
        );
        let v = ["a", "a", "a", "b", "b", "c"];
        assert_eq!(
            unconditional_top_k(&v, 2).unwrap(),
            vec![("a".to_string(), 0.5), ("b".to_string(), 2.0 / 6.0)]
        );
        assert_eq!(unconditional_top_k(&["b", "a"], 1).unwrap()[0].0, "a");
        assert_eq!(unconditional_top_k(&v, 0), Err(MetricsError::BadK));
    }

    #[test]
    fn kde_symmetric_and_normalised() {
        let c = kde(&[-1.0, 1.0], None).unwrap();
        for i in 0..KDE_POINTS {
            assert!((c.ys[i] - c.ys[KDE_POINTS - 1 - i]).abs() < 1e-12);
        }
        assert!((trapezoid(&c.xs, &c.ys) - 1.0).abs() <= 0.01);
        let d = kde(&[2.0, 2.0, 2.0], None).unwrap();
        assert!(d.degenerate);
        assert!((trapezoid(&d.xs, &d.ys) - 1.0).abs() <= 0.01);
        assert_eq!(kde(&[1.0], None), Err(MetricsError::TooFewValues));
    }

    #[test]
    fn kde_standard_normal_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let c = kde(&xs, None).unwrap();
        let i =
            c.xs.iter()
                .enumerate()
                .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap()
                .0;
        // Interpolate to x = 0 between neighbouring grid points.
        let (j, k) = if c.xs[i] <= 0.0 {
            (i, i + 1)
        } else {
            (i - 1, i)
        };
        let t = -c.xs[j] / (c.xs[k] - c.xs[j]);
        let y0 = c.ys[j] + t * (c.ys[k] - c.ys[j]);
        assert!((y0 - 0.3989).abs() < 0.03, "{y0}");
        assert!(!c.rescaled);
    }

    proptest! {
        #[test]
        fn kde_mass_is_one(values in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            let c = kde(&values, None).unwrap();
            let m = trapezoid(&c.xs, &c.ys);
            prop_assert!((0.99..=1.01).contains(&m), "{}", m);
        }

        #[test]
        fn entropy_bounded_by_log_support(counts in prop::collection::vec(1usize..20, 1..12)) {
            let m: BTreeMap<usize, usize> = counts.iter().copied().enumerate().collect();
            let h = shannon_entropy(&m).unwrap();
            let max = (counts.len() as f64).log2();
            prop_assert!(h <= max + 1e-12);
            let uniform = counts.iter().all(|&c| c == counts[0]);
            prop_assert_eq!(uniform, (h - max).abs() < 1e-12);
        }

        #[test]
        fn pairwise_means_permutation_invariant(
            sets in prop::collection::vec(prop::collection::btree_set(0u8..6, 0..5), 2..7),
            rot in 0usize..7,
        ) {
            let mut shuffled = sets.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let a = mean_pairwise_jaccard(&sets).unwrap();
            let b = mean_pairwise_jaccard(&shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
