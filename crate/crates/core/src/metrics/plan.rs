//! Which statistics each attribute gets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Statistic;

/// Analyses over the pooled (unconditional) distribution of one side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Unconditional {
    /// Most frequent labels with their shares.
    TopK { k: usize },
    /// Share of every label.
    Histogram,
    /// Unique word count and word entropy over all response texts.
    WordStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub attribute_id: String,
    #[serde(default)]
    pub statistics: Vec<Statistic>,
    #[serde(default)]
    pub unconditional: Vec<Unconditional>,
    /// Restrict to generated responses accepted at generation time (for code:
    /// judged correct). Source responses are always used.
    #[serde(default)]
    pub accepted_only: bool,
}

impl PlanEntry {
    pub fn new(
        attribute_id: &str,
        statistics: &[Statistic],
        unconditional: &[Unconditional],
    ) -> Self {
        Self {
            attribute_id: attribute_id.into(),
            statistics: statistics.to_vec(),
            unconditional: unconditional.to_vec(),
            accepted_only: false,
        }
    }

    fn correct_only(mut self) -> Self {
        self.accepted_only = true;
        self
    }
}

/// Attribute id reserved for code fingerprints, computed from response text
/// rather than by an extractor.
pub const FINGERPRINT_ATTRIBUTE: &str = "fingerprint";
/// Judge-derived attributes, produced by the judge stage.
pub const JUDGE_ATTRIBUTES: &[&str] = &["correctness", "runtime", "memory"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPlan {
    pub entries: Vec<PlanEntry>,
}

impl MetricPlan {
    /// Review suite: sentiment, topic and word choice.
    pub fn reviews() -> Self {
        use Statistic::*;
        Self {
            entries: vec![
                PlanEntry::new("sentiment", &[Mean, Entropy], &[]),
                PlanEntry::new("topic", &[Entropy], &[Unconditional::TopK { k: 10 }]),
                PlanEntry::new("word_choice", &[UniqueCount], &[Unconditional::WordStats]),
            ],
        }
    }

    /// Code suite. Everything but correctness looks at correct solutions only.
    pub fn code() -> Self {
        use Statistic::*;
        Self {
            entries: vec![
                PlanEntry::new("correctness", &[Mean], &[]),
                PlanEntry::new("time_complexity", &[Entropy], &[Unconditional::Histogram])
                    .correct_only(),
                PlanEntry::new("space_complexity", &[Entropy], &[Unconditional::Histogram])
                    .correct_only(),
                PlanEntry::new("runtime", &[Mean, Std], &[]).correct_only(),
                PlanEntry::new("memory", &[Mean, Std], &[]).correct_only(),
                PlanEntry::new(FINGERPRINT_ATTRIBUTE, &[MeanPairwiseFingerprint], &[])
                    .correct_only(),
                PlanEntry::new("algorithms", &[MeanPairwiseJaccard], &[]).correct_only(),
                PlanEntry::new("data_structures", &[MeanPairwiseJaccard], &[]).correct_only(),
                PlanEntry::new("tags", &[MeanPairwiseJaccard], &[]).correct_only(),
                PlanEntry::new("description", &[MeanPairwiseCosine], &[]).correct_only(),
            ],
        }
    }

    pub fn attribute_ids(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .map(|e| e.attribute_id.as_str())
            .collect()
    }

    /// Problems with the plan given the declared extractor attribute ids.
    pub fn problems(&self, declared: &BTreeSet<String>) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let id = e.attribute_id.as_str();
            if !seen.insert(id) {
                out.push(format!("metric plan lists `{id}` twice"));
            }
            let builtin = id == FINGERPRINT_ATTRIBUTE || JUDGE_ATTRIBUTES.contains(&id);
            if !builtin && !declared.contains(id) {
                out.push(format!(
                    "metric plan references undeclared attribute `{id}`"
                ));
            }
            if e.statistics.contains(&Statistic::MeanPairwiseFingerprint)
                && id != FINGERPRINT_ATTRIBUTE
            {
                out.push(format!(
                    "`{id}`: fingerprint similarity applies only to `{FINGERPRINT_ATTRIBUTE}`"
                ));
            }
            if e.statistics.is_empty() && e.unconditional.is_empty() {
                out.push(format!("`{id}`: no statistics requested"));
            }
        }
        out
    }
}
