//! Declarative run configuration. Every knob has a documented default; the
//! defaults are the values used for the full-scale review and code studies.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gemometer_core::attributes::ExtractorSpec;
use gemometer_core::client::ClientSpec;
use gemometer_core::dataset::TaskKind;
use gemometer_core::fingerprint::WinnowParams;
use gemometer_core::generation::{
    persona_variants, sampling_grid, GenerationConfig, PromptTemplate, CODE_MAX_NEW_TOKENS,
    CODE_TEMPERATURES, CODE_TOP_PS, PERSONAS, REVIEW_MAX_NEW_TOKENS, REVIEW_TEMPERATURES,
    REVIEW_TOP_PS,
};
use gemometer_core::judge::{parse_command_template, JudgeSettings, RunLimits};
use gemometer_core::metrics::plan::{FINGERPRINT_ATTRIBUTE, JUDGE_ATTRIBUTES};
use gemometer_core::metrics::{MetricPlan, PlanEntry};
use gemometer_core::sampling::DecaySchedule;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n{}", .0.iter().map(|p| format!("  - {p}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Stage-internal parallelism.
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub dataset: DatasetPaths,
    #[serde(default)]
    pub filters: Filters,
    #[serde(default)]
    pub generation: Option<GenerationSection>,
    #[serde(default)]
    pub extractors: Vec<ExtractorSpec>,
    #[serde(default)]
    pub judge: Option<JudgeSection>,
    #[serde(default)]
    pub fingerprint: FingerprintSection,
    /// Defaults to the shipped review and code plans, restricted to the
    /// attributes this run produces.
    #[serde(default)]
    pub metric_plan: Option<Vec<PlanEntry>>,
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub reviews: Option<PathBuf>,
    pub code: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceFilter {
    /// Instances whose raw source-response count falls outside
    /// `[min_responses, max_responses]` are dropped.
    pub min_responses: usize,
    pub max_responses: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Source responses kept per instance after filtering.
    pub sample_per_instance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Filters {
    pub reviews: SourceFilter,
    pub code: SourceFilter,
    /// Generated reviews with perplexity above this are dropped.
    pub perplexity_threshold: f64,
}

impl Default for Filters {
    fn default() -> Self {
        Self {
            reviews: SourceFilter {
                min_responses: 1000,
                max_responses: 2500,
                min_words: 300,
                max_words: 700,
                sample_per_instance: Some(10),
            },
            code: SourceFilter {
                min_responses: 0,
                max_responses: usize::MAX,
                min_words: 0,
                max_words: usize::MAX,
                sample_per_instance: Some(20),
            },
            perplexity_threshold: 20.0,
        }
    }
}

impl Default for SourceFilter {
    fn default() -> Self {
        Filters::default().reviews
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub endpoint: String,
    /// JSONL replay cache of completions; relative to the config file.
    pub replay_cache: Option<PathBuf>,
    /// Fail on replay-cache misses instead of calling the endpoint.
    #[serde(default)]
    pub offline: bool,
    /// Scores generated reviews for the perplexity filter.
    pub perplexity_endpoint: Option<String>,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rate")]
    pub rate_limit: f64,
    /// Judge code generations and stop once enough are correct.
    #[serde(default = "yes")]
    pub accept_correct_only: bool,
    #[serde(default)]
    pub sweeps: Vec<SweepSpec>,
}

fn default_timeout() -> u64 {
    60_000
}
fn default_retries() -> u32 {
    3
}
fn default_rate() -> f64 {
    5.0
}
fn yes() -> bool {
    true
}

/// A sampling grid for one model and task; expands to one generation config
/// per (temperature, top-p[, persona]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub task: TaskKind,
    pub model_id: String,
    pub template_id: Option<String>,
    pub temperatures: Option<Vec<f64>>,
    pub top_ps: Option<Vec<f64>>,
    /// Non-empty switches to the persona template; `["*"]` uses the built-in list.
    #[serde(default)]
    pub personas: Vec<String>,
    pub samples_per_instance: Option<u32>,
    pub max_new_tokens: Option<u32>,
    /// Draw budget per code instance.
    pub budget_k: Option<u32>,
    pub decay: Option<DecaySchedule>,
}

impl SweepSpec {
    pub fn configs(&self) -> Vec<GenerationConfig> {
        let (mut base, temps, top_ps) = match self.task {
            TaskKind::Review => (
                GenerationConfig::review(&self.model_id, 1.0, 1.0),
                REVIEW_TEMPERATURES,
                REVIEW_TOP_PS,
            ),
            TaskKind::Code => (
                GenerationConfig::code(&self.model_id, 1.0, 1.0, self.budget_k.unwrap_or(100)),
                CODE_TEMPERATURES,
                CODE_TOP_PS,
            ),
        };
        if let Some(t) = &self.template_id {
            base.template_id = t.clone();
        }
        if let Some(n) = self.samples_per_instance {
            base.samples_per_instance = n;
        }
        base.max_new_tokens = self.max_new_tokens.unwrap_or(match self.task {
            TaskKind::Review => REVIEW_MAX_NEW_TOKENS,
            TaskKind::Code => CODE_MAX_NEW_TOKENS,
        });
        base.decay = self.decay;
        let grid = sampling_grid(
            &base,
            self.temperatures.as_deref().unwrap_or(temps),
            self.top_ps.as_deref().unwrap_or(top_ps),
        );
        if self.personas.is_empty() {
            return grid;
        }
        let personas: Vec<&str> = if self.personas == ["*"] {
            PERSONAS.to_vec()
        } else {
            self.personas.iter().map(String::as_str).collect()
        };
        grid.iter()
            .flat_map(|c| persona_variants(c, &personas))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSection {
    #[serde(default = "default_interpreter")]
    pub interpreter: String,
    #[serde(default)]
    pub limits: RunLimits,
    /// Solutions judged concurrently; 1 is serial mode.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_interpreter() -> String {
    "python3 {file}".into()
}

impl JudgeSection {
    pub fn settings(&self) -> JudgeSettings {
        JudgeSettings {
            interpreter: parse_command_template(&self.interpreter),
            limits: self.limits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerprintSection {
    pub k: usize,
    pub w: usize,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        let p = WinnowParams::default();
        Self { k: p.k, w: p.w }
    }
}

impl RunConfig {
    /// Parse, resolve relative paths against the file's directory, validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        let problems = cfg.problems();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.dataset.reviews.as_mut().map(fix);
        self.dataset.code.as_mut().map(fix);
        if let Some(g) = &mut self.generation {
            g.replay_cache.as_mut().map(fix);
        }
    }

    pub fn client_spec(&self) -> Option<ClientSpec> {
        let g = self.generation.as_ref()?;
        let mut spec = ClientSpec::new(g.endpoint.clone());
        spec.auth_env = g.auth_env.clone();
        spec.request_timeout_ms = g.request_timeout_ms;
        spec.max_retries = g.max_retries;
        spec.rate_limit = g.rate_limit;
        Some(spec)
    }

    pub fn generation_configs(&self) -> Vec<GenerationConfig> {
        self.generation
            .iter()
            .flat_map(|g| &g.sweeps)
            .flat_map(SweepSpec::configs)
            .collect()
    }

    pub fn winnow_params(&self) -> WinnowParams {
        WinnowParams {
            k: self.fingerprint.k,
            w: self.fingerprint.w,
        }
    }

    pub fn has_code(&self) -> bool {
        self.dataset.code.is_some()
    }

    /// Attribute ids this run produces.
    pub fn declared_attributes(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self
            .extractors
            .iter()
            .map(|e| e.attribute_id.clone())
            .collect();
        if self.has_code() {
            out.insert(FINGERPRINT_ATTRIBUTE.into());
            if self.judge.is_some() {
                out.extend(JUDGE_ATTRIBUTES.iter().map(|s| s.to_string()));
            }
        }
        out
    }

    pub fn metric_plan(&self) -> MetricPlan {
        if let Some(entries) = &self.metric_plan {
            return MetricPlan {
                entries: entries.clone(),
            };
        }
        let declared = self.declared_attributes();
        let entries = MetricPlan::reviews()
            .entries
            .into_iter()
            .chain(MetricPlan::code().entries)
            .filter(|e| declared.contains(&e.attribute_id))
            .collect();
        MetricPlan { entries }
    }

    /// Every problem with the configuration; empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.workers == 0 {
            out.push("workers must be >= 1".into());
        }
        if self.dataset.reviews.is_none() && self.dataset.code.is_none() {
            out.push("dataset: at least one of `reviews` or `code` is required".into());
        }
        for p in [&self.dataset.reviews, &self.dataset.code]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                out.push(format!("dataset file {} does not exist", p.display()));
            }
        }
        for (name, f) in [
            ("reviews", &self.filters.reviews),
            ("code", &self.filters.code),
        ] {
            if f.min_words > f.max_words {
                out.push(format!(
                    "filters.{name}: min_words {} > max_words {}",
                    f.min_words, f.max_words
                ));
            }
            if f.min_responses > f.max_responses {
                out.push(format!(
                    "filters.{name}: min_responses {} > max_responses {}",
                    f.min_responses, f.max_responses
                ));
            }
            if f.sample_per_instance == Some(0) {
                out.push(format!("filters.{name}: sample_per_instance must be >= 1"));
            }
        }
        if !(self.filters.perplexity_threshold > 0.0) {
            out.push(format!(
                "filters.perplexity_threshold must be > 0, got {}",
                self.filters.perplexity_threshold
            ));
        }
        if let Some(g) = &self.generation {
            if let Some(spec) = self.client_spec() {
                if let Err(e) = spec.validate() {
                    out.push(format!("generation: {e}"));
                }
            }
            if g.sweeps.is_empty() {
                out.push("generation: no sweeps configured".into());
            }
            if g.offline && g.replay_cache.as_ref().is_none_or(|p| !p.is_file()) {
                out.push("generation: offline mode needs an existing replay_cache file".into());
            }
            if self.dataset.reviews.is_some()
                && g.sweeps.iter().any(|s| s.task == TaskKind::Review)
                && g.perplexity_endpoint.is_none()
            {
                out.push("generation: review sweeps need a perplexity_endpoint for the perplexity filter".into());
            }
            for (i, s) in g.sweeps.iter().enumerate() {
                if let Some(t) = &s.template_id {
                    if PromptTemplate::builtin(t).is_err() {
                        out.push(format!("generation.sweeps[{i}]: unknown template `{t}`"));
                    }
                }
                if s.task == TaskKind::Code && self.dataset.code.is_none() {
                    out.push(format!(
                        "generation.sweeps[{i}]: code sweep without a code dataset"
                    ));
                }
                if s.task == TaskKind::Review && self.dataset.reviews.is_none() {
                    out.push(format!(
                        "generation.sweeps[{i}]: review sweep without a review dataset"
                    ));
                }
                for c in s.configs() {
                    if let Err(e) = c.validate() {
                        out.push(format!("generation.sweeps[{i}]: {e}"));
                        break;
                    }
                }
            }
            if g.accept_correct_only
                && g.sweeps.iter().any(|s| s.task == TaskKind::Code)
                && self.judge.is_none()
            {
                out.push("generation: accept_correct_only needs a [judge] section".into());
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.extractors {
            if !seen.insert(&e.attribute_id) {
                out.push(format!("extractor `{}` declared twice", e.attribute_id));
            }
            let reserved = e.attribute_id == FINGERPRINT_ATTRIBUTE
                || JUDGE_ATTRIBUTES.contains(&e.attribute_id.as_str());
            if reserved {
                out.push(format!(
                    "extractor `{}` uses a reserved attribute id",
                    e.attribute_id
                ));
            }
            out.extend(e.problems());
        }
        if let Some(j) = &self.judge {
            if let Err(e) = j.limits.validate() {
                out.push(format!("judge: {e}"));
            }
            if !j.interpreter.contains("{file}") {
                out.push("judge: interpreter must contain `{file}`".into());
            }
            if j.workers == 0 {
                out.push("judge: workers must be >= 1".into());
            }
        }
        if let Err(e) = WinnowParams::new(self.fingerprint.k, self.fingerprint.w) {
            out.push(format!("fingerprint: {e}"));
        }
        out.extend(self.metric_plan().problems(&self.declared_attributes()));
        out
    }
}
