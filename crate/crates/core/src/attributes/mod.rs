//! Attribute extraction: map a response string to a typed value.
//!
//! Local extractors (word statistics) run in-process. Remote extractors talk
//! to classifier, topic, embedding or summary services; every remote result
//! is cached permanently keyed by attribute, extractor version and text, so a
//! rerun against the cache makes no network calls.

pub mod labels;
pub mod text;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{ClientSpec, RetryPolicy, Transport, TransportError};
use crate::dataset::{ResponseRecord, TaskKind};
use crate::util::sha256_fields;

pub use labels::{canonicalize_complexity, parse_labeled_lines, ComplexityClass, LabeledLines};
pub use text::{
    normalize_text, unique_word_count, word_distribution_entropy, word_frequency_table,
};

pub const PROMPT_CODE_SUMMARY: &str = include_str!("../../data/prompt_code_summary.txt");
pub const PROMPT_ALGORITHMS_DATA_STRUCTURES: &str =
    include_str!("../../data/prompt_algorithms_data_structures.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum AttributeData {
    Binary(u8),
    Category(String),
    LabelSet(BTreeSet<String>),
    Scalar(f64),
    Embedding(Vec<f64>),
}

impl AttributeData {
    pub fn kind(&self) -> AttributeKind {
        match self {
            AttributeData::Binary(_) => AttributeKind::Binary,
            AttributeData::Category(_) => AttributeKind::Category,
            AttributeData::LabelSet(_) => AttributeKind::LabelSet,
            AttributeData::Scalar(_) => AttributeKind::Scalar,
            AttributeData::Embedding(_) => AttributeKind::Embedding,
        }
    }

    /// Numeric view for binary and scalar values.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AttributeData::Binary(b) => Some(f64::from(*b)),
            AttributeData::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    /// Categorical view: the label itself, or the binary digit.
    pub fn as_label(&self) -> Option<String> {
        match self {
            AttributeData::Category(c) => Some(c.clone()),
            AttributeData::Binary(b) => Some(b.to_string()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Binary,
    Category,
    LabelSet,
    Scalar,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub attribute_id: String,
    #[serde(flatten)]
    pub data: AttributeData,
}

impl AttributeValue {
    pub fn new(attribute_id: impl Into<String>, data: AttributeData) -> Self {
        Self {
            attribute_id: attribute_id.into(),
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    LocalPipeline,
    RemoteClassifier,
    RemoteEmbedding,
    RemoteTopic,
    RemoteSummary,
}

/// Which local statistic a `local_pipeline` extractor computes.
pub const LOCAL_FIELDS: &[&str] = &["unique_words", "word_count", "lemmas"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub attribute_id: String,
    pub mode: ExtractorMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub whitelist: Option<Vec<String>>,
    /// For summaries: `code_summary`, `algorithms_data_structures`, or an
    /// inline template containing `{code}`.
    #[serde(default)]
    pub prompt_template: Option<String>,
    /// Local statistic name, or the summary line to read (e.g. `algorithms`,
    /// `time complexity`, `description`).
    #[serde(default)]
    pub field: Option<String>,
    /// Summary model id sent in the completion request.
    #[serde(default)]
    pub model: Option<String>,
    /// If set, the extracted summary text is embedded by this endpoint.
    #[serde(default)]
    pub embed_endpoint: Option<String>,
    #[serde(default)]
    pub applies_to: Option<TaskKind>,
    #[serde(default = "default_version")]
    pub version: String,
}

fn default_version() -> String {
    "1".to_string()
}

impl ExtractorSpec {
    pub fn local(attribute_id: &str, field: &str) -> Self {
        Self {
            attribute_id: attribute_id.into(),
            mode: ExtractorMode::LocalPipeline,
            endpoint: None,
            whitelist: None,
            prompt_template: None,
            field: Some(field.into()),
            model: None,
            embed_endpoint: None,
            applies_to: None,
            version: default_version(),
        }
    }

    pub fn remote(attribute_id: &str, mode: ExtractorMode, endpoint: &str) -> Self {
        Self {
            mode,
            endpoint: Some(endpoint.into()),
            field: None,
            ..Self::local(attribute_id, "")
        }
    }

    /// All problems with this spec (empty when valid).
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let id = &self.attribute_id;
        if id.is_empty() {
            out.push("extractor with empty attribute_id".into());
        }
        match self.mode {
            ExtractorMode::LocalPipeline => match self.field.as_deref() {
                Some(f) if LOCAL_FIELDS.contains(&f) => {}
                other => out.push(format!(
                    "extractor `{id}`: unknown local pipeline field {other:?}"
                )),
            },
            _ => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    out.push(format!(
                        "extractor `{id}`: remote mode requires an endpoint"
                    ));
                }
            }
        }
        if self.mode == ExtractorMode::RemoteSummary && self.field.is_none() {
            out.push(format!(
                "extractor `{id}`: summary extractor needs a `field`"
            ));
        }
        out
    }

    fn prompt(&self) -> &str {
        match self.prompt_template.as_deref() {
            None | Some("algorithms_data_structures") => PROMPT_ALGORITHMS_DATA_STRUCTURES,
            Some("code_summary") => PROMPT_CODE_SUMMARY,
            Some(inline) => inline,
        }
    }

    fn whitelist_set(&self) -> Option<BTreeSet<String>> {
        if let Some(wl) = &self.whitelist {
            return Some(wl.iter().map(|s| s.trim().to_lowercase()).collect());
        }
        let field = self.field.as_deref()?.to_lowercase();
        match field.as_str() {
            "algorithms" => Some(labels::whitelist(labels::ALGORITHMS)),
            "data structures" => Some(labels::whitelist(labels::DATA_STRUCTURES)),
            "tags" => Some(labels::whitelist(labels::TAGS)),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("extractor `{attribute_id}`: {source}")]
    Transport {
        attribute_id: String,
        #[source]
        source: TransportError,
    },
    #[error("extractor `{attribute_id}`: malformed response: {message}")]
    Malformed {
        attribute_id: String,
        message: String,
    },
    #[error("extractor `{0}` is misconfigured: {1}")]
    Config(String, String),
    #[error("cache I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    version: String,
    value: AttributeValue,
}

/// Append-only JSONL cache of extraction results. Many readers, one writer.
pub struct ExtractionCache {
    entries: RwLock<HashMap<String, AttributeValue>>,
    writer: Option<Mutex<BufWriter<File>>>,
}

impl ExtractionCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            writer: None,
        }
    }

    /// Load the cache at `path` (if present) and append new entries to it.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(c) => {
                        entries.insert(c.key, c.value);
                    }
                    // A torn final line from an interrupted run; skip it.
                    Err(e) => log::warn!("{}: skipping cache line {}: {e}", path.display(), i + 1),
                }
            }
        } else if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn key(attribute_id: &str, version: &str, text: &str) -> String {
        sha256_fields([attribute_id, version, text])
    }

    pub fn get(&self, key: &str) -> Option<AttributeValue> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: String, version: &str, value: AttributeValue) -> std::io::Result<()> {
        if let Some(w) = &self.writer {
            let mut w = w.lock().unwrap();
            let line = CacheLine {
                key: key.clone(),
                version: version.to_string(),
                value: value.clone(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries.write().unwrap().insert(key, value);
        Ok(())
    }
}

/// Shared context for remote extraction.
pub struct Extractor<'a> {
    pub transport: &'a dyn Transport,
    pub retry: RetryPolicy,
    pub cache: &'a ExtractionCache,
}

impl<'a> Extractor<'a> {
    pub fn new(transport: &'a dyn Transport, cache: &'a ExtractionCache) -> Self {
        Self {
            transport,
            retry: ClientSpec::new("stub://").retry_policy(),
            cache,
        }
    }

    fn call(
        &self,
        spec: &ExtractorSpec,
        endpoint: &str,
        body: &Value,
    ) -> Result<Value, ExtractionError> {
        self.retry
            .run(|| self.transport.post_json(endpoint, body))
            .map_err(|source| ExtractionError::Transport {
                attribute_id: spec.attribute_id.clone(),
                source,
            })
    }

    fn malformed(spec: &ExtractorSpec, message: impl Into<String>) -> ExtractionError {
        ExtractionError::Malformed {
            attribute_id: spec.attribute_id.clone(),
            message: message.into(),
        }
    }

    fn remote_value(
        &self,
        spec: &ExtractorSpec,
        endpoint: &str,
        text: &str,
    ) -> Result<AttributeData, ExtractionError> {
        let resp = self.call(spec, endpoint, &json!({ "text": text }))?;
        let data: AttributeData =
            serde_json::from_value(resp).map_err(|e| Self::malformed(spec, e.to_string()))?;
        normalize_received(spec, data)
    }

    /// Raw summary text for (prompt, model, code); cached separately so several
    /// attributes read from one completion.
    fn summary_text(&self, spec: &ExtractorSpec, code: &str) -> Result<String, ExtractionError> {
        let prompt = spec.prompt().replace("{code}", code);
        let model = spec.model.clone().unwrap_or_else(|| "summary-model".into());
        let key = sha256_fields(["__summary__", model.as_str(), prompt.as_str()]);
        if let Some(AttributeValue {
            data: AttributeData::Category(t),
            ..
        }) = self.cache.get(&key)
        {
            return Ok(t);
        }
        let body = json!({ "model": model, "prompt": prompt, "temperature": 0.0, "top_p": 1.0, "max_tokens": 500, "n": 1 });
        let resp = self.call(spec, spec.endpoint.as_deref().unwrap_or_default(), &body)?;
        let text = resp["choices"][0]["text"]
            .as_str()
            .ok_or_else(|| Self::malformed(spec, "completion response lacks choices[0].text"))?
            .to_string();
        self.cache.put(
            key,
            "summary",
            AttributeValue::new("__summary__", AttributeData::Category(text.clone())),
        )?;
        Ok(text)
    }

    fn summary_value(
        &self,
        spec: &ExtractorSpec,
        code: &str,
    ) -> Result<AttributeData, ExtractionError> {
        let summary = self.summary_text(spec, code)?;
        let field = spec.field.as_deref().unwrap_or_default().to_lowercase();
        match field.as_str() {
            "algorithms" | "data structures" | "tags" => {
                let wl: BTreeMap<String, BTreeSet<String>> = spec
                    .whitelist_set()
                    .map(|w| BTreeMap::from([(field.clone(), w)]))
                    .unwrap_or_default();
                let parsed = parse_labeled_lines(&summary, &[field.as_str()], &wl);
                Ok(AttributeData::LabelSet(
                    parsed.labels.into_values().next().unwrap_or_default(),
                ))
            }
            "time complexity" | "space complexity" => {
                let raw = labels::parse_field(&summary, &field).unwrap_or_default();
                Ok(AttributeData::Category(
                    canonicalize_complexity(&raw).label().to_string(),
                ))
            }
            _ => {
                let raw = labels::parse_field(&summary, &field).unwrap_or_default();
                match &spec.embed_endpoint {
                    Some(ep) => self.remote_value(spec, ep, &raw),
                    None => Ok(AttributeData::Category(raw)),
                }
            }
        }
    }

    /// Extract one attribute from one text.
    pub fn extract(
        &self,
        spec: &ExtractorSpec,
        text: &str,
    ) -> Result<AttributeValue, ExtractionError> {
        if let Some(p) = spec.problems().into_iter().next() {
            return Err(ExtractionError::Config(spec.attribute_id.clone(), p));
        }
        let key = ExtractionCache::key(&spec.attribute_id, &spec.version, text);
        if let Some(v) = self.cache.get(&key) {
            return Ok(v);
        }
        let data = match spec.mode {
            ExtractorMode::LocalPipeline => {
                let v = local_value(spec.field.as_deref().unwrap_or_default(), text);
                // Local values are cheap and deterministic; no need to persist.
                return Ok(AttributeValue::new(spec.attribute_id.clone(), v));
            }
            ExtractorMode::RemoteSummary => self.summary_value(spec, text)?,
            _ => self.remote_value(spec, spec.endpoint.as_deref().unwrap_or_default(), text)?,
        };
        let value = AttributeValue::new(spec.attribute_id.clone(), data);
        self.cache.put(key, &spec.version, value.clone())?;
        Ok(value)
    }
}

fn normalize_received(
    spec: &ExtractorSpec,
    data: AttributeData,
) -> Result<AttributeData, ExtractionError> {
    match data {
        AttributeData::Binary(b) if b > 1 => Err(Extractor::malformed(
            spec,
            format!("binary value {b} outside {{0,1}}"),
        )),
        AttributeData::Embedding(v) => {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Extractor::malformed(
                    spec,
                    "embedding has zero or non-finite norm",
                ));
            }
            Ok(AttributeData::Embedding(
                v.into_iter().map(|x| x / norm).collect(),
            ))
        }
        AttributeData::LabelSet(set) => match spec.whitelist_set() {
            Some(wl) => Ok(AttributeData::LabelSet(
                set.into_iter()
                    .map(|s| s.to_lowercase())
                    .filter(|s| wl.contains(s))
                    .collect(),
            )),
            None => Ok(AttributeData::LabelSet(set)),
        },
        other => Ok(other),
    }
}

fn local_value(field: &str, text: &str) -> AttributeData {
    match field {
        "word_count" => AttributeData::Scalar(crate::dataset::word_count(text) as f64),
        "lemmas" => AttributeData::LabelSet(normalize_text(&[text]).into_iter().collect()),
        _ => {
            let table = word_frequency_table(&normalize_text(&[text]));
            AttributeData::Scalar(unique_word_count(&table) as f64)
        }
    }
}

/// One extracted value, tied to its response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedRecord {
    pub response_id: String,
    pub value: AttributeValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionFailure {
    pub response_id: String,
    pub attribute_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionOutcome {
    pub records: Vec<ExtractedRecord>,
    pub failures: Vec<ExtractionFailure>,
}

/// Run every applicable extractor over every response on a bounded pool.
/// Output order follows (extractor, response) input order.
pub fn extract_all(
    extractor: &Extractor<'_>,
    specs: &[ExtractorSpec],
    responses: &[&ResponseRecord],
    kind_of: impl Fn(&str) -> Option<TaskKind> + Sync,
    workers: usize,
) -> ExtractionOutcome {
    use rayon::prelude::*;
    let jobs: Vec<(&ExtractorSpec, &ResponseRecord)> = specs
        .iter()
        .flat_map(|s| responses.iter().map(move |r| (s, *r)))
        .filter(|(s, r)| s.applies_to.is_none() || s.applies_to == kind_of(&r.instance_id))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<ExtractedRecord, ExtractionFailure>> = pool.install(|| {
        jobs.par_iter()
            .map(|(spec, r)| {
                extractor
                    .extract(spec, &r.text)
                    .map(|value| ExtractedRecord {
                        response_id: r.response_id.clone(),
                        value,
                    })
                    .map_err(|e| ExtractionFailure {
                        response_id: r.response_id.clone(),
                        attribute_id: spec.attribute_id.clone(),
                        error: e.to_string(),
                    })
            })
            .collect()
    });
    let mut out = ExtractionOutcome::default();
    for r in results {
        match r {
            Ok(v) => out.records.push(v),
            Err(f) => {
                log::warn!("extraction failed for {}: {}", f.response_id, f.error);
                out.failures.push(f);
            }
        }
    }
    out
}
