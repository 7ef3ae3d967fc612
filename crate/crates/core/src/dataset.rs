//! Paired source/generated response sets: ingestion, curation filters,
//! per-instance sampling and canonical JSONL persistence.
//!
//! A dataset holds task instances (a book title or a programming problem) and
//! responses on two sides: `src` (human-written) and `gen` (model output).
//! Filters are pure transformations; they never delete an instance because
//! its responses were filtered away, they record a [`Note`] instead so the
//! attrition stays visible in reports.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::sampling::DecaySchedule;
use crate::util::fnv1a64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid JSON: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate response_id `{id}`")]
    DuplicateResponse { line: usize, id: String },
    #[error("line {line}: duplicate instance_id `{id}`")]
    DuplicateInstance { line: usize, id: String },
    #[error("line {line}: response `{response_id}` references unknown instance `{instance_id}`")]
    UnknownInstance {
        line: usize,
        response_id: String,
        instance_id: String,
    },
    #[error("generated response `{0}` has no perplexity value")]
    MissingPerplexity(String),
    #[error("invalid filter bounds: {0}")]
    BadBounds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Review,
    Code,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Src,
    Gen,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Src => "src",
            Side::Gen => "gen",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub expected_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub instance_id: String,
    pub task_kind: TaskKind,
    /// Book title for reviews, problem statement for code.
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_cases: Option<Vec<TestCase>>,
}

/// Everything needed to reissue the request that produced a generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfigRef {
    pub model_id: String,
    pub template_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecaySchedule>,
}

impl GenerationConfigRef {
    /// Canonical grouping key. Two records share a conditional distribution
    /// iff they share this key (and instance and side).
    pub fn key(&self) -> String {
        let decay = match &self.decay {
            Some(d) => format!("{}->{}@{}", d.t_start, d.t_end, d.steps),
            None => "none".to_string(),
        };
        format!(
            "{}|{}|{}|T={}|p={}|max={}|decay={}",
            self.model_id,
            self.template_id,
            self.persona.as_deref().unwrap_or("-"),
            self.temperature,
            self.top_p,
            self.max_new_tokens,
            decay
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Provenance {
    Source(String),
    Generated(GenerationConfigRef),
}

impl Provenance {
    pub const DEFAULT_SOURCE_TAG: &'static str = "source";

    pub fn key(&self) -> String {
        match self {
            Provenance::Source(tag) => tag.clone(),
            Provenance::Generated(cfg) => cfg.key(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub response_id: String,
    pub instance_id: String,
    pub side: Side,
    pub text: String,
    pub word_count: usize,
    pub perplexity: Option<f64>,
    pub provenance: Provenance,
}

impl ResponseRecord {
    pub fn new(
        response_id: impl Into<String>,
        instance_id: impl Into<String>,
        side: Side,
        text: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        let text = text.into();
        Self {
            response_id: response_id.into(),
            instance_id: instance_id.into(),
            side,
            word_count: word_count(&text),
            text,
            perplexity: None,
            provenance,
        }
    }
}

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Fraction of characters in `text` that are ASCII. Optional heuristic for
/// spotting non-English titles; not applied by default.
pub fn ascii_ratio(text: &str) -> f64 {
    let total = text.chars().count();
    if total == 0 {
        return 1.0;
    }
    text.chars().filter(char::is_ascii).count() as f64 / total as f64
}

/// Attrition and sampling events recorded by the transformations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Note {
    /// A side that had responses before a filter has none after it.
    Emptied {
        instance_id: String,
        side: Side,
        stage: String,
    },
    /// Fewer responses were available than requested.
    Undersupplied {
        instance_id: String,
        side: Side,
        requested: usize,
        available: usize,
    },
    /// A filter dropped every remaining instance.
    AllInstancesDropped { stage: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    ReviewJsonl,
    CodeJsonl,
    /// Either kind per line; what `persist` writes for combined datasets.
    Mixed,
}

impl Schema {
    fn task_kind(self) -> Option<TaskKind> {
        match self {
            Schema::ReviewJsonl => Some(TaskKind::Review),
            Schema::CodeJsonl => Some(TaskKind::Code),
            Schema::Mixed => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedDataset {
    pub instances: Vec<TaskInstance>,
    pub responses: Vec<ResponseRecord>,
    pub notes: BTreeSet<Note>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub min_words: usize,
    pub max_words: usize,
    pub min_responses: usize,
    pub max_responses: usize,
    pub perplexity_threshold: f64,
}

impl Default for FilterSpec {
    /// Review-curation values: 1,000-2,500 reviews per book, 300-700 words,
    /// perplexity <= 20.
    fn default() -> Self {
        Self {
            min_words: 300,
            max_words: 700,
            min_responses: 1000,
            max_responses: 2500,
            perplexity_threshold: 20.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.min_words > self.max_words {
            return Err(DatasetError::BadBounds(format!(
                "min_words {} > max_words {}",
                self.min_words, self.max_words
            )));
        }
        if self.min_responses > self.max_responses {
            return Err(DatasetError::BadBounds(format!(
                "min_responses {} > max_responses {}",
                self.min_responses, self.max_responses
            )));
        }
        if !(self.perplexity_threshold > 0.0) {
            return Err(DatasetError::BadBounds(format!(
                "perplexity threshold {} must be > 0",
                self.perplexity_threshold
            )));
        }
        Ok(())
    }
}

/// Per-(instance, provenance) count of generations surviving the perplexity filter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidFraction {
    pub instance_id: String,
    pub provenance: String,
    pub kept: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidFractionTable {
    pub rows: Vec<ValidFraction>,
}

impl ValidFractionTable {
    pub fn get(&self, instance_id: &str, provenance: &str) -> Option<&ValidFraction> {
        self.rows
            .iter()
            .find(|r| r.instance_id == instance_id && r.provenance == provenance)
    }

    /// Mean of the per-instance fractions for one provenance.
    pub fn mean_for(&self, provenance: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.provenance == provenance)
            .map(|r| r.fraction)
            .collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }
}

/// Key of a conditional response set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub instance_id: String,
    pub side: Side,
    pub provenance: String,
}

impl PairedDataset {
    pub fn n(&self) -> usize {
        self.instances.len()
    }

    pub fn instance(&self, id: &str) -> Option<&TaskInstance> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    pub fn responses_for<'a>(
        &'a self,
        instance_id: &'a str,
        side: Side,
    ) -> impl Iterator<Item = &'a ResponseRecord> + 'a {
        self.responses
            .iter()
            .filter(move |r| r.instance_id == instance_id && r.side == side)
    }

    /// Responses grouped into conditional sets, ordered by key.
    pub fn conditional_groups(&self) -> BTreeMap<GroupKey, Vec<&ResponseRecord>> {
        let mut out: BTreeMap<GroupKey, Vec<&ResponseRecord>> = BTreeMap::new();
        for r in &self.responses {
            let key = GroupKey {
                instance_id: r.instance_id.clone(),
                side: r.side,
                provenance: r.provenance.key(),
            };
            out.entry(key).or_default().push(r);
        }
        out
    }

    /// Instances with no responses left on some side.
    pub fn flagged_instances(&self) -> BTreeSet<(String, Side)> {
        self.notes
            .iter()
            .filter_map(|n| match n {
                Note::Emptied {
                    instance_id, side, ..
                } => Some((instance_id.clone(), *side)),
                _ => None,
            })
            .collect()
    }

    /// Append records, replacing none: duplicate ids are rejected.
    pub fn extend_responses(
        &mut self,
        records: impl IntoIterator<Item = ResponseRecord>,
    ) -> Result<(), DatasetError> {
        let mut seen: HashSet<String> = self
            .responses
            .iter()
            .map(|r| r.response_id.clone())
            .collect();
        let known: HashSet<&str> = self
            .instances
            .iter()
            .map(|i| i.instance_id.as_str())
            .collect();
        let mut incoming = Vec::new();
        for r in records {
            if !known.contains(r.instance_id.as_str()) {
                return Err(DatasetError::UnknownInstance {
                    line: 0,
                    response_id: r.response_id,
                    instance_id: r.instance_id,
                });
            }
            if !seen.insert(r.response_id.clone()) {
                return Err(DatasetError::DuplicateResponse {
                    line: 0,
                    id: r.response_id,
                });
            }
            incoming.push(r);
        }
        self.responses.extend(incoming);
        Ok(())
    }

    fn side_counts(&self) -> HashMap<(&str, Side), usize> {
        let mut m = HashMap::new();
        for r in &self.responses {
            *m.entry((r.instance_id.as_str(), r.side)).or_insert(0) += 1;
        }
        m
    }

    /// Keep responses satisfying `keep`, flagging sides that become empty.
    fn retain_responses(mut self, stage: &str, keep: impl Fn(&ResponseRecord) -> bool) -> Self {
        let before: HashSet<(String, Side)> = self
            .side_counts()
            .into_keys()
            .map(|(i, s)| (i.to_string(), s))
            .collect();
        self.responses.retain(|r| keep(r));
        let after: HashSet<(String, Side)> = self
            .side_counts()
            .into_keys()
            .map(|(i, s)| (i.to_string(), s))
            .collect();
        for (instance_id, side) in before.difference(&after) {
            self.notes.insert(Note::Emptied {
                instance_id: instance_id.clone(),
                side: *side,
                stage: stage.to_string(),
            });
        }
        self
    }
}

/// Wire form of a response line.
#[derive(Serialize)]
struct ResponseLine<'a> {
    response_id: &'a str,
    instance_id: &'a str,
    side: Side,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    perplexity: Option<f64>,
    provenance: &'a Provenance,
}

fn take_str(
    obj: &Map<String, Value>,
    line: usize,
    field: &'static str,
) -> Result<String, DatasetError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(DatasetError::MissingField { line, field }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(DatasetError::Schema {
            line,
            message: format!("`{field}` must be a string"),
        }),
    }
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, line: usize) -> Result<T, DatasetError> {
    serde_json::from_value(v).map_err(|source| DatasetError::Parse { line, source })
}

fn parse_instance(
    obj: Map<String, Value>,
    line: usize,
    schema: Schema,
) -> Result<TaskInstance, DatasetError> {
    let instance_id = take_str(&obj, line, "instance_id")?;
    let kind_str = take_str(&obj, line, "task_kind")?;
    let payload = take_str(&obj, line, "payload")?;
    let task_kind: TaskKind = from_value(Value::String(kind_str.clone()), line)?;
    if schema.task_kind().is_some_and(|k| k != task_kind) {
        return Err(DatasetError::Schema {
            line,
            message: format!("task_kind `{kind_str}` does not match the {schema:?} schema"),
        });
    }
    if payload.is_empty() {
        return Err(DatasetError::Schema {
            line,
            message: "payload must be non-empty".into(),
        });
    }
    let test_cases: Option<Vec<TestCase>> = match obj.get("test_cases") {
        None | Some(Value::Null) => None,
        Some(v) => Some(from_value(v.clone(), line)?),
    };
    if task_kind == TaskKind::Code && test_cases.as_ref().is_none_or(|c| c.is_empty()) {
        return match test_cases {
            None => Err(DatasetError::MissingField {
                line,
                field: "test_cases",
            }),
            Some(_) => Err(DatasetError::Schema {
                line,
                message: "test_cases must be non-empty".into(),
            }),
        };
    }
    Ok(TaskInstance {
        instance_id,
        task_kind,
        payload,
        test_cases,
    })
}

fn parse_response(obj: Map<String, Value>, line: usize) -> Result<ResponseRecord, DatasetError> {
    let response_id = take_str(&obj, line, "response_id")?;
    let instance_id = take_str(&obj, line, "instance_id")?;
    let side_str = take_str(&obj, line, "side")?;
    let side: Side = from_value(Value::String(side_str), line)?;
    let text = take_str(&obj, line, "text")?;
    let perplexity = match obj.get("perplexity") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let p = v.as_f64().ok_or_else(|| DatasetError::Schema {
                line,
                message: "`perplexity` must be a number".into(),
            })?;
            if !(p > 0.0) {
                return Err(DatasetError::Schema {
                    line,
                    message: format!("perplexity must be > 0, got {p}"),
                });
            }
            Some(p)
        }
    };
    let provenance = match (side, obj.get("provenance")) {
        (Side::Gen, None | Some(Value::Null)) => {
            return Err(DatasetError::MissingField {
                line,
                field: "provenance",
            })
        }
        (Side::Gen, Some(v @ Value::Object(_))) => {
            Provenance::Generated(from_value(v.clone(), line)?)
        }
        (Side::Gen, Some(_)) => {
            return Err(DatasetError::Schema {
                line,
                message: "gen provenance must be a generation config object".into(),
            })
        }
        (Side::Src, None | Some(Value::Null)) => {
            Provenance::Source(Provenance::DEFAULT_SOURCE_TAG.into())
        }
        (Side::Src, Some(Value::String(s))) => Provenance::Source(s.clone()),
        (Side::Src, Some(_)) => {
            return Err(DatasetError::Schema {
                line,
                message: "src provenance must be a tag string".into(),
            })
        }
    };
    let mut rec = ResponseRecord::new(response_id, instance_id, side, text, provenance);
    rec.perplexity = perplexity;
    Ok(rec)
}

/// One response as a JSON line, in the same form `persist` writes.
pub fn response_to_json(r: &ResponseRecord) -> String {
    let line = ResponseLine {
        response_id: &r.response_id,
        instance_id: &r.instance_id,
        side: r.side,
        text: &r.text,
        perplexity: r.perplexity,
        provenance: &r.provenance,
    };
    serde_json::to_string(&line).expect("response lines always serialize")
}

/// Inverse of [`response_to_json`]; `line` is reported in errors.
pub fn response_from_json(text: &str, line: usize) -> Result<ResponseRecord, DatasetError> {
    match serde_json::from_str::<Value>(text)
        .map_err(|source| DatasetError::Parse { line, source })?
    {
        Value::Object(obj) => parse_response(obj, line),
        _ => Err(DatasetError::Schema {
            line,
            message: "expected a JSON object".into(),
        }),
    }
}

/// Read a dataset from JSONL. Lines carrying `response_id` are responses, the
/// rest are instances. Blank lines are ignored.
pub fn ingest(path: &Path, schema: Schema) -> Result<PairedDataset, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_reader(BufReader::new(file), schema).map_err(|e| match e {
        DatasetError::Io { source, .. } => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn ingest_reader<R: BufRead>(reader: R, schema: Schema) -> Result<PairedDataset, DatasetError> {
    let mut ds = PairedDataset::default();
    let mut instance_ids = HashSet::new();
    let mut response_ids = HashSet::new();
    let mut response_lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|source| DatasetError::Parse {
            line: lineno,
            source,
        })?;
        let Value::Object(obj) = value else {
            return Err(DatasetError::Schema {
                line: lineno,
                message: "expected a JSON object".into(),
            });
        };
        if obj.contains_key("response_id") {
            let rec = parse_response(obj, lineno)?;
            if !response_ids.insert(rec.response_id.clone()) {
                return Err(DatasetError::DuplicateResponse {
                    line: lineno,
                    id: rec.response_id,
                });
            }
            response_lines.push(lineno);
            ds.responses.push(rec);
        } else {
            let inst = parse_instance(obj, lineno, schema)?;
            if !instance_ids.insert(inst.instance_id.clone()) {
                return Err(DatasetError::DuplicateInstance {
                    line: lineno,
                    id: inst.instance_id,
                });
            }
            ds.instances.push(inst);
        }
    }
    for (rec, line) in ds.responses.iter().zip(response_lines) {
        if !instance_ids.contains(&rec.instance_id) {
            return Err(DatasetError::UnknownInstance {
                line,
                response_id: rec.response_id.clone(),
                instance_id: rec.instance_id.clone(),
            });
        }
    }
    Ok(ds)
}

/// Write instances then responses, one compact JSON object per line.
pub fn persist(ds: &PairedDataset, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_jsonl(ds, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn write_jsonl<W: Write>(ds: &PairedDataset, w: &mut W) -> std::io::Result<()> {
    for inst in &ds.instances {
        serde_json::to_writer(&mut *w, inst)?;
        w.write_all(b"\n")?;
    }
    for r in &ds.responses {
        w.write_all(response_to_json(r).as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Keep responses with `min_words <= word_count <= max_words`.
pub fn filter_by_length(ds: PairedDataset, min_words: usize, max_words: usize) -> PairedDataset {
    ds.retain_responses("length", |r| {
        r.word_count >= min_words && r.word_count <= max_words
    })
}

/// Drop instances whose response count on `side` lies outside `[min_n, max_n]`.
pub fn filter_by_response_count(
    mut ds: PairedDataset,
    min_n: usize,
    max_n: usize,
    side: Side,
) -> PairedDataset {
    let counts = ds.side_counts();
    let keep: HashSet<String> = ds
        .instances
        .iter()
        .filter(|i| {
            let c = counts
                .get(&(i.instance_id.as_str(), side))
                .copied()
                .unwrap_or(0);
            c >= min_n && c <= max_n
        })
        .map(|i| i.instance_id.clone())
        .collect();
    let had_any = !ds.instances.is_empty();
    ds.instances.retain(|i| keep.contains(&i.instance_id));
    ds.responses.retain(|r| keep.contains(&r.instance_id));
    if had_any && ds.instances.is_empty() {
        log::warn!("response-count filter [{min_n}, {max_n}] on {side} dropped every instance");
        ds.notes.insert(Note::AllInstancesDropped {
            stage: "response_count".into(),
        });
    }
    ds
}

/// Keep at most `n` uniformly sampled responses per instance on `side`.
///
/// Each instance draws from its own ChaCha stream seeded by `seed` and the
/// instance id, so selections do not shift when other instances change.
pub fn sample_per_instance(
    mut ds: PairedDataset,
    n: usize,
    side: Side,
    seed: u64,
) -> PairedDataset {
    assert!(n >= 1, "sample size must be >= 1");
    let mut by_instance: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, r) in ds.responses.iter().enumerate() {
        if r.side == side {
            by_instance
                .entry(r.instance_id.as_str())
                .or_default()
                .push(idx);
        }
    }
    let mut drop = vec![false; ds.responses.len()];
    let mut notes = Vec::new();
    for inst in &ds.instances {
        let idxs = by_instance
            .get(inst.instance_id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        if idxs.len() < n {
            notes.push(Note::Undersupplied {
                instance_id: inst.instance_id.clone(),
                side,
                requested: n,
                available: idxs.len(),
            });
        }
        if idxs.len() <= n {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(inst.instance_id.as_bytes()));
        let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, idxs.len(), n)
            .into_iter()
            .collect();
        for (pos, &idx) in idxs.iter().enumerate() {
            if !chosen.contains(&pos) {
                drop[idx] = true;
            }
        }
    }
    let mut i = 0;
    ds.responses.retain(|_| {
        let keep = !drop[i];
        i += 1;
        keep
    });
    ds.notes.extend(notes);
    ds
}

/// Drop generated responses with perplexity above `threshold` (inclusive keep
/// at the threshold). Source responses are never filtered.
pub fn perplexity_filter(
    ds: PairedDataset,
    threshold: f64,
) -> Result<(PairedDataset, ValidFractionTable), DatasetError> {
    let mut tally: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for r in ds.responses.iter().filter(|r| r.side == Side::Gen) {
        let ppl = r
            .perplexity
            .ok_or_else(|| DatasetError::MissingPerplexity(r.response_id.clone()))?;
        let e = tally
            .entry((r.instance_id.clone(), r.provenance.key()))
            .or_insert((0, 0));
        e.1 += 1;
        if ppl <= threshold {
            e.0 += 1;
        }
    }
    let rows = tally
        .into_iter()
        .map(|((instance_id, provenance), (kept, total))| ValidFraction {
            instance_id,
            provenance,
            kept,
            total,
            fraction: kept as f64 / total as f64,
        })
        .collect();
    let ds = ds.retain_responses("perplexity", |r| {
        r.side == Side::Src || r.perplexity.is_some_and(|p| p <= threshold)
    });
    Ok((ds, ValidFractionTable { rows }))
}

/// Drop instances whose payload has an ASCII ratio below `min_ratio`.
pub fn filter_by_ascii_ratio(mut ds: PairedDataset, min_ratio: f64) -> PairedDataset {
    let keep: HashSet<String> = ds
        .instances
        .iter()
        .filter(|i| ascii_ratio(&i.payload) >= min_ratio)
        .map(|i| i.instance_id.clone())
        .collect();
    ds.instances.retain(|i| keep.contains(&i.instance_id));
    ds.responses.retain(|r| keep.contains(&r.instance_id));
    ds
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    fn gen_prov() -> Provenance {
        Provenance::Generated(GenerationConfigRef {
            model_id: "m".into(),
            template_id: "t".into(),
            persona: None,
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 500,
            decay: None,
        })
    }

    fn review(id: &str) -> TaskInstance {
        TaskInstance {
            instance_id: id.into(),
            task_kind: TaskKind::Review,
            payload: format!("Book {id}"),
            test_cases: None,
        }
    }

    fn ds_with(texts: &[(&str, Side, String)]) -> PairedDataset {
        let mut ids: Vec<&str> = texts.iter().map(|t| t.0).collect();
        ids.dedup();
        let mut ds = PairedDataset {
            instances: ids.iter().map(|i| review(i)).collect(),
            ..Default::default()
        };
        for (n, (inst, side, text)) in texts.iter().enumerate() {
            let prov = match side {
                Side::Src => Provenance::Source("source".into()),
                Side::Gen => gen_prov(),
            };
            ds.responses.push(ResponseRecord::new(
                format!("r{n}"),
                *inst,
                *side,
                text.clone(),
                prov,
            ));
        }
        ds
    }

    #[test]
    fn ingest_empty_file() {
        let ds = ingest_reader("".as_bytes(), Schema::ReviewJsonl).unwrap();
        assert_eq!(ds.n(), 0);
        assert!(ds.responses.is_empty());
    }

    #[test]
    fn ingest_one_instance_two_src() {
        let data = r#"{"instance_id":"b1","task_kind":"review","payload":"Dune"}
{"response_id":"r1","instance_id":"b1","side":"src","text":"great book"}
{"response_id":"r2","instance_id":"b1","side":"src","text":"bad book indeed"}
"#;
        let ds = ingest_reader(data.as_bytes(), Schema::ReviewJsonl).unwrap();
        assert_eq!(ds.n(), 1);
        assert_eq!(ds.responses.len(), 2);
        assert_eq!(ds.responses[1].word_count, 3);
        assert_eq!(
            ds.responses[0].provenance,
            Provenance::Source("source".into())
        );
    }

    #[test]
    fn gen_without_provenance_is_rejected() {
        let data = r#"{"instance_id":"b1","task_kind":"review","payload":"Dune"}
{"response_id":"r1","instance_id":"b1","side":"gen","text":"x"}"#;
        let err = ingest_reader(data.as_bytes(), Schema::ReviewJsonl).unwrap_err();
        assert!(
            matches!(
                err,
                DatasetError::MissingField {
                    line: 2,
                    field: "provenance"
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn ingest_errors_name_line_and_field() {
        let bad_json = "{\"instance_id\":\"b1\"\n";
        assert!(matches!(
            ingest_reader(bad_json.as_bytes(), Schema::ReviewJsonl),
            Err(DatasetError::Parse { line: 1, .. })
        ));

        let no_payload = r#"{"instance_id":"b1","task_kind":"review"}"#;
        let err = ingest_reader(no_payload.as_bytes(), Schema::ReviewJsonl).unwrap_err();
        assert_eq!(err.to_string(), "line 1: missing field `payload`");

        let dup = r#"{"instance_id":"b1","task_kind":"review","payload":"D"}
{"response_id":"r1","instance_id":"b1","side":"src","text":"x"}
{"response_id":"r1","instance_id":"b1","side":"src","text":"y"}"#;
        assert!(matches!(
            ingest_reader(dup.as_bytes(), Schema::ReviewJsonl),
            Err(DatasetError::DuplicateResponse { line: 3, .. })
        ));

        let dangling = r#"{"response_id":"r1","instance_id":"nope","side":"src","text":"x"}"#;
        assert!(matches!(
            ingest_reader(dangling.as_bytes(), Schema::ReviewJsonl),
            Err(DatasetError::UnknownInstance { line: 1, .. })
        ));

        let code_no_cases = r#"{"instance_id":"p1","task_kind":"code","payload":"sum two ints"}"#;
        assert!(matches!(
            ingest_reader(code_no_cases.as_bytes(), Schema::CodeJsonl),
            Err(DatasetError::MissingField {
                field: "test_cases",
                ..
            })
        ));
        assert!(matches!(
            ingest_reader(code_no_cases.as_bytes(), Schema::ReviewJsonl),
            Err(DatasetError::Schema { .. })
        ));
    }

    #[test]
    fn ingest_code_schema() {
        let data = r#"{"instance_id":"p1","task_kind":"code","payload":"echo","test_cases":[{"input":"1\n","expected_output":"1\n"}]}
{"response_id":"s1","instance_id":"p1","side":"src","text":"print(input())"}"#;
        let ds = ingest_reader(data.as_bytes(), Schema::CodeJsonl).unwrap();
        assert_eq!(ds.instances[0].test_cases.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn length_filter_unbounded_is_identity() {
        let ds = ds_with(&[("a", Side::Src, words(3)), ("a", Side::Gen, words(0))]);
        assert_eq!(filter_by_length(ds.clone(), 0, usize::MAX), ds);
    }

    #[test]
    fn length_filter_is_inclusive() {
        let ds = ds_with(&[
            ("a", Side::Src, words(299)),
            ("a", Side::Src, words(300)),
            ("a", Side::Src, words(700)),
            ("a", Side::Src, words(701)),
        ]);
        let out = filter_by_length(ds, 300, 700);
        let kept: Vec<usize> = out.responses.iter().map(|r| r.word_count).collect();
        assert_eq!(kept, vec![300, 700]);

        let single = ds_with(&[("a", Side::Src, words(5))]);
        assert_eq!(filter_by_length(single, 5, 5).responses.len(), 1);
    }

    #[test]
    fn emptied_instances_are_flagged_not_dropped() {
        let ds = ds_with(&[("a", Side::Src, words(10)), ("b", Side::Src, words(400))]);
        let out = filter_by_length(ds, 300, 700);
        assert_eq!(out.n(), 2);
        assert!(out
            .flagged_instances()
            .contains(&("a".to_string(), Side::Src)));
    }

    #[test]
    fn count_filter_keeps_inside_bounds() {
        let mut texts = Vec::new();
        for (inst, n) in [("a", 999usize), ("b", 1000), ("c", 2500), ("d", 2501)] {
            for _ in 0..n {
                texts.push((inst, Side::Src, "x".to_string()));
            }
        }
        let ds = ds_with(&texts);
        assert_eq!(
            filter_by_response_count(ds.clone(), 0, usize::MAX, Side::Src),
            ds
        );
        let out = filter_by_response_count(ds, 1000, 2500, Side::Src);
        let ids: Vec<&str> = out
            .instances
            .iter()
            .map(|i| i.instance_id.as_str())
            .collect();
        assert_eq!(ids, vec!["b", "c"]);
        assert_eq!(out.responses.len(), 3500);
    }

    #[test]
    fn count_filter_dropping_everything_warns() {
        let ds = ds_with(&[("a", Side::Src, "x".into())]);
        let out = filter_by_response_count(ds, 5, 10, Side::Src);
        assert_eq!(out.n(), 0);
        assert!(out.notes.contains(&Note::AllInstancesDropped {
            stage: "response_count".into()
        }));
    }

    #[test]
    fn sampling_undersupply_and_determinism() {
        let texts: Vec<_> = (0..10).map(|i| ("a", Side::Src, format!("t{i}"))).collect();
        let ds = ds_with(&texts);
        let all = sample_per_instance(ds.clone(), 10, Side::Src, 1);
        assert_eq!(all.responses, ds.responses);
        let more = sample_per_instance(ds.clone(), 20, Side::Src, 1);
        assert_eq!(more.responses.len(), 10);
        assert!(more.notes.iter().any(|n| matches!(
            n,
            Note::Undersupplied {
                available: 10,
                requested: 20,
                ..
            }
        )));
        let a = sample_per_instance(ds.clone(), 1, Side::Src, 42);
        let b = sample_per_instance(ds, 1, Side::Src, 42);
        assert_eq!(a, b);
        assert_eq!(a.responses.len(), 1);
    }

    #[test]
    fn sampling_is_uniform() {
        let texts: Vec<_> = (0..10).map(|i| ("a", Side::Src, format!("t{i}"))).collect();
        let ds = ds_with(&texts);
        let mut hits: HashMap<String, usize> = HashMap::new();
        let trials = 10_000;
        for seed in 0..trials {
            for r in sample_per_instance(ds.clone(), 3, Side::Src, seed).responses {
                *hits.entry(r.response_id).or_default() += 1;
            }
        }
        assert_eq!(hits.len(), 10);
        for (_, h) in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.3).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn perplexity_fractions() {
        let mut ds = ds_with(
            &(0..10)
                .map(|i| ("a", Side::Gen, format!("t{i}")))
                .collect::<Vec<_>>(),
        );
        for r in ds.responses.iter_mut() {
            r.perplexity = Some(5.0);
        }
        let (_, t) = perplexity_filter(ds.clone(), 20.0).unwrap();
        assert!(t.rows.iter().all(|r| r.fraction == 1.0));

        for r in ds.responses.iter_mut().take(5) {
            r.perplexity = Some(25.0);
        }
        let (out, t) = perplexity_filter(ds.clone(), 20.0).unwrap();
        assert_eq!(t.rows[0].fraction, 0.5);
        assert_eq!(out.responses.len(), 5);

        ds.responses[0].perplexity = Some(20.0);
        let (out, _) = perplexity_filter(ds.clone(), 20.0).unwrap();
        assert!(out.responses.iter().any(|r| r.response_id == "r0"));

        ds.responses[1].perplexity = None;
        assert!(
            matches!(perplexity_filter(ds, 20.0), Err(DatasetError::MissingPerplexity(id)) if id == "r1")
        );
    }

    #[test]
    fn source_never_perplexity_filtered() {
        let ds = ds_with(&[("a", Side::Src, "x".into())]);
        let (out, t) = perplexity_filter(ds, 1.0).unwrap();
        assert_eq!(out.responses.len(), 1);
        assert!(t.rows.is_empty());
    }

    #[test]
    fn filter_spec_validation() {
        assert!(FilterSpec::default().validate().is_ok());
        assert!(FilterSpec {
            min_words: 10,
            max_words: 5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FilterSpec {
            perplexity_threshold: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ascii_heuristic() {
        assert_eq!(ascii_ratio("Dune"), 1.0);
        assert!(ascii_ratio("Война и мир") < 0.5);
        let mut ds = ds_with(&[("a", Side::Src, "x".into())]);
        ds.instances[0].payload = "Война и мир".into();
        assert_eq!(filter_by_ascii_ratio(ds, 0.9).n(), 0);
    }
}
