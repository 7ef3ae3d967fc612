//! Prompt templating and the generation client: render a task prompt, issue
//! completion requests through a replay cache, and sweep sampling grids over
//! a dataset with a resumable manifest.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{
    ClientSpec, HttpTransport, RateLimiter, RetryPolicy, Transport, TransportError,
};
use crate::dataset::{
    response_from_json, response_to_json, DatasetError, GenerationConfigRef, PairedDataset,
    Provenance, ResponseRecord, Side, TaskInstance, TaskKind,
};
use crate::sampling::DecaySchedule;
use crate::util::{sha256_fields, write_atomic};

pub const PLACEHOLDERS: &[&str] = &["title", "person", "problem_description"];

pub const PERSONAS: &[&str] = &[
    "Trevor Noah",
    "Janelle Monáe",
    "Yuval Noah Harari",
    "Serena Williams",
    "Reshma Saujani",
    "Neil deGrasse Tyson",
    "Margaret Atwood",
    "David Attenborough",
    "Malala Yousafzai",
    "Jordan Peele",
];

pub const REVIEW_TEMPERATURES: &[f64] = &[0.5, 0.8, 1.0, 1.2, 1.5];
pub const REVIEW_TOP_PS: &[f64] = &[0.90, 0.95, 0.98, 1.00];
pub const CODE_TEMPERATURES: &[f64] = &[0.5, 1.0];
pub const CODE_TOP_PS: &[f64] = &[0.9, 1.0];
pub const REVIEW_MAX_NEW_TOKENS: u32 = 500;
pub const CODE_MAX_NEW_TOKENS: u32 = 2048;

const CODE_PREAMBLE: &str = "Please read the below problem description and generate a python code to solve the problem:\n\n{problem_description}";
const GRANDMASTER: &str = "Imagine you are a grandmaster in solving competitive programming problems. Your skills in algorithms, data structures, and problem-solving are unparalleled. You have a deep understanding of various programming paradigms and can easily navigate through complex problems with efficiency and elegance.\n\n";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("template `{template}` uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` needs {{{name}}}, which instance `{instance}` cannot supply")]
    UnsatisfiedPlaceholder {
        template: String,
        name: String,
        instance: String,
    },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("authentication rejected by {endpoint}: {message}")]
    Auth { endpoint: String, message: String },
    #[error("no generation configs given")]
    NoConfigs,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("sweep state {path}: {source}")]
    State {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
}

/// Names inside `{...}` in order of appearance.
fn placeholders(body: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                out.push(&after[..close]);
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(
        template_id: impl Into<String>,
        body: impl Into<String>,
    ) -> Result<Self, GenerationError> {
        let t = Self {
            template_id: template_id.into(),
            body: body.into(),
        };
        if let Some(bad) = placeholders(&t.body)
            .into_iter()
            .find(|p| !PLACEHOLDERS.contains(p))
        {
            return Err(GenerationError::UnknownPlaceholder {
                template: t.template_id.clone(),
                name: bad.to_string(),
            });
        }
        Ok(t)
    }

    /// The shipped templates: two review prompts and four code prompts.
    pub fn builtin(template_id: &str) -> Result<Self, GenerationError> {
        let body = match template_id {
            "review_plain" => "Write a personalized review of the book titled {title}:".to_string(),
            "review_persona" => "Write a book review for the book titled {title} as if you are {person}:".to_string(),
            "code_plain" => CODE_PREAMBLE.to_string(),
            "code_only" => format!("{CODE_PREAMBLE}\n\nPlease only generate code and nothing else."),
            "code_grandmaster" => format!("{GRANDMASTER}{CODE_PREAMBLE}\n\nPlease only generate code and nothing else."),
            "code_grandmaster_cot" => format!(
                "{GRANDMASTER}{CODE_PREAMBLE}\n\nPlease think through the problem step by step, and then provide your solution. Then, test your code against the provided test cases in the problem. If your code fails to pass all the tests, please revise your code and try again until your code passes all the tests."
            ),
            other => return Err(GenerationError::UnknownTemplate(other.to_string())),
        };
        Self::new(template_id, body)
    }

    pub fn builtin_ids() -> &'static [&'static str] {
        &[
            "review_plain",
            "review_persona",
            "code_plain",
            "code_only",
            "code_grandmaster",
            "code_grandmaster_cot",
        ]
    }
}

/// Substitute placeholders from the instance and persona. Nothing else in the
/// body changes.
pub fn render_prompt(
    template: &PromptTemplate,
    instance: &TaskInstance,
    persona: Option<&str>,
) -> Result<String, GenerationError> {
    let unsatisfied = |name: &str| GenerationError::UnsatisfiedPlaceholder {
        template: template.template_id.clone(),
        name: name.to_string(),
        instance: instance.instance_id.clone(),
    };
    let mut out = String::with_capacity(template.body.len() + instance.payload.len());
    let mut rest = template.body.as_str();
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}').map(|c| open + c) else {
            break;
        };
        out.push_str(&rest[..open]);
        let name = &rest[open + 1..close];
        let value = match name {
            "title" if instance.task_kind == TaskKind::Review => instance.payload.as_str(),
            "problem_description" if instance.task_kind == TaskKind::Code => {
                instance.payload.as_str()
            }
            "person" => persona.ok_or_else(|| unsatisfied(name))?,
            "title" | "problem_description" => return Err(unsatisfied(name)),
            other => {
                return Err(GenerationError::UnknownPlaceholder {
                    template: template.template_id.clone(),
                    name: other.to_string(),
                })
            }
        };
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub decay: Option<DecaySchedule>,
    pub template_id: String,
    #[serde(default)]
    pub persona: Option<String>,
    pub samples_per_instance: u32,
    /// Total draws allowed per instance for code; the batch stops early once
    /// `samples_per_instance` draws are accepted.
    #[serde(default)]
    pub budget_k: Option<u32>,
}

impl GenerationConfig {
    pub fn review(model_id: &str, temperature: f64, top_p: f64) -> Self {
        Self {
            model_id: model_id.into(),
            temperature,
            top_p,
            max_new_tokens: REVIEW_MAX_NEW_TOKENS,
            decay: None,
            template_id: "review_plain".into(),
            persona: None,
            samples_per_instance: 10,
            budget_k: None,
        }
    }

    pub fn code(model_id: &str, temperature: f64, top_p: f64, budget_k: u32) -> Self {
        Self {
            max_new_tokens: CODE_MAX_NEW_TOKENS,
            template_id: "code_only".into(),
            samples_per_instance: 20,
            budget_k: Some(budget_k),
            ..Self::review(model_id, temperature, top_p)
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let err = |m: String| Err(GenerationError::Config(m));
        if self.model_id.is_empty() {
            return err("model_id must be set".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return err(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.max_new_tokens == 0 || self.samples_per_instance == 0 {
            return err("max_new_tokens and samples_per_instance must be >= 1".into());
        }
        if let Some(k) = self.budget_k {
            if self.samples_per_instance > k {
                return err(format!(
                    "samples_per_instance {} exceeds budget_k {k}",
                    self.samples_per_instance
                ));
            }
        }
        if let Some(d) = &self.decay {
            d.validate()
                .map_err(|e| GenerationError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn provenance(&self) -> GenerationConfigRef {
        GenerationConfigRef {
            model_id: self.model_id.clone(),
            template_id: self.template_id.clone(),
            persona: self.persona.clone(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
            decay: self.decay,
        }
    }

    pub fn key(&self) -> String {
        self.provenance().key()
    }

    /// Draws issued per instance before early stopping.
    pub fn draw_budget(&self) -> u32 {
        self.budget_k.unwrap_or(self.samples_per_instance)
    }
}

/// Cartesian product of temperatures and top-p values over a base config.
pub fn sampling_grid(
    base: &GenerationConfig,
    temperatures: &[f64],
    top_ps: &[f64],
) -> Vec<GenerationConfig> {
    temperatures
        .iter()
        .flat_map(|&t| {
            top_ps.iter().map(move |&p| GenerationConfig {
                temperature: t,
                top_p: p,
                ..base.clone()
            })
        })
        .collect()
}

/// One config per persona, for the persona-prompt variant.
pub fn persona_variants(base: &GenerationConfig, personas: &[&str]) -> Vec<GenerationConfig> {
    personas
        .iter()
        .map(|p| GenerationConfig {
            template_id: "review_persona".into(),
            persona: Some((*p).to_string()),
            ..base.clone()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ReplayLine {
    key: String,
    text: String,
}

/// File-backed map from request identity to completion text.
pub struct ReplayCache {
    entries: RwLock<HashMap<String, String>>,
    writer: Option<Mutex<BufWriter<File>>>,
}

impl ReplayCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            writer: None,
        }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ReplayLine>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.text);
                    }
                    Err(e) => {
                        log::warn!("{}: skipping unreadable replay line: {e}", path.display())
                    }
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

    pub fn key(model_id: &str, prompt: &str, config_key: &str, draw: u32) -> String {
        sha256_fields([model_id, prompt, config_key, &draw.to_string()])
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: String, text: String) -> std::io::Result<()> {
        if let Some(w) = &self.writer {
            let mut w = w.lock().unwrap();
            serde_json::to_writer(
                &mut *w,
                &ReplayLine {
                    key: key.clone(),
                    text: text.clone(),
                },
            )?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries.write().unwrap().insert(key, text);
        Ok(())
    }
}

/// A completion client: transport, retry policy, rate limiter and cache.
pub struct GenerationClient {
    pub endpoint: String,
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
    limiter: RateLimiter,
    pub cache: ReplayCache,
    /// When set, a cache miss is an error instead of a network call.
    pub offline: bool,
}

impl GenerationClient {
    pub fn new(spec: &ClientSpec, cache: ReplayCache) -> Self {
        Self::with_transport(spec, Box::new(HttpTransport::new(spec)), cache)
    }

    pub fn with_transport(
        spec: &ClientSpec,
        transport: Box<dyn Transport>,
        cache: ReplayCache,
    ) -> Self {
        Self {
            endpoint: spec.endpoint.clone(),
            transport,
            retry: spec.retry_policy(),
            limiter: RateLimiter::new(spec.rate_limit),
            cache,
            offline: false,
        }
    }

    /// Completion text for draw `draw` of `prompt` under `config`.
    pub fn complete(
        &self,
        config: &GenerationConfig,
        prompt: &str,
        draw: u32,
    ) -> Result<String, TransportError> {
        let key = ReplayCache::key(&config.model_id, prompt, &config.key(), draw);
        if let Some(text) = self.cache.get(&key) {
            return Ok(text);
        }
        if self.offline {
            return Err(TransportError::Permanent(format!(
                "replay cache miss for draw {draw} in offline mode"
            )));
        }
        let mut body = json!({
            "model": config.model_id,
            "prompt": prompt,
            "temperature": config.temperature,
            "top_p": config.top_p,
            "max_tokens": config.max_new_tokens,
            "n": 1,
            "seed": draw,
        });
        if let Some(d) = &config.decay {
            body["temperature_decay"] =
                json!({ "t_start": d.t_start, "t_end": d.t_end, "steps": d.steps });
        }
        let resp = self.retry.run(|| {
            self.limiter.acquire();
            self.transport.post_json(&self.endpoint, &body)
        })?;
        let text = extract_choice_text(&resp)?;
        self.cache
            .put(key, text.clone())
            .map_err(|e| TransportError::Permanent(format!("replay cache write failed: {e}")))?;
        Ok(text)
    }
}

fn extract_choice_text(resp: &Value) -> Result<String, TransportError> {
    resp["choices"][0]["text"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| {
            TransportError::Permanent("completion response lacks choices[0].text".into())
        })
}

/// Stable response id for a draw.
pub fn response_id(instance_id: &str, config: &GenerationConfig, draw: u32) -> String {
    let h = sha256_fields([config.key().as_str()]);
    format!("{instance_id}:gen:{}:{draw}", &h[..12])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestError {
    pub instance_id: String,
    pub config_key: String,
    pub draw: u32,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutcome {
    /// Every successful draw, in draw order.
    pub records: Vec<ResponseRecord>,
    /// Acceptance verdict for each record (all true without an acceptor).
    pub accepted: Vec<bool>,
    pub errors: Vec<RequestError>,
}

impl BatchOutcome {
    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|a| **a).count()
    }
}

/// Decides whether a generated response counts toward `samples_per_instance`
/// (for code: the judge's correctness verdict).
pub type Acceptor<'a> = dyn Fn(&TaskInstance, &str) -> bool + Sync + 'a;

/// Issue the draws for one (config, instance) cell.
///
/// Without an acceptor exactly `samples_per_instance` draws are issued.
/// With one, draws continue in order until `samples_per_instance` are
/// accepted or `draw_budget()` draws have been made.
pub fn generate_batch(
    client: &GenerationClient,
    config: &GenerationConfig,
    instance: &TaskInstance,
    accept: Option<&Acceptor<'_>>,
) -> Result<BatchOutcome, GenerationError> {
    config.validate()?;
    let template = PromptTemplate::builtin(&config.template_id)?;
    let prompt = render_prompt(&template, instance, config.persona.as_deref())?;
    let provenance = Provenance::Generated(config.provenance());
    let mut out = BatchOutcome::default();
    let budget = if accept.is_some() {
        config.draw_budget()
    } else {
        config.samples_per_instance
    };
    for draw in 0..budget {
        if accept.is_some() && out.accepted_count() >= config.samples_per_instance as usize {
            break;
        }
        match client.complete(config, &prompt, draw) {
            Ok(text) => {
                let ok = accept.is_none_or(|f| f(instance, &text));
                out.records.push(ResponseRecord::new(
                    response_id(&instance.instance_id, config, draw),
                    instance.instance_id.clone(),
                    Side::Gen,
                    text,
                    provenance.clone(),
                ));
                out.accepted.push(ok);
            }
            Err(TransportError::Auth(message)) => {
                return Err(GenerationError::Auth {
                    endpoint: client.endpoint.clone(),
                    message,
                })
            }
            Err(e) => {
                log::warn!("draw {draw} for {} failed: {e}", instance.instance_id);
                out.errors.push(RequestError {
                    instance_id: instance.instance_id.clone(),
                    config_key: config.key(),
                    draw,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    /// Completed cells as `(instance_id, config_key)`.
    pub completed: BTreeSet<(String, String)>,
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub dataset: PairedDataset,
    pub errors: Vec<RequestError>,
    pub cells_run: usize,
    pub cells_skipped: usize,
    /// Ids of generated records that were not accepted (e.g. incorrect code).
    pub rejected: BTreeSet<String>,
}

#[derive(Default)]
pub struct SweepOptions<'a> {
    /// Directory holding `manifest.json` and `records.jsonl`; without one the
    /// sweep is not resumable.
    pub state_dir: Option<PathBuf>,
    pub workers: usize,
    pub accept: Option<&'a Acceptor<'a>>,
    /// Only configs whose template matches the instance kind are run.
    pub match_kind: bool,
}

struct SweepState {
    manifest_path: PathBuf,
    records_path: PathBuf,
    manifest: SweepManifest,
    writer: BufWriter<File>,
}

#[derive(Serialize, Deserialize)]
struct StateLine {
    accepted: bool,
    record: String,
}

impl SweepState {
    fn io(path: &Path) -> impl Fn(std::io::Error) -> GenerationError + '_ {
        move |source| GenerationError::State {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Load state; records of cells not marked complete are discarded.
    fn open(dir: &Path) -> Result<(Self, Vec<(ResponseRecord, bool)>), GenerationError> {
        std::fs::create_dir_all(dir).map_err(Self::io(dir))?;
        let manifest_path = dir.join("manifest.json");
        let records_path = dir.join("records.jsonl");
        let manifest: SweepManifest = if manifest_path.exists() {
            let raw = std::fs::read(&manifest_path).map_err(Self::io(&manifest_path))?;
            serde_json::from_slice(&raw).map_err(|e| GenerationError::State {
                path: manifest_path.clone(),
                source: e.into(),
            })?
        } else {
            SweepManifest::default()
        };
        let mut kept = Vec::new();
        let mut seen = BTreeSet::new();
        if records_path.exists() {
            let f = File::open(&records_path).map_err(Self::io(&records_path))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(Self::io(&records_path))?;
                let Ok(state) = serde_json::from_str::<StateLine>(&line) else {
                    log::warn!("{}: dropping torn line {}", records_path.display(), i + 1);
                    continue;
                };
                let rec = response_from_json(&state.record, i + 1)?;
                let cell = (rec.instance_id.clone(), rec.provenance.key());
                if manifest.completed.contains(&cell) && seen.insert(rec.response_id.clone()) {
                    kept.push((rec, state.accepted));
                }
            }
        }
        // Rewrite the log so it holds only completed cells.
        let mut tmp = Vec::new();
        for (rec, accepted) in &kept {
            let line = StateLine {
                accepted: *accepted,
                record: response_to_json(rec),
            };
            serde_json::to_writer(&mut tmp, &line).expect("state lines serialize");
            tmp.push(b'\n');
        }
        write_atomic(&records_path, &tmp).map_err(Self::io(&records_path))?;
        let file = OpenOptions::new()
            .append(true)
            .open(&records_path)
            .map_err(Self::io(&records_path))?;
        Ok((
            Self {
                manifest_path,
                records_path,
                manifest,
                writer: BufWriter::new(file),
            },
            kept,
        ))
    }

    fn complete_cell(
        &mut self,
        cell: (String, String),
        batch: &BatchOutcome,
    ) -> Result<(), GenerationError> {
        for (rec, accepted) in batch.records.iter().zip(&batch.accepted) {
            let line = StateLine {
                accepted: *accepted,
                record: response_to_json(rec),
            };
            serde_json::to_writer(&mut self.writer, &line).map_err(|e| GenerationError::State {
                path: self.records_path.clone(),
                source: e.into(),
            })?;
            self.writer
                .write_all(b"\n")
                .map_err(Self::io(&self.records_path))?;
        }
        self.writer.flush().map_err(Self::io(&self.records_path))?;
        self.manifest.completed.insert(cell);
        let bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.manifest_path, &bytes).map_err(Self::io(&self.manifest_path))
    }
}

fn template_kind(template_id: &str) -> Option<TaskKind> {
    let t = PromptTemplate::builtin(template_id).ok()?;
    let names = placeholders(&t.body);
    if names.contains(&"title") {
        Some(TaskKind::Review)
    } else if names.contains(&"problem_description") {
        Some(TaskKind::Code)
    } else {
        None
    }
}

/// Run every (config, instance) cell and add the generated records to `ds`.
/// Completed cells recorded in the state directory are skipped, and their
/// records restored from the state log rather than regenerated.
pub fn sweep(
    client: &GenerationClient,
    configs: &[GenerationConfig],
    mut ds: PairedDataset,
    opts: &SweepOptions<'_>,
) -> Result<SweepOutcome, GenerationError> {
    use rayon::prelude::*;
    if configs.is_empty() {
        return Err(GenerationError::NoConfigs);
    }
    for c in configs {
        c.validate()?;
    }
    let (mut state, restored) = match &opts.state_dir {
        Some(dir) => {
            let (s, r) = SweepState::open(dir)?;
            (Some(s), r)
        }
        None => (None, Vec::new()),
    };
    let mut out = SweepOutcome::default();
    let mut restored_records = Vec::new();
    for (rec, accepted) in restored {
        if !accepted {
            out.rejected.insert(rec.response_id.clone());
        }
        restored_records.push(rec);
    }
    let mut cells = Vec::new();
    for cfg in configs {
        let kind = template_kind(&cfg.template_id);
        for inst in &ds.instances {
            if opts.match_kind && kind.is_some_and(|k| k != inst.task_kind) {
                continue;
            }
            let cell = (inst.instance_id.clone(), cfg.key());
            if state
                .as_ref()
                .is_some_and(|s| s.manifest.completed.contains(&cell))
            {
                out.cells_skipped += 1;
            } else {
                cells.push((cfg, inst, cell));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .expect("thread pool");
    let state_lock = Mutex::new(state.as_mut());
    let results: Vec<Result<BatchOutcome, GenerationError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(cfg, inst, cell)| {
                let batch = generate_batch(client, cfg, inst, opts.accept)?;
                if let Some(s) = state_lock.lock().unwrap().as_mut() {
                    s.complete_cell(cell.clone(), &batch)?;
                }
                Ok(batch)
            })
            .collect()
    });
    let mut new_records = restored_records;
    for r in results {
        let batch = r?;
        out.cells_run += 1;
        for (rec, ok) in batch.records.into_iter().zip(batch.accepted) {
            if !ok {
                out.rejected.insert(rec.response_id.clone());
            }
            new_records.push(rec);
        }
        out.errors.extend(batch.errors);
    }
    // Records already present (from an earlier pass over the same dataset) are not duplicated.
    let existing: BTreeSet<String> = ds.responses.iter().map(|r| r.response_id.clone()).collect();
    new_records.retain(|r| !existing.contains(&r.response_id));
    new_records.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    ds.extend_responses(new_records)?;
    out.dataset = ds;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn book(id: &str, title: &str) -> TaskInstance {
        TaskInstance {
            instance_id: id.into(),
            task_kind: TaskKind::Review,
            payload: title.into(),
            test_cases: None,
        }
    }

    struct Counting {
        calls: Arc<AtomicUsize>,
        fail_draws: Vec<u64>,
        auth_fail: bool,
    }

    impl Transport for Counting {
        fn post_json(&self, _: &str, body: &Value) -> Result<Value, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.auth_fail {
                return Err(TransportError::Auth("401".into()));
            }
            let seed = body["seed"].as_u64().unwrap();
            if self.fail_draws.contains(&seed) {
                return Err(TransportError::Permanent("400".into()));
            }
            Ok(
                json!({"choices":[{"text": format!("draw {seed} of {}", body["prompt"].as_str().unwrap())}]}),
            )
        }
    }

    fn client(fail_draws: Vec<u64>, auth_fail: bool) -> (GenerationClient, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let mut spec = ClientSpec::new("http://llm");
        spec.rate_limit = 1e6;
        spec.backoff_base_ms = 1;
        let t = Counting {
            calls: Arc::clone(&calls),
            fail_draws,
            auth_fail,
        };
        (
            GenerationClient::with_transport(&spec, Box::new(t), ReplayCache::in_memory()),
            calls,
        )
    }

    #[test]
    fn review_prompts() {
        let plain = PromptTemplate::builtin("review_plain").unwrap();
        assert_eq!(
            render_prompt(&plain, &book("b", "Dune"), None).unwrap(),
            "Write a personalized review of the book titled Dune:"
        );
        let persona = PromptTemplate::builtin("review_persona").unwrap();
        let p = render_prompt(&persona, &book("b", "Dune"), Some("Trevor Noah")).unwrap();
        assert!(p.contains("as if you are Trevor Noah"));
        assert!(matches!(
            render_prompt(&persona, &book("b", "Dune"), None),
            Err(GenerationError::UnsatisfiedPlaceholder { name, .. }) if name == "person"
        ));
        let verbatim = PromptTemplate::new("x", "No placeholders here.").unwrap();
        assert_eq!(
            render_prompt(&verbatim, &book("b", "Dune"), None).unwrap(),
            "No placeholders here."
        );
        assert!(PromptTemplate::new("bad", "Hi {name}").is_err());
    }

    #[test]
    fn code_prompt_ends_with_instruction() {
        let t = PromptTemplate::builtin("code_only").unwrap();
        let inst = TaskInstance {
            instance_id: "p".into(),
            task_kind: TaskKind::Code,
            payload: "Add two numbers.".into(),
            test_cases: Some(vec![]),
        };
        let p = render_prompt(&t, &inst, None).unwrap();
        assert!(p.contains("\n\nAdd two numbers.\n\n"));
        assert!(p.ends_with("Please only generate code and nothing else."));
        assert!(render_prompt(&t, &book("b", "Dune"), None).is_err());
    }

    #[test]
    fn rendering_is_injective_in_title() {
        let t = PromptTemplate::builtin("review_plain").unwrap();
        let a = render_prompt(&t, &book("1", "Emma"), None).unwrap();
        let b = render_prompt(&t, &book("2", "Emma 2"), None).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn grid_sizes() {
        let base = GenerationConfig::review("m", 1.0, 1.0);
        let grid = sampling_grid(&base, REVIEW_TEMPERATURES, REVIEW_TOP_PS);
        assert_eq!(grid.len(), 20);
        let keys: BTreeSet<String> = grid.iter().map(GenerationConfig::key).collect();
        assert_eq!(keys.len(), 20);
        assert_eq!(persona_variants(&base, PERSONAS).len(), 10);
        assert_eq!(
            GenerationConfig::code("m", 1.0, 1.0, 100).max_new_tokens,
            2048
        );
    }

    #[test]
    fn config_validation() {
        let mut c = GenerationConfig::code("m", 1.0, 1.0, 10);
        assert!(c.validate().is_err());
        c.budget_k = Some(100);
        assert!(c.validate().is_ok());
        c.top_p = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn failures_are_recorded_and_batch_continues() {
        let (cl, _) = client(vec![3, 7], false);
        let cfg = GenerationConfig::review("m", 1.0, 1.0);
        let out = generate_batch(&cl, &cfg, &book("b", "Dune"), None).unwrap();
        assert_eq!(out.records.len(), 8);
        assert_eq!(out.errors.len(), 2);
        assert!(out.records.iter().all(|r| r.side == Side::Gen));
        assert_eq!(
            out.records[0].provenance,
            Provenance::Generated(cfg.provenance())
        );
    }

    #[test]
    fn auth_failure_aborts() {
        let (cl, calls) = client(vec![], true);
        let cfg = GenerationConfig::review("m", 1.0, 1.0);
        assert!(matches!(
            generate_batch(&cl, &cfg, &book("b", "Dune"), None),
            Err(GenerationError::Auth { .. })
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_hits_make_no_calls() {
        let (cl, calls) = client(vec![], false);
        let cfg = GenerationConfig::review("m", 1.0, 1.0);
        let a = generate_batch(&cl, &cfg, &book("b", "Dune"), None).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 10);
        let b = generate_batch(&cl, &cfg, &book("b", "Dune"), None).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn early_stop_on_accepted_count() {
        let (cl, calls) = client(vec![], false);
        let inst = TaskInstance {
            instance_id: "p".into(),
            task_kind: TaskKind::Code,
            payload: "x".into(),
            test_cases: None,
        };
        let cfg = GenerationConfig::code("m", 1.0, 1.0, 100);
        // Every third draw is "correct".
        let accept = |_: &TaskInstance, text: &str| {
            let n: u32 = text.split_whitespace().nth(1).unwrap().parse().unwrap();
            n.is_multiple_of(3)
        };
        let out = generate_batch(&cl, &cfg, &inst, Some(&accept)).unwrap();
        assert_eq!(out.accepted_count(), 20);
        assert_eq!(out.records.len(), 58);
        assert_eq!(calls.load(Ordering::SeqCst), 58);

        let never = |_: &TaskInstance, _: &str| false;
        let out = generate_batch(&cl, &cfg, &inst, Some(&never)).unwrap();
        assert_eq!(out.records.len(), 100);
        assert_eq!(out.accepted_count(), 0);
    }

    fn two_books() -> PairedDataset {
        PairedDataset {
            instances: vec![book("a", "Dune"), book("b", "Emma")],
            ..Default::default()
        }
    }

    #[test]
    fn single_cell_sweep() {
        let (cl, _) = client(vec![], false);
        let mut cfg = GenerationConfig::review("m", 1.0, 1.0);
        cfg.samples_per_instance = 1;
        let ds = PairedDataset {
            instances: vec![book("a", "Dune")],
            ..Default::default()
        };
        let out = sweep(&cl, &[cfg], ds, &SweepOptions::default()).unwrap();
        assert_eq!(out.dataset.responses.len(), 1);
    }

    #[test]
    fn grid_gives_twenty_groups_per_instance() {
        let (cl, _) = client(vec![], false);
        let mut base = GenerationConfig::review("m", 1.0, 1.0);
        base.samples_per_instance = 2;
        let grid = sampling_grid(&base, REVIEW_TEMPERATURES, REVIEW_TOP_PS);
        let out = sweep(
            &cl,
            &grid,
            two_books(),
            &SweepOptions {
                workers: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let groups = out.dataset.conditional_groups();
        assert_eq!(groups.keys().filter(|k| k.instance_id == "a").count(), 20);
        assert_eq!(out.dataset.responses.len(), 2 * 20 * 2);
    }

    #[test]
    fn resume_skips_completed_cells_without_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = GenerationConfig::review("m", 1.0, 1.0);
        base.samples_per_instance = 3;
        let grid = sampling_grid(&base, &[0.5, 1.0], &[1.0]);
        let opts = SweepOptions {
            state_dir: Some(dir.path().to_path_buf()),
            workers: 1,
            ..Default::default()
        };

        // First run covers one config only, as if interrupted.
        let (cl, _) = client(vec![], false);
        sweep(&cl, &grid[..1], two_books(), &opts).unwrap();
        // A torn line and a stray record from an unfinished cell.
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join("records.jsonl"))
            .unwrap();
        writeln!(f, "{{\"accepted\":true,\"rec").unwrap();

        let (cl, calls) = client(vec![], false);
        let out = sweep(&cl, &grid, two_books(), &opts).unwrap();
        assert_eq!(out.cells_skipped, 2);
        assert_eq!(out.cells_run, 2);
        assert_eq!(calls.load(Ordering::SeqCst), 6);
        assert_eq!(out.dataset.responses.len(), 12);

        let (cl, calls) = client(vec![], false);
        let again = sweep(&cl, &grid, two_books(), &opts).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert_eq!(again.cells_run, 0);
        assert_eq!(again.dataset.responses, out.dataset.responses);
    }
}
