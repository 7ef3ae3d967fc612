//! Stage orchestration. Each stage writes under `<output_dir>/<stage>/` and
//! is identified by a hash of its own settings and its inputs' hashes, so a
//! changed parameter invalidates that stage and everything downstream of it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gemometer_core::attributes::{
    extract_all, AttributeData, AttributeValue, ExtractedRecord, ExtractionCache, Extractor,
    ExtractorMode, ExtractorSpec,
};
use gemometer_core::client::{ClientSpec, HttpTransport};
use gemometer_core::dataset::{
    filter_by_length, filter_by_response_count, ingest, perplexity_filter, persist,
    sample_per_instance, PairedDataset, ResponseRecord, Schema, Side, TaskInstance, TaskKind,
    ValidFractionTable,
};
use gemometer_core::fingerprint::{FingerprintSet, Fingerprinter};
use gemometer_core::generation::{sweep, Acceptor, GenerationClient, ReplayCache, SweepOptions};
use gemometer_core::judge::{extract_program, judge_many, judge_solution, JudgeReport};
use gemometer_core::util::{sha256_fields, write_atomic};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis;
use crate::config::{RunConfig, SourceFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Generate,
    Extract,
    Judge,
    Fingerprint,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Generate,
        Stage::Extract,
        Stage::Judge,
        Stage::Fingerprint,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Generate => "generate",
            Stage::Extract => "extract",
            Stage::Judge => "judge",
            Stage::Fingerprint => "fingerprint",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Generate => &[Stage::Ingest],
            Stage::Extract | Stage::Judge | Stage::Fingerprint => &[Stage::Generate],
            Stage::Analyze => &[
                Stage::Generate,
                Stage::Extract,
                Stage::Judge,
                Stage::Fingerprint,
            ],
            Stage::Report => &[Stage::Analyze],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

impl StageError {
    fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    /// Artifact path (relative to the output directory) to content hash.
    pub artifacts: BTreeMap<String, String>,
    /// Digest of the upstream artifacts this stage consumed.
    #[serde(default)]
    pub inputs: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep an interrupted generation sweep's state and continue it.
    pub resume: bool,
    /// Rerun stages even when their artifacts are current.
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(sha256_fields([fs::read(path)?]))
}

fn json_of<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config values serialize")
}

/// Content hash of every stage for `cfg`.
pub fn stage_hashes(cfg: &RunConfig) -> std::io::Result<BTreeMap<Stage, String>> {
    let mut h = BTreeMap::new();
    let data_hash = |p: &Option<PathBuf>| -> std::io::Result<String> {
        p.as_deref()
            .map(file_hash)
            .transpose()
            .map(|o| o.unwrap_or_else(|| "-".into()))
    };
    let ingest = sha256_fields([
        "ingest".to_string(),
        data_hash(&cfg.dataset.reviews)?,
        data_hash(&cfg.dataset.code)?,
        json_of(&cfg.filters.reviews),
        json_of(&cfg.filters.code),
        cfg.seed.to_string(),
    ]);
    let mut gen_fields = vec!["generate".to_string(), ingest.clone()];
    if let Some(g) = &cfg.generation {
        let keys: Vec<String> = cfg.generation_configs().iter().map(json_of).collect();
        gen_fields.extend([
            g.endpoint.clone(),
            json_of(&keys),
            json_of(&g.perplexity_endpoint),
            cfg.filters.perplexity_threshold.to_string(),
            g.accept_correct_only.to_string(),
            json_of(&cfg.judge),
        ]);
        // Offline runs depend on the cache contents; online runs append to it.
        if g.offline {
            gen_fields.push(data_hash(&g.replay_cache)?);
        }
    }
    let generate = sha256_fields(&gen_fields);
    let extract = sha256_fields([
        "extract".to_string(),
        generate.clone(),
        json_of(&cfg.extractors),
    ]);
    let judge = sha256_fields(["judge".to_string(), generate.clone(), json_of(&cfg.judge)]);
    let fingerprint = sha256_fields([
        "fingerprint".to_string(),
        generate.clone(),
        json_of(&cfg.fingerprint),
    ]);
    let analyze = sha256_fields([
        "analyze".to_string(),
        extract.clone(),
        judge.clone(),
        fingerprint.clone(),
        json_of(&cfg.metric_plan()),
    ]);
    let report = sha256_fields(["report".to_string(), analyze.clone()]);
    h.insert(Stage::Ingest, ingest);
    h.insert(Stage::Generate, generate);
    h.insert(Stage::Extract, extract);
    h.insert(Stage::Judge, judge);
    h.insert(Stage::Fingerprint, fingerprint);
    h.insert(Stage::Analyze, analyze);
    h.insert(Stage::Report, report);
    Ok(h)
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub opts: RunOptions,
    pub hashes: BTreeMap<Stage, String>,
    pub manifest: RunManifest,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, opts: RunOptions) -> Result<Self, StageError> {
        let hashes = stage_hashes(&cfg)
            .map_err(|e| StageError::new(Stage::Ingest, format!("cannot hash inputs: {e}")))?;
        let path = cfg.output_dir.join(MANIFEST_FILE);
        let manifest = match fs::read(&path) {
            Ok(raw) => serde_json::from_slice(&raw).unwrap_or_else(|e| {
                log::warn!(
                    "{}: unreadable manifest ({e}); starting fresh",
                    path.display()
                );
                RunManifest::default()
            }),
            Err(_) => RunManifest::default(),
        };
        Ok(Self {
            cfg,
            opts,
            hashes,
            manifest,
        })
    }

    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn is_current(&self, stage: Stage) -> bool {
        let Some(rec) = self.manifest.stages.get(stage.name()) else {
            return false;
        };
        rec.hash == self.hashes[&stage]
            && rec.inputs == self.input_digest(stage)
            && rec
                .artifacts
                .iter()
                .all(|(rel, h)| file_hash(&self.out().join(rel)).is_ok_and(|actual| &actual == h))
    }

    fn input_digest(&self, stage: Stage) -> String {
        let mut fields = Vec::new();
        for dep in stage.deps() {
            fields.push(dep.name().to_string());
            for (rel, h) in self
                .manifest
                .stages
                .get(dep.name())
                .map(|r| &r.artifacts)
                .into_iter()
                .flatten()
            {
                fields.push(format!("{rel}={h}"));
            }
        }
        sha256_fields(fields)
    }

    fn save_manifest(&self, stage: Stage) -> Result<(), StageError> {
        let bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.out().join(MANIFEST_FILE), &bytes).map_err(|e| StageError::new(stage, e))
    }

    pub fn run_all(&mut self) -> Result<Vec<(Stage, StageStatus)>, StageError> {
        Stage::ALL
            .iter()
            .map(|&s| Ok((s, self.run_stage(s)?)))
            .collect()
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageStatus, StageError> {
        for &dep in stage.deps() {
            if !self.is_current(dep) {
                return Err(StageError::new(
                    stage,
                    format!("input from stage `{dep}` is missing or stale; run `gemometer {dep}` first or use run-all"),
                ));
            }
        }
        if !self.opts.force && self.is_current(stage) {
            log::info!("{stage}: up to date");
            return Ok(StageStatus::UpToDate);
        }
        self.manifest.stages.remove(stage.name());
        self.save_manifest(stage)?;
        let dir = self.out().join(stage.name());
        clear_stage_dir(&dir, self.opts.resume && stage == Stage::Generate)
            .map_err(|e| StageError::new(stage, e))?;
        fs::create_dir_all(&dir).map_err(|e| StageError::new(stage, e))?;
        log::info!("{stage}: running");
        let ctx = Ctx {
            cfg: &self.cfg,
            out: self.out(),
            hashes: &self.hashes,
        };
        let artifacts = match stage {
            Stage::Ingest => run_ingest(&ctx),
            Stage::Generate => run_generate(&ctx),
            Stage::Extract => run_extract(&ctx),
            Stage::Judge => run_judge(&ctx),
            Stage::Fingerprint => run_fingerprint(&ctx),
            Stage::Analyze => analysis::run_analyze(&ctx),
            Stage::Report => analysis::run_report(&ctx),
        }
        .map_err(|m| StageError::new(stage, m))?;
        let mut rec = StageRecord {
            hash: self.hashes[&stage].clone(),
            artifacts: BTreeMap::new(),
            inputs: self.input_digest(stage),
        };
        for rel in artifacts {
            let h = file_hash(&self.out().join(&rel))
                .map_err(|e| StageError::new(stage, format!("{rel}: {e}")))?;
            rec.artifacts.insert(rel, h);
        }
        self.manifest.stages.insert(stage.name().into(), rec);
        self.save_manifest(stage)?;
        log::info!("{stage}: done");
        Ok(StageStatus::Ran)
    }
}

fn clear_stage_dir(dir: &Path, keep_sweep: bool) -> std::io::Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    if !keep_sweep {
        return fs::remove_dir_all(dir);
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_name() == "sweep" {
            continue;
        }
        if entry.file_type()?.is_dir() {
            fs::remove_dir_all(entry.path())?;
        } else {
            fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}

/// What a stage implementation sees.
pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
    pub hashes: &'a BTreeMap<Stage, String>,
}

pub type StageResult = Result<Vec<String>, String>;

impl Ctx<'_> {
    pub fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.out.join(stage.name()).join(file)
    }

    pub fn rel(&self, stage: Stage, file: &str) -> String {
        format!("{}/{file}", stage.name())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.out.join("cache")
    }

    pub fn write(&self, stage: Stage, file: &str, bytes: &[u8]) -> Result<String, String> {
        let p = self.path(stage, file);
        write_atomic(&p, bytes).map_err(|e| format!("{}: {e}", p.display()))?;
        Ok(self.rel(stage, file))
    }

    pub fn write_jsonl<T: Serialize>(
        &self,
        stage: Stage,
        file: &str,
        rows: &[T],
    ) -> Result<String, String> {
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, r).map_err(|e| e.to_string())?;
            buf.push(b'\n');
        }
        self.write(stage, file, &buf)
    }

    pub fn read_jsonl<T: serde::de::DeserializeOwned>(
        &self,
        stage: Stage,
        file: &str,
    ) -> Result<Vec<T>, String> {
        let p = self.path(stage, file);
        let raw = fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", p.display(), i + 1))
            })
            .collect()
    }

    pub fn save_dataset(&self, stage: Stage, ds: &PairedDataset) -> Result<String, String> {
        persist(ds, &self.path(stage, DATASET)).map_err(|e| e.to_string())?;
        Ok(self.rel(stage, DATASET))
    }

    pub fn load_dataset(&self, stage: Stage) -> Result<PairedDataset, String> {
        ingest(&self.path(stage, DATASET), Schema::Mixed)
            .map_err(|e| format!("{}: {e}", self.path(stage, DATASET).display()))
    }

    pub fn workers(&self) -> usize {
        self.cfg.workers
    }
}

pub const DATASET: &str = "dataset.jsonl";

fn curate(ds: PairedDataset, f: &SourceFilter, seed: u64) -> PairedDataset {
    let ds = filter_by_response_count(ds, f.min_responses, f.max_responses, Side::Src);
    let ds = filter_by_length(ds, f.min_words, f.max_words);
    match f.sample_per_instance {
        Some(n) => sample_per_instance(ds, n, Side::Src, seed),
        None => ds,
    }
}

fn merge(mut a: PairedDataset, b: PairedDataset) -> Result<PairedDataset, String> {
    let ids: BTreeSet<&str> = a.instances.iter().map(|i| i.instance_id.as_str()).collect();
    if let Some(dup) = b
        .instances
        .iter()
        .find(|i| ids.contains(i.instance_id.as_str()))
    {
        return Err(format!(
            "instance `{}` appears in both datasets",
            dup.instance_id
        ));
    }
    a.instances.extend(b.instances);
    a.notes.extend(b.notes);
    a.extend_responses(b.responses).map_err(|e| e.to_string())?;
    Ok(a)
}

/// Split by task kind, preserving order within each part.
fn split_by_kind(ds: PairedDataset) -> (PairedDataset, PairedDataset) {
    let kinds: HashMap<String, TaskKind> = ds
        .instances
        .iter()
        .map(|i| (i.instance_id.clone(), i.task_kind))
        .collect();
    let (rev_i, code_i): (Vec<TaskInstance>, Vec<TaskInstance>) = ds
        .instances
        .into_iter()
        .partition(|i| i.task_kind == TaskKind::Review);
    let (rev_r, code_r): (Vec<ResponseRecord>, Vec<ResponseRecord>) = ds
        .responses
        .into_iter()
        .partition(|r| kinds.get(&r.instance_id) == Some(&TaskKind::Review));
    (
        PairedDataset {
            instances: rev_i,
            responses: rev_r,
            notes: ds.notes,
        },
        PairedDataset {
            instances: code_i,
            responses: code_r,
            notes: Default::default(),
        },
    )
}

fn run_ingest(ctx: &Ctx) -> StageResult {
    let cfg = ctx.cfg;
    let mut ds = PairedDataset::default();
    for (path, schema, filter) in [
        (
            &cfg.dataset.reviews,
            Schema::ReviewJsonl,
            &cfg.filters.reviews,
        ),
        (&cfg.dataset.code, Schema::CodeJsonl, &cfg.filters.code),
    ] {
        let Some(path) = path else { continue };
        let raw = ingest(path, schema).map_err(|e| format!("{}: {e}", path.display()))?;
        let before = (raw.instances.len(), raw.responses.len());
        let part = curate(raw, filter, cfg.seed);
        log::info!(
            "{}: {} instances / {} responses kept of {} / {}",
            path.display(),
            part.instances.len(),
            part.responses.len(),
            before.0,
            before.1
        );
        ds = merge(ds, part)?;
    }
    if ds.instances.is_empty() {
        return Err("no instances survive the source filters".into());
    }
    let notes: Vec<_> = ds.notes.iter().collect();
    Ok(vec![
        ctx.save_dataset(Stage::Ingest, &ds)?,
        ctx.write_jsonl(Stage::Ingest, "notes.jsonl", &notes)?,
    ])
}

fn valid_fraction_csv(table: &ValidFractionTable) -> Vec<u8> {
    let mut out = String::from("instance_id,provenance,kept,total,fraction\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},\"{}\",{},{},{}\n",
            r.instance_id,
            r.provenance.replace('"', "\"\""),
            r.kept,
            r.total,
            r.fraction
        ));
    }
    out.into_bytes()
}

fn run_generate(ctx: &Ctx) -> StageResult {
    let cfg = ctx.cfg;
    let ds = ctx.load_dataset(Stage::Ingest)?;
    let Some(g) = &cfg.generation else {
        log::info!("generate: no [generation] section; passing the source dataset through");
        return Ok(vec![
            ctx.save_dataset(Stage::Generate, &ds)?,
            ctx.write_jsonl::<String>(Stage::Generate, "rejected.jsonl", &[])?,
        ]);
    };
    let spec = cfg.client_spec().expect("generation section present");
    let cache_path = g
        .replay_cache
        .clone()
        .unwrap_or_else(|| ctx.cache_dir().join("replay.jsonl"));
    let cache =
        ReplayCache::open(&cache_path).map_err(|e| format!("{}: {e}", cache_path.display()))?;
    let mut client = GenerationClient::new(&spec, cache);
    client.offline = g.offline;

    let settings = cfg.judge.as_ref().map(|j| j.settings());
    let judge_code = |inst: &TaskInstance, text: &str| -> bool {
        match (&inst.test_cases, &settings) {
            (Some(cases), Some(s)) => judge_solution(extract_program(text), cases, s).correct,
            _ => true,
        }
    };
    let accept: Option<&Acceptor> = if g.accept_correct_only {
        Some(&judge_code)
    } else {
        None
    };
    let opts = SweepOptions {
        state_dir: Some(ctx.path(Stage::Generate, "sweep")),
        workers: ctx.workers(),
        accept,
        match_kind: true,
    };
    let configs = cfg.generation_configs();
    let outcome = sweep(&client, &configs, ds, &opts).map_err(|e| e.to_string())?;
    log::info!(
        "generate: {} cells run, {} restored",
        outcome.cells_run,
        outcome.cells_skipped
    );
    if !outcome.errors.is_empty() {
        log::warn!(
            "generate: {} draws failed; see generate/errors.jsonl",
            outcome.errors.len()
        );
    }
    let mut ds = outcome.dataset;

    let kinds: HashMap<String, TaskKind> = ds
        .instances
        .iter()
        .map(|i| (i.instance_id.clone(), i.task_kind))
        .collect();
    let unscored: Vec<&ResponseRecord> = ds
        .responses
        .iter()
        .filter(|r| {
            r.side == Side::Gen
                && r.perplexity.is_none()
                && kinds.get(&r.instance_id) == Some(&TaskKind::Review)
        })
        .collect();
    let mut table = ValidFractionTable { rows: Vec::new() };
    if !unscored.is_empty() {
        let endpoint = g
            .perplexity_endpoint
            .as_deref()
            .ok_or("review generations need a perplexity_endpoint")?;
        let scores = score_perplexity(ctx, endpoint, &unscored)?;
        for r in &mut ds.responses {
            if let Some(p) = scores.get(&r.response_id) {
                r.perplexity = Some(*p);
            }
        }
    }
    let (reviews, code) = split_by_kind(ds);
    let reviews = if reviews.responses.iter().any(|r| r.side == Side::Gen) {
        let (kept, t) = perplexity_filter(reviews, cfg.filters.perplexity_threshold)
            .map_err(|e| e.to_string())?;
        table = t;
        kept
    } else {
        reviews
    };
    let ds = merge(reviews, code)?;
    let rejected: Vec<&String> = outcome.rejected.iter().collect();
    Ok(vec![
        ctx.save_dataset(Stage::Generate, &ds)?,
        ctx.write(
            Stage::Generate,
            "valid_fraction.csv",
            &valid_fraction_csv(&table),
        )?,
        ctx.write_jsonl(Stage::Generate, "rejected.jsonl", &rejected)?,
        ctx.write_jsonl(Stage::Generate, "errors.jsonl", &outcome.errors)?,
    ])
}

fn score_perplexity(
    ctx: &Ctx,
    endpoint: &str,
    records: &[&ResponseRecord],
) -> Result<HashMap<String, f64>, String> {
    let transport = HttpTransport::new(&ClientSpec::new(endpoint));
    let cache = open_extraction_cache(ctx)?;
    let extractor = Extractor::new(&transport, &cache);
    let spec = ExtractorSpec::remote("perplexity", ExtractorMode::RemoteClassifier, endpoint);
    let outcome = extract_all(
        &extractor,
        &[spec],
        records,
        |_| Some(TaskKind::Review),
        ctx.workers(),
    );
    if let Some(f) = outcome.failures.first() {
        return Err(format!(
            "perplexity scoring failed for {} responses (first: {}: {})",
            outcome.failures.len(),
            f.response_id,
            f.error
        ));
    }
    outcome
        .records
        .into_iter()
        .map(|r| match r.value.data.as_f64() {
            Some(p) if p > 0.0 => Ok((r.response_id, p)),
            _ => Err(format!(
                "perplexity for {} is not a positive number",
                r.response_id
            )),
        })
        .collect()
}

fn open_extraction_cache(ctx: &Ctx) -> Result<ExtractionCache, String> {
    let p = ctx.cache_dir().join("extraction.jsonl");
    ExtractionCache::open(&p).map_err(|e| format!("{}: {e}", p.display()))
}

pub const ATTRIBUTES: &str = "attributes.jsonl";

fn run_extract(ctx: &Ctx) -> StageResult {
    let ds = ctx.load_dataset(Stage::Generate)?;
    let transport = HttpTransport::new(&ClientSpec::new("stub://"));
    let cache = open_extraction_cache(ctx)?;
    let extractor = Extractor::new(&transport, &cache);
    let kinds: HashMap<&str, TaskKind> = ds
        .instances
        .iter()
        .map(|i| (i.instance_id.as_str(), i.task_kind))
        .collect();
    let responses: Vec<&ResponseRecord> = ds.responses.iter().collect();
    let outcome = extract_all(
        &extractor,
        &ctx.cfg.extractors,
        &responses,
        |id| kinds.get(id).copied(),
        ctx.workers(),
    );
    if !outcome.failures.is_empty() {
        log::warn!(
            "extract: {} values failed; see extract/failures.jsonl",
            outcome.failures.len()
        );
    }
    log::info!("extract: {} values", outcome.records.len());
    Ok(vec![
        ctx.write_jsonl(Stage::Extract, ATTRIBUTES, &outcome.records)?,
        ctx.write_jsonl(Stage::Extract, "failures.jsonl", &outcome.failures)?,
    ])
}

#[derive(Serialize)]
struct JudgeRow<'a> {
    response_id: &'a str,
    report: &'a JudgeReport,
}

fn run_judge(ctx: &Ctx) -> StageResult {
    let ds = ctx.load_dataset(Stage::Generate)?;
    let Some(j) = &ctx.cfg.judge else {
        return Ok(vec![
            ctx.write_jsonl::<ExtractedRecord>(Stage::Judge, ATTRIBUTES, &[])?,
            ctx.write_jsonl::<String>(Stage::Judge, "reports.jsonl", &[])?,
        ]);
    };
    let cases: HashMap<&str, &[_]> = ds
        .instances
        .iter()
        .filter_map(|i| Some((i.instance_id.as_str(), i.test_cases.as_deref()?)))
        .collect();
    let targets: Vec<&ResponseRecord> = ds
        .responses
        .iter()
        .filter(|r| cases.contains_key(r.instance_id.as_str()))
        .collect();
    let jobs: Vec<(&str, &[_])> = targets
        .iter()
        .map(|r| (extract_program(&r.text), cases[r.instance_id.as_str()]))
        .collect();
    let reports = judge_many(&jobs, &j.settings(), j.workers);
    let mut attrs = Vec::new();
    let mut rows = Vec::new();
    for (r, rep) in targets.iter().zip(&reports) {
        let rec = |id: &str, data| ExtractedRecord {
            response_id: r.response_id.clone(),
            value: AttributeValue::new(id, data),
        };
        attrs.push(rec(
            "correctness",
            AttributeData::Binary(u8::from(rep.correct)),
        ));
        attrs.push(rec("runtime", AttributeData::Scalar(rep.max_wall_ms)));
        attrs.push(rec("memory", AttributeData::Scalar(rep.max_peak_kb as f64)));
        rows.push(JudgeRow {
            response_id: &r.response_id,
            report: rep,
        });
    }
    log::info!(
        "judge: {} of {} solutions correct",
        reports.iter().filter(|r| r.correct).count(),
        reports.len()
    );
    Ok(vec![
        ctx.write_jsonl(Stage::Judge, ATTRIBUTES, &attrs)?,
        ctx.write_jsonl(Stage::Judge, "reports.jsonl", &rows)?,
    ])
}

#[derive(Serialize, Deserialize)]
pub struct PrintRow {
    pub response_id: String,
    pub fingerprint: FingerprintSet,
}

fn run_fingerprint(ctx: &Ctx) -> StageResult {
    let ds = ctx.load_dataset(Stage::Generate)?;
    let fp = Fingerprinter::new(ctx.cfg.winnow_params());
    let code: BTreeSet<&str> = ds
        .instances
        .iter()
        .filter(|i| i.task_kind == TaskKind::Code)
        .map(|i| i.instance_id.as_str())
        .collect();
    let mut rows: Vec<PrintRow> = ds
        .responses
        .iter()
        .filter(|r| code.contains(r.instance_id.as_str()))
        .map(|r| PrintRow {
            response_id: r.response_id.clone(),
            fingerprint: fp.fingerprint(extract_program(&r.text)),
        })
        .collect();
    rows.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    Ok(vec![ctx.write_jsonl(
        Stage::Fingerprint,
        "prints.jsonl",
        &rows,
    )?])
}

/// Canonical JSON of the settings that shaped a run, without machine paths.
pub fn run_description(cfg: &RunConfig, hashes: &BTreeMap<Stage, String>) -> serde_json::Value {
    let stage_hashes: BTreeMap<&str, &String> = hashes.iter().map(|(s, h)| (s.name(), h)).collect();
    json!({
        "seed": cfg.seed,
        "stage_hashes": stage_hashes,
        "filters": cfg.filters,
        "generation_configs": cfg.generation_configs().iter().map(|c| c.key()).collect::<Vec<_>>(),
        "extractors": cfg.extractors,
        "judge": cfg.judge,
        "fingerprint": cfg.fingerprint,
        "metric_plan": cfg.metric_plan(),
    })
}

/// Flush stdout-style progress for long stages.
pub fn print_status(stage: Stage, status: StageStatus) {
    let word = match status {
        StageStatus::Ran => "done",
        StageStatus::UpToDate => "up to date",
    };
    println!("{stage} {word}");
}
