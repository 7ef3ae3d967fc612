use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/toy")
        .join(file)
}

fn gemometer(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gemometer"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Review-only run: no code, judge or fingerprinting, so it finishes quickly.
fn review_run(dir: &Path, extractors: &str) -> PathBuf {
    std::fs::copy(toy("reviews.jsonl"), dir.join("reviews.jsonl")).unwrap();
    std::fs::copy(toy("replay.jsonl"), dir.join("replay.jsonl")).unwrap();
    let cfg = format!(
        r#"
seed = 11
output_dir = "out"

[dataset]
reviews = "reviews.jsonl"

[filters.reviews]
min_responses = 10
max_responses = 100
min_words = 20
max_words = 200
sample_per_instance = 8

[generation]
endpoint = "stub://completion"
replay_cache = "replay.jsonl"
offline = true
perplexity_endpoint = "stub://perplexity"

[[generation.sweeps]]
task = "review"
model_id = "stub-lm"
template_id = "review_plain"
temperatures = [0.5, 1.0]
top_ps = [1.0]
samples_per_instance = 8
{extractors}"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

const SENTIMENT: &str = r#"
[[extractors]]
attribute_id = "sentiment"
mode = "remote_classifier"
endpoint = "stub://sentiment"
"#;

#[test]
fn rerun_is_a_no_op_and_edits_invalidate_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = review_run(dir.path(), SENTIMENT);
    let first = gemometer(&["run-all"], &cfg);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(
        stdout(&first).lines().all(|l| l.ends_with(" done")),
        "{}",
        stdout(&first)
    );
    let summary = dir.path().join("out/report/summary.json");
    let before = std::fs::read(&summary).unwrap();

    let again = gemometer(&["run-all"], &cfg);
    assert!(again.status.success());
    assert!(
        stdout(&again).lines().all(|l| l.ends_with(" up to date")),
        "{}",
        stdout(&again)
    );
    assert_eq!(std::fs::read(&summary).unwrap(), before);

    // One source review fewer changes the ingest hash and everything after it.
    let data = std::fs::read_to_string(dir.path().join("reviews.jsonl")).unwrap();
    let trimmed: Vec<&str> = data
        .lines()
        .filter(|l| !l.contains("\"b1-src-00\""))
        .collect();
    std::fs::write(dir.path().join("reviews.jsonl"), trimmed.join("\n")).unwrap();
    let edited = gemometer(&["run-all"], &cfg);
    assert!(edited.status.success(), "{}", stderr(&edited));
    assert!(
        stdout(&edited).contains("ingest done") && stdout(&edited).contains("report done"),
        "stdout: {}\nstderr: {}",
        stdout(&edited),
        stderr(&edited)
    );

    // Tampering with an artifact makes its stage stale.
    std::fs::write(dir.path().join("out/analyze/analysis.json"), b"{}").unwrap();
    let repaired = gemometer(&["run-all"], &cfg);
    let out = stdout(&repaired);
    assert!(
        out.contains("ingest up to date") && out.contains("analyze done"),
        "{out}"
    );
}

#[test]
fn stage_needs_current_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = review_run(dir.path(), SENTIMENT);
    let early = gemometer(&["analyze"], &cfg);
    assert_eq!(early.status.code(), Some(1));
    assert!(
        stderr(&early).contains("error[analyze]"),
        "{}",
        stderr(&early)
    );
    assert!(gemometer(&["ingest"], &cfg).status.success());
    let gen = gemometer(&["generate"], &cfg);
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(dir.path().join("out/generate/valid_fraction.csv").exists());
}

#[test]
fn nothing_to_analyze_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = review_run(dir.path(), "");
    let out = gemometer(&["run-all"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("nothing to analyze"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "output_dir = \"out\"\nworkers = 0\n[dataset]\nreviews = \"missing.jsonl\"\n[fingerprint]\nk = 0\nw = 4\n",
    )
    .unwrap();
    let out = gemometer(&["check"], &path);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for needle in ["workers", "missing.jsonl", "fingerprint"] {
        assert!(err.contains(needle), "`{needle}` not reported in:\n{err}");
    }
    let ok = gemometer(&["check"], &toy("run.toml"));
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn extractors_work_over_real_http() {
    let server = gemometer_core::stub::StubServer::start().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = review_run(
        dir.path(),
        &SENTIMENT.replace("stub://sentiment", &server.url("sentiment")),
    );
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("stub://perplexity", &server.url("perplexity"));
    std::fs::write(&cfg, text).unwrap();
    let out = gemometer(&["run-all"], &cfg);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report/summary.json")).unwrap())
            .unwrap();
    let schema: serde_json::Value =
        serde_json::from_str(gemometer_core::report::SUMMARY_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(&summary)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{errors:?}");
    let verdicts = std::fs::read_to_string(dir.path().join("out/report/verdicts.csv")).unwrap();
    assert!(verdicts.lines().count() >= 3, "{verdicts}");
    assert!(
        verdicts
            .lines()
            .skip(1)
            .all(|l| l.starts_with("sentiment,entropy,source,")),
        "{verdicts}"
    );
}

#[test]
fn changed_upstream_output_makes_downstream_stale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = review_run(dir.path(), SENTIMENT);
    assert!(gemometer(&["run-all"], &cfg).status.success());

    // Rewrite an extract artifact and record its new hash, as a rerun with
    // different output would.
    let out = dir.path().join("out");
    let attrs = out.join("extract/attributes.jsonl");
    let mut text = std::fs::read_to_string(&attrs).unwrap();
    text.push('\n');
    std::fs::write(&attrs, &text).unwrap();
    let manifest_path = out.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    let digest = gemometer_core::util::sha256_fields([text.as_bytes()]);
    manifest["stages"]["extract"]["artifacts"]["extract/attributes.jsonl"] =
        serde_json::json!(digest);
    std::fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&manifest).unwrap(),
    )
    .unwrap();

    let rerun = stdout(&gemometer(&["run-all"], &cfg));
    assert!(
        rerun.contains("extract up to date") && rerun.contains("analyze done"),
        "{rerun}"
    );
}

#[test]
fn standalone_fingerprint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let solutions = dir.path().join("solutions");
    std::fs::create_dir_all(&solutions).unwrap();
    std::fs::write(
        solutions.join("a.py"),
        "n = int(input())\nprint(n * 2 + 1)\n",
    )
    .unwrap();
    std::fs::write(
        solutions.join("b.py"),
        "# renamed\nm = int(input())\nprint(m * 2 + 1)\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gemometer"))
        .args(["fingerprint", "--k", "3", "--w", "2", "--dir"])
        .arg(&solutions)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "solutions 1");
    let means = std::fs::read_to_string(dir.path().join("means.csv")).unwrap();
    assert_eq!(means, "problem,n,mean\nsolutions,2,1\n");

    let cfg = review_run(dir.path(), SENTIMENT);
    assert!(gemometer(&["run-all"], &cfg).status.success());
    let figs = dir.path().join("figs");
    let rendered = Command::new(env!("CARGO_BIN_EXE_gemometer"))
        .arg("report")
        .arg("--in")
        .arg(dir.path().join("out/analyze"))
        .arg("--out")
        .arg(&figs)
        .output()
        .unwrap();
    assert!(rendered.status.success(), "{}", stderr(&rendered));
    let ours = std::fs::read(figs.join("verdicts.csv")).unwrap();
    assert_eq!(
        ours,
        std::fs::read(dir.path().join("out/report/verdicts.csv")).unwrap()
    );
    assert!(figs.join("figures/sentiment_mean_buckets.svg").exists());
}
