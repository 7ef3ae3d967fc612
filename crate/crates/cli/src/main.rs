use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gemometer::config::RunConfig;
use gemometer::pipeline::{print_status, Pipeline, RunOptions, Stage};
use gemometer::standalone::{fingerprint_dir, judge_dir, report_from, write_matrices};
use gemometer_core::fingerprint::WinnowParams;
use gemometer_core::judge::{parse_command_template, JudgeSettings, RunLimits};
use gemometer_core::stub::{StubServer, SERVICES};

#[derive(Parser)]
#[command(
    name = "gemometer",
    version,
    about = "Measure narrowing of attribute distributions in model generations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue an interrupted generation sweep from its saved state.
    #[arg(long)]
    resume: bool,
    /// Override the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rerun even if the stage's artifacts are current.
    #[arg(long)]
    force: bool,
}

/// Overrides for the review source filters.
#[derive(Args)]
struct FilterOverrides {
    #[arg(long)]
    min_words: Option<usize>,
    #[arg(long)]
    max_words: Option<usize>,
    #[arg(long)]
    min_responses: Option<usize>,
    #[arg(long)]
    max_responses: Option<usize>,
    #[arg(long)]
    sample_n: Option<usize>,
    #[arg(long)]
    ppl_threshold: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    filters: FilterOverrides,
}

#[derive(Args)]
#[group(id = "fingerprint_dir", conflicts_with = "config")]
struct FingerprintDirArgs {
    /// Solutions to compare; each subdirectory is one problem.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = WinnowParams::default().k)]
    k: usize,
    #[arg(long, default_value_t = WinnowParams::default().w)]
    w: usize,
    /// Directory for the per-problem matrices and means.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FingerprintArgs {
    #[command(flatten)]
    run: Option<RunArgs>,
    #[command(flatten)]
    standalone: Option<FingerprintDirArgs>,
}

#[derive(Args)]
#[group(id = "judge_dir", conflicts_with = "config")]
struct JudgeDirArgs {
    /// Problems with test cases, as code JSONL.
    #[arg(long, requires = "solutions")]
    problems: PathBuf,
    /// One subdirectory per problem id, one file per solution.
    #[arg(long)]
    solutions: PathBuf,
    #[arg(long, default_value = "python3 {file}")]
    interpreter: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Judge one solution at a time for stable timings.
    #[arg(long)]
    serial: bool,
    #[arg(long, default_value_t = RunLimits::default().wall_timeout_ms)]
    timeout_ms: u64,
    #[arg(long, default_value_t = RunLimits::default().memory_cap_kb)]
    memory_kb: u64,
}

#[derive(Args)]
struct JudgeArgs {
    #[command(flatten)]
    run: Option<RunArgs>,
    #[command(flatten)]
    standalone: Option<JudgeDirArgs>,
}

#[derive(Args)]
#[group(id = "report_dir", conflicts_with = "config")]
struct ReportDirArgs {
    /// analysis.json, or the directory holding it.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    run: Option<RunArgs>,
    #[command(flatten)]
    standalone: Option<ReportDirArgs>,
}

#[derive(Subcommand)]
enum Command {
    /// Read and curate the source datasets.
    Ingest(IngestArgs),
    /// Sample generations and apply the perplexity filter.
    Generate(RunArgs),
    /// Extract attributes from every response.
    Extract(RunArgs),
    /// Run code responses against their test cases.
    #[command(
        override_usage = "gemometer judge --config <CONFIG> [--force]\n       \
                                gemometer judge --problems <JSONL> --solutions <DIR> [OPTIONS]"
    )]
    Judge(JudgeArgs),
    /// Winnowing fingerprints of code responses.
    #[command(
        override_usage = "gemometer fingerprint --config <CONFIG> [--force]\n       \
                                gemometer fingerprint --dir <DIR> [--k <K>] [--w <W>] [--out <DIR>]"
    )]
    Fingerprint(FingerprintArgs),
    /// Dispersion statistics and verdicts.
    Analyze(RunArgs),
    /// CSV, SVG and JSON outputs.
    #[command(
        override_usage = "gemometer report --config <CONFIG> [--force]\n       \
                                gemometer report --in <ANALYSIS> --out <DIR>"
    )]
    Report(ReportArgs),
    /// Every stage in order, skipping current ones.
    RunAll(RunArgs),
    /// Validate a configuration and list every problem.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the offline stub services over HTTP until interrupted.
    StubServer,
}

fn load(args: &RunArgs, overrides: Option<&FilterOverrides>) -> Result<Pipeline, ExitCode> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| {
        eprintln!("error[config]: {e}");
        ExitCode::from(2)
    })?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = overrides {
        let f = &mut cfg.filters;
        f.reviews.min_words = o.min_words.unwrap_or(f.reviews.min_words);
        f.reviews.max_words = o.max_words.unwrap_or(f.reviews.max_words);
        f.reviews.min_responses = o.min_responses.unwrap_or(f.reviews.min_responses);
        f.reviews.max_responses = o.max_responses.unwrap_or(f.reviews.max_responses);
        f.reviews.sample_per_instance = o.sample_n.or(f.reviews.sample_per_instance);
        f.perplexity_threshold = o.ppl_threshold.unwrap_or(f.perplexity_threshold);
        let problems = cfg.problems();
        if !problems.is_empty() {
            eprintln!(
                "error[config]: {}",
                gemometer::config::ConfigError::Invalid(problems)
            );
            return Err(ExitCode::from(2));
        }
    }
    Pipeline::new(
        cfg,
        RunOptions {
            resume: args.resume,
            force: args.force,
        },
    )
    .map_err(|e| {
        eprintln!("error[{}]: {e}", e.stage);
        ExitCode::FAILURE
    })
}

fn run(args: &RunArgs, stage: Option<Stage>) -> ExitCode {
    run_with(args, stage, None)
}

fn run_with(args: &RunArgs, stage: Option<Stage>, overrides: Option<&FilterOverrides>) -> ExitCode {
    let mut p = match load(args, overrides) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let result = match stage {
        Some(s) => p.run_stage(s).map(|st| vec![(s, st)]),
        None => p.run_all(),
    };
    match result {
        Ok(done) => {
            for (s, st) in done {
                print_status(s, st);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.stage);
            ExitCode::FAILURE
        }
    }
}

fn usage(cmd: &str, need: &str) -> ExitCode {
    eprintln!("error[{cmd}]: needs {need}");
    ExitCode::from(2)
}

fn standalone(cmd: &str, result: Result<(), String>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{cmd}]: {e}");
            ExitCode::FAILURE
        }
    }
}

fn fingerprint_standalone(a: &FingerprintDirArgs) -> ExitCode {
    let result = WinnowParams::new(a.k, a.w)
        .map_err(|e| e.to_string())
        .and_then(|params| {
            let matrices = fingerprint_dir(&a.dir, params)?;
            write_matrices(&matrices, &a.out)?;
            for m in &matrices {
                println!("{} {}", m.problem, m.mean);
            }
            Ok(())
        });
    standalone("fingerprint", result)
}

fn judge_standalone(a: &JudgeDirArgs) -> ExitCode {
    let limits = RunLimits {
        wall_timeout_ms: a.timeout_ms,
        memory_cap_kb: a.memory_kb,
        ..RunLimits::default()
    };
    let settings = JudgeSettings {
        interpreter: parse_command_template(&a.interpreter),
        limits,
    };
    let workers = if a.serial { 1 } else { a.workers.max(1) };
    let result = limits
        .validate()
        .and_then(|()| judge_dir(&a.problems, &a.solutions, &settings, workers))
        .map(|rows| {
            for r in rows {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            }
        });
    standalone("judge", result)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest(a) => run_with(&a.run, Some(Stage::Ingest), Some(&a.filters)),
        Command::Generate(a) => run(a, Some(Stage::Generate)),
        Command::Extract(a) => run(a, Some(Stage::Extract)),
        Command::Judge(a) => match (&a.run, &a.standalone) {
            (Some(r), _) => run(r, Some(Stage::Judge)),
            (None, Some(j)) => judge_standalone(j),
            (None, None) => usage("judge", "--config or --problems/--solutions"),
        },
        Command::Fingerprint(a) => match (&a.run, &a.standalone) {
            (Some(r), _) => run(r, Some(Stage::Fingerprint)),
            (None, Some(f)) => fingerprint_standalone(f),
            (None, None) => usage("fingerprint", "--config or --dir"),
        },
        Command::Analyze(a) => run(a, Some(Stage::Analyze)),
        Command::Report(a) => match (&a.run, &a.standalone) {
            (Some(r), _) => run(r, Some(Stage::Report)),
            (None, Some(d)) => standalone(
                "report",
                report_from(&d.input, &d.out).map(|files| {
                    for f in files {
                        println!("{}", d.out.join(f).display());
                    }
                }),
            ),
            (None, None) => usage("report", "--config or --in/--out"),
        },
        Command::RunAll(a) => run(a, None),
        Command::Check { config } => match RunConfig::load(config) {
            Ok(_) => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error[config]: {e}");
                ExitCode::from(2)
            }
        },
        Command::StubServer => match StubServer::start() {
            Ok(server) => {
                for s in SERVICES {
                    println!("{s} {}", server.url(s));
                }
                loop {
                    std::thread::park();
                }
            }
            Err(e) => {
                eprintln!("error[stub-server]: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
