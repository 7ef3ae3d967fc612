//! Runs candidate programs against stdin/stdout test cases.
//!
//! Each case is a fresh child process in its own process group with an
//! address-space limit. Wall time is measured around the child; peak resident
//! memory comes from the kernel's accounting of the reaped child.

use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use crate::dataset::TestCase;

const STDERR_CAP: usize = 64 * 1024;
const POLL: Duration = Duration::from_millis(1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunLimits {
    pub wall_timeout_ms: u64,
    pub memory_cap_kb: u64,
    pub output_cap_bytes: usize,
}

impl Default for RunLimits {
    fn default() -> Self {
        Self {
            wall_timeout_ms: 10_000,
            memory_cap_kb: 512 * 1024,
            output_cap_bytes: 1024 * 1024,
        }
    }
}

impl RunLimits {
    pub fn validate(&self) -> Result<(), String> {
        if self.wall_timeout_ms == 0 || self.memory_cap_kb == 0 || self.output_cap_bytes == 0 {
            return Err("judge limits must all be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    WrongAnswer,
    Timeout,
    RuntimeError,
    MemoryExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub verdict: Verdict,
    pub wall_ms: f64,
    pub peak_kb: u64,
    pub stdout: String,
    pub stderr: String,
}

impl RunOutcome {
    fn spawn_failure(message: String) -> Self {
        Self {
            verdict: Verdict::RuntimeError,
            wall_ms: 0.0,
            peak_kb: 0,
            stdout: String::new(),
            stderr: message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub outcomes: Vec<RunOutcome>,
    pub correct: bool,
    pub max_wall_ms: f64,
    pub max_peak_kb: u64,
}

impl JudgeReport {
    pub fn from_outcomes(outcomes: Vec<RunOutcome>) -> Self {
        let correct = !outcomes.is_empty() && outcomes.iter().all(|o| o.verdict == Verdict::Pass);
        let max_wall_ms = outcomes.iter().map(|o| o.wall_ms).fold(0.0, f64::max);
        let max_peak_kb = outcomes.iter().map(|o| o.peak_kb).max().unwrap_or(0);
        Self {
            outcomes,
            correct,
            max_wall_ms,
            max_peak_kb,
        }
    }
}

/// The program inside a model response: the first fenced code block if
/// there is one, else the whole text.
pub fn extract_program(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let after = &text[open + 3..];
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

/// Replace `{file}` in each argument.
pub fn instantiate(template: &[String], file: &Path) -> Vec<String> {
    let f = file.to_string_lossy();
    template.iter().map(|a| a.replace("{file}", &f)).collect()
}

/// Split an interpreter template such as `python3 {file}` on whitespace.
pub fn parse_command_template(template: &str) -> Vec<String> {
    template.split_whitespace().map(str::to_string).collect()
}

/// Reads a pipe to EOF, keeping at most `cap` bytes. Sets `overflow` and
/// kills the process group once more than `cap` bytes arrive.
fn drain<R: Read + Send + 'static>(
    mut pipe: R,
    cap: usize,
    pgid: Option<i32>,
    overflow: Arc<AtomicBool>,
) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    if n > room && !overflow.swap(true, Ordering::SeqCst) {
                        if let Some(pg) = pgid {
                            // SAFETY: signalling a process group we created.
                            unsafe { libc::killpg(pg, libc::SIGKILL) };
                        }
                    }
                }
            }
        }
        kept
    })
}

/// Block until `pid` exits or `deadline` passes, returning status and rusage.
fn wait_with_deadline(pid: i32, deadline: Instant) -> (Option<i32>, libc::rusage, bool) {
    // SAFETY: rusage is plain old data; zeroed is a valid value.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let mut status = 0;
    let mut timed_out = false;
    loop {
        // SAFETY: pid is our unreaped child; pointers are to live locals.
        let r = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut usage) };
        if r == pid {
            return (Some(status), usage, timed_out);
        }
        if r < 0 {
            return (None, usage, timed_out);
        }
        if !timed_out && Instant::now() >= deadline {
            timed_out = true;
            // SAFETY: the child leads its own process group.
            unsafe { libc::killpg(pid, libc::SIGKILL) };
            // SAFETY: as above; this wait blocks until the killed child is reaped.
            let r = unsafe { libc::wait4(pid, &mut status, 0, &mut usage) };
            return (if r == pid { Some(status) } else { None }, usage, timed_out);
        }
        thread::sleep(POLL);
    }
}

/// Execute `argv` once with `stdin` piped in. The verdict reflects execution
/// only: `Pass` means a clean exit, output is not compared here.
pub fn run_one(argv: &[String], stdin: &str, limits: &RunLimits, cwd: Option<&Path>) -> RunOutcome {
    let Some((program, args)) = argv.split_first() else {
        return RunOutcome::spawn_failure("empty command".into());
    };
    let mut cmd = Command::new(program);
    cmd.args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    let mem_bytes = limits.memory_cap_kb.saturating_mul(1024);
    // SAFETY: only async-signal-safe calls between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            let lim = libc::rlimit {
                rlim_cur: mem_bytes as libc::rlim_t,
                rlim_max: mem_bytes as libc::rlim_t,
            };
            if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return RunOutcome::spawn_failure(format!("failed to spawn `{program}`: {e}")),
    };
    let pid = child.id() as i32;
    let overflow = Arc::new(AtomicBool::new(false));
    let out_t = drain(
        child.stdout.take().expect("piped"),
        limits.output_cap_bytes,
        Some(pid),
        Arc::clone(&overflow),
    );
    let err_t = drain(
        child.stderr.take().expect("piped"),
        STDERR_CAP,
        None,
        Arc::new(AtomicBool::new(false)),
    );
    let mut child_stdin = child.stdin.take().expect("piped");
    let input = stdin.as_bytes().to_vec();
    let in_t = thread::spawn(move || {
        // A program that exits without reading closes the pipe; that is not an error.
        let _ = child_stdin.write_all(&input);
    });

    let deadline = start + Duration::from_millis(limits.wall_timeout_ms);
    let (status, usage, timed_out) = wait_with_deadline(pid, deadline);
    let wall_ms = start.elapsed().as_secs_f64() * 1000.0;
    // Grandchildren may still hold the pipes open.
    // SAFETY: signalling the group we created; harmless if it is gone.
    unsafe { libc::killpg(pid, libc::SIGKILL) };
    let _ = in_t.join();
    let stdout = String::from_utf8_lossy(&out_t.join().unwrap_or_default()).into_owned();
    let mut stderr = String::from_utf8_lossy(&err_t.join().unwrap_or_default()).into_owned();
    let peak_kb = u64::try_from(usage.ru_maxrss).unwrap_or(0);

    let verdict = if timed_out {
        Verdict::Timeout
    } else if overflow.load(Ordering::SeqCst) {
        stderr.push_str("\noutput limit exceeded");
        Verdict::RuntimeError
    } else if stderr.contains("MemoryError") || peak_kb >= limits.memory_cap_kb {
        Verdict::MemoryExceeded
    } else {
        match status {
            Some(s) if libc::WIFEXITED(s) && libc::WEXITSTATUS(s) == 0 => Verdict::Pass,
            Some(s) if libc::WIFSIGNALED(s) => {
                stderr.push_str(&format!("\nkilled by signal {}", libc::WTERMSIG(s)));
                Verdict::RuntimeError
            }
            _ => Verdict::RuntimeError,
        }
    };
    RunOutcome {
        verdict,
        wall_ms,
        peak_kb,
        stdout,
        stderr,
    }
}

/// Output after trimming trailing whitespace on each line and dropping
/// trailing blank lines.
pub fn normalize_output(s: &str) -> String {
    let mut lines: Vec<&str> = s.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

pub fn outputs_match(actual: &str, expected: &str) -> bool {
    normalize_output(actual) == normalize_output(expected)
}

/// Run one case and compare its output.
pub fn run_case(
    argv: &[String],
    case: &TestCase,
    limits: &RunLimits,
    cwd: Option<&Path>,
) -> RunOutcome {
    let mut out = run_one(argv, &case.input, limits, cwd);
    if out.verdict == Verdict::Pass && !outputs_match(&out.stdout, &case.expected_output) {
        out.verdict = Verdict::WrongAnswer;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSettings {
    pub interpreter: Vec<String>,
    pub limits: RunLimits,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        Self {
            interpreter: parse_command_template("python3 {file}"),
            limits: RunLimits::default(),
        }
    }
}

/// Write `code` to a scratch directory and run it on every case.
pub fn judge_solution(code: &str, cases: &[TestCase], settings: &JudgeSettings) -> JudgeReport {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            let fail = RunOutcome::spawn_failure(format!("cannot create scratch dir: {e}"));
            return JudgeReport::from_outcomes(vec![fail; cases.len().max(1)]);
        }
    };
    let file = dir.path().join("solution.py");
    if let Err(e) = std::fs::write(&file, code) {
        let fail = RunOutcome::spawn_failure(format!("cannot write solution: {e}"));
        return JudgeReport::from_outcomes(vec![fail; cases.len().max(1)]);
    }
    let argv = instantiate(&settings.interpreter, &file);
    let outcomes = cases
        .iter()
        .map(|c| run_case(&argv, c, &settings.limits, Some(dir.path())))
        .collect();
    JudgeReport::from_outcomes(outcomes)
}

/// Judge many solutions on a bounded pool; `workers == 1` gives serial
/// timing runs. Output order matches input order.
pub fn judge_many(
    jobs: &[(&str, &[TestCase])],
    settings: &JudgeSettings,
    workers: usize,
) -> Vec<JudgeReport> {
    use rayon::prelude::*;
    if workers <= 1 {
        return jobs
            .iter()
            .map(|(code, cases)| judge_solution(code, cases, settings))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| {
        jobs.par_iter()
            .map(|(code, cases)| judge_solution(code, cases, settings))
            .collect()
    })
}

/// Fraction of correct reports; `None` for an empty list.
pub fn accuracy(reports: &[JudgeReport]) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().filter(|r| r.correct).count() as f64 / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn program_extraction() {
        assert_eq!(extract_program("print(1)\n"), "print(1)\n");
        assert_eq!(
            extract_program("Here:\n```python\nprint(1)\n```\nDone"),
            "print(1)\n"
        );
        assert_eq!(extract_program("```\nx = 1\n```\n```\ny\n```"), "x = 1\n");
        assert_eq!(extract_program("```py\nunterminated"), "unterminated");
    }

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    fn case(i: &str, o: &str) -> TestCase {
        TestCase {
            input: i.into(),
            expected_output: o.into(),
        }
    }

    #[test]
    fn comparison_rule() {
        assert!(outputs_match("hi\n", "hi"));
        assert!(outputs_match("a  \nb\n\n\n", "a\nb"));
        assert!(outputs_match("a\r\nb\r\n", "a\nb\n"));
        assert!(!outputs_match("a\n\nb", "a\nb"));
        assert!(!outputs_match(" a", "a"));
    }

    #[test]
    fn echo_passes() {
        let out = run_case(&sh("cat"), &case("hi\n", "hi"), &RunLimits::default(), None);
        assert_eq!(out.verdict, Verdict::Pass);
        assert!(out.wall_ms >= 0.0);
    }

    #[test]
    fn wrong_answer_and_runtime_error() {
        let l = RunLimits::default();
        assert_eq!(
            run_case(&sh("echo nope"), &case("", "yes"), &l, None).verdict,
            Verdict::WrongAnswer
        );
        assert_eq!(
            run_case(&sh("exit 3"), &case("", ""), &l, None).verdict,
            Verdict::RuntimeError
        );
        let missing = run_one(&["/definitely/not/here".to_string()], "", &l, None);
        assert_eq!(missing.verdict, Verdict::RuntimeError);
        assert!(missing.stderr.contains("failed to spawn"));
    }

    #[test]
    fn timeout_kills_group() {
        let l = RunLimits {
            wall_timeout_ms: 300,
            ..RunLimits::default()
        };
        let out = run_one(&sh("sleep 5 & sleep 5; wait"), "", &l, None);
        assert_eq!(out.verdict, Verdict::Timeout);
        assert!(
            out.wall_ms >= 300.0 && out.wall_ms < 1500.0,
            "{}",
            out.wall_ms
        );
    }

    #[test]
    fn output_cap_enforced() {
        let l = RunLimits {
            output_cap_bytes: 1000,
            ..RunLimits::default()
        };
        let out = run_one(&sh("yes"), "", &l, None);
        assert_eq!(out.verdict, Verdict::RuntimeError);
        assert_eq!(out.stdout.len(), 1000);
    }

    #[test]
    fn report_aggregation() {
        let mk = |v, w, p| RunOutcome {
            verdict: v,
            wall_ms: w,
            peak_kb: p,
            stdout: String::new(),
            stderr: String::new(),
        };
        let r =
            JudgeReport::from_outcomes(vec![mk(Verdict::Pass, 5.0, 10), mk(Verdict::Pass, 9.0, 7)]);
        assert!(r.correct);
        assert_eq!((r.max_wall_ms, r.max_peak_kb), (9.0, 10));
        let mut outcomes = r.outcomes.clone();
        outcomes.push(mk(Verdict::WrongAnswer, 1.0, 1));
        assert!(!JudgeReport::from_outcomes(outcomes).correct);
        assert!(!JudgeReport::from_outcomes(vec![]).correct);
    }

    #[test]
    fn accuracy_ratio() {
        let good = JudgeReport::from_outcomes(vec![RunOutcome {
            verdict: Verdict::Pass,
            wall_ms: 0.0,
            peak_kb: 0,
            stdout: String::new(),
            stderr: String::new(),
        }]);
        let bad = JudgeReport::from_outcomes(vec![]);
        assert_eq!(accuracy(&[]), None);
        assert_eq!(accuracy(&[good.clone(), good.clone()]), Some(1.0));
        assert_eq!(accuracy(std::slice::from_ref(&bad)), Some(0.0));
        let mut v = vec![good; 20];
        v.extend(vec![bad; 80]);
        assert_eq!(accuracy(&v), Some(0.2));
    }
}
