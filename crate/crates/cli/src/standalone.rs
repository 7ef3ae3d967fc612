//! Single-stage invocations that work on plain directories instead of a run
//! configuration: fingerprint a folder of solutions, judge solutions against
//! a problem file, or render a report from a saved analysis.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gemometer_core::dataset::{ingest, Schema, TestCase};
use gemometer_core::fingerprint::{pairwise_fingerprint_matrix, Fingerprinter, WinnowParams};
use gemometer_core::judge::{judge_many, JudgeReport, JudgeSettings};
use gemometer_core::util::write_atomic;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{read_analysis, write_report};

/// Regular files directly inside `dir`, sorted by name.
fn files_in(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Subdirectories of `dir`, sorted by name.
fn subdirs(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemMatrix {
    pub problem: String,
    pub files: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub mean: f64,
}

impl ProblemMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("file");
        for f in &self.files {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for (f, row) in self.files.iter().zip(&self.matrix) {
            out.push_str(f);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One matrix per problem. Each subdirectory of `dir` is a problem; with no
/// subdirectories, `dir` itself is the only problem.
pub fn fingerprint_dir(dir: &Path, params: WinnowParams) -> Result<Vec<ProblemMatrix>, String> {
    let mut problems = subdirs(dir)?;
    if problems.is_empty() {
        problems.push(dir.to_path_buf());
    }
    let f = Fingerprinter::new(params);
    let mut out = Vec::new();
    for p in problems {
        let files = files_in(&p)?;
        if files.len() < 2 {
            log::warn!("{}: fewer than two solutions; skipped", p.display());
            continue;
        }
        let mut sets = Vec::new();
        for file in &files {
            let src = fs::read_to_string(file).map_err(|e| format!("{}: {e}", file.display()))?;
            sets.push(f.fingerprint(&src));
        }
        let m = pairwise_fingerprint_matrix(&sets).map_err(|e| format!("{}: {e}", p.display()))?;
        out.push(ProblemMatrix {
            problem: file_name(&p),
            files: files.iter().map(|f| file_name(f)).collect(),
            matrix: m.matrix,
            mean: m.mean,
        });
    }
    Ok(out)
}

/// Writes `<problem>.csv` per matrix and `means.csv` into `out`.
pub fn write_matrices(matrices: &[ProblemMatrix], out: &Path) -> Result<(), String> {
    let mut means = String::from("problem,n,mean\n");
    for m in matrices {
        let p = out.join(format!("{}.csv", m.problem));
        write_atomic(&p, m.to_csv().as_bytes()).map_err(|e| format!("{}: {e}", p.display()))?;
        means.push_str(&format!("{},{},{}\n", m.problem, m.files.len(), m.mean));
    }
    let p = out.join("means.csv");
    write_atomic(&p, means.as_bytes()).map_err(|e| format!("{}: {e}", p.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct JudgedSolution {
    pub instance_id: String,
    pub solution: String,
    #[serde(flatten)]
    pub report: JudgeReport,
}

/// Judge `solutions/<instance_id>/*` against the test cases in `problems`.
pub fn judge_dir(
    problems: &Path,
    solutions: &Path,
    settings: &JudgeSettings,
    workers: usize,
) -> Result<Vec<JudgedSolution>, String> {
    let ds =
        ingest(problems, Schema::CodeJsonl).map_err(|e| format!("{}: {e}", problems.display()))?;
    let cases: BTreeMap<&str, &[TestCase]> = ds
        .instances
        .iter()
        .filter_map(|i| Some((i.instance_id.as_str(), i.test_cases.as_deref()?)))
        .collect();
    let mut jobs: Vec<(String, String, String)> = Vec::new();
    for dir in subdirs(solutions)? {
        let id = file_name(&dir);
        if !cases.contains_key(id.as_str()) {
            return Err(format!(
                "{}: no problem `{id}` in {}",
                dir.display(),
                problems.display()
            ));
        }
        for file in files_in(&dir)? {
            let code = fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            jobs.push((id.clone(), file_name(&file), code));
        }
    }
    let refs: Vec<(&str, &[TestCase])> = jobs
        .iter()
        .map(|(id, _, code)| (code.as_str(), cases[id.as_str()]))
        .collect();
    let reports = judge_many(&refs, settings, workers);
    Ok(jobs
        .into_iter()
        .zip(reports)
        .map(|((instance_id, solution, _), report)| JudgedSolution {
            instance_id,
            solution,
            report,
        })
        .collect())
}

/// Render a report from `analysis.json` (or a directory holding it) into `out`.
pub fn report_from(input: &Path, out: &Path) -> Result<Vec<String>, String> {
    let file = if input.is_dir() {
        input.join("analysis.json")
    } else {
        input.to_path_buf()
    };
    let analysis = read_analysis(&file)?;
    let manifest = json!({ "analysis": file_name(&file) });
    write_report(analysis, manifest, |name, bytes| {
        let p = out.join(name);
        write_atomic(&p, bytes).map_err(|e| format!("{}: {e}", p.display()))?;
        Ok(name.to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_directory_is_one_problem() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.py"), "x = 1\nprint(x + 2)\n").unwrap();
        fs::write(dir.path().join("b.py"), "# same\ny = 1\nprint(y + 2)\n").unwrap();
        fs::write(
            dir.path().join("c.py"),
            "for i in range(10):\n    print(i * i, i - 1)\n",
        )
        .unwrap();
        let ms = fingerprint_dir(dir.path(), WinnowParams::new(3, 2).unwrap()).unwrap();
        assert_eq!(ms.len(), 1);
        let m = &ms[0];
        assert_eq!(m.files, ["a.py", "b.py", "c.py"]);
        assert_eq!(m.matrix[0][1], 1.0);
        assert!(m.matrix[0][2] < 1.0);
        let csv = m.to_csv();
        assert!(csv.starts_with("file,a.py,b.py,c.py\na.py,1,1,"), "{csv}");
    }
}
