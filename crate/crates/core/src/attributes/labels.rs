//! Parsing structured answers out of summary-model text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub const TAGS: &str = include_str!("../../data/tags.txt");
pub const ALGORITHMS: &str = include_str!("../../data/algorithms.txt");
pub const DATA_STRUCTURES: &str = include_str!("../../data/data_structures.txt");

/// Whitelist entries from one of the shipped list files, lowercased.
pub fn whitelist(list: &str) -> BTreeSet<String> {
    list.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledLines {
    pub labels: BTreeMap<String, BTreeSet<String>>,
    /// Keys with no matching line.
    pub missing: BTreeSet<String>,
    /// Labels discarded for not being on the key's whitelist.
    pub dropped: usize,
}

/// Parse `Key: a, b, c` lines. Keys match case-insensitively at line start;
/// values are trimmed and lowercased. Every requested key appears in
/// `labels`, empty when its line is absent (and then listed in `missing`).
pub fn parse_labeled_lines(
    response: &str,
    keys: &[&str],
    whitelists: &BTreeMap<String, BTreeSet<String>>,
) -> LabeledLines {
    let mut out = LabeledLines::default();
    for key in keys {
        let key_lc = key.to_lowercase();
        let line = response.lines().map(str::trim_start).find_map(|line| {
            let (head, rest) = line.split_once(':')?;
            let head = head.trim().trim_matches(|c| c == '*' || c == '-').trim();
            (head.to_lowercase() == key_lc).then_some(rest)
        });
        let mut set = BTreeSet::new();
        match line {
            None => {
                out.missing.insert(key_lc.clone());
            }
            Some(rest) => {
                for raw in rest.split(',') {
                    let label = raw.trim().trim_end_matches('.').trim().to_lowercase();
                    if label.is_empty() {
                        continue;
                    }
                    match whitelists.get(&key_lc) {
                        Some(wl) if !wl.contains(&label) => out.dropped += 1,
                        _ => {
                            set.insert(label);
                        }
                    }
                }
            }
        }
        out.labels.insert(key_lc, set);
    }
    out
}

/// Free-text value of the first `Key: value` line, if any.
pub fn parse_field(response: &str, key: &str) -> Option<String> {
    let key_lc = key.to_lowercase();
    response.lines().find_map(|line| {
        let (head, rest) = line.trim_start().split_once(':')?;
        (head.trim().to_lowercase() == key_lc).then(|| rest.trim().to_string())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComplexityClass {
    Constant,
    Logarithmic,
    Linear,
    Linearithmic,
    Quadratic,
    Cubic,
    Exponential,
    Other,
}

impl ComplexityClass {
    pub fn label(self) -> &'static str {
        match self {
            ComplexityClass::Constant => "O(1)",
            ComplexityClass::Logarithmic => "O(log n)",
            ComplexityClass::Linear => "O(n)",
            ComplexityClass::Linearithmic => "O(n log n)",
            ComplexityClass::Quadratic => "O(n^2)",
            ComplexityClass::Cubic => "O(n^3)",
            ComplexityClass::Exponential => "O(2^n)",
            ComplexityClass::Other => "other",
        }
    }
}

impl fmt::Display for ComplexityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Contents of the first balanced `O(...)` group.
fn big_o_argument(text: &str) -> Option<String> {
    let chars: Vec<char> = text.chars().collect();
    let start = chars
        .windows(2)
        .position(|w| (w[0] == 'O' || w[0] == 'o' || w[0] == 'Θ' || w[0] == 'θ') && w[1] == '(')?;
    if start > 0 && chars[start - 1].is_alphanumeric() {
        return big_o_argument(&chars[start + 1..].iter().collect::<String>());
    }
    let mut depth = 0usize;
    let mut arg = String::new();
    for &c in &chars[start + 1..] {
        match c {
            '(' => {
                depth += 1;
                if depth > 1 {
                    arg.push(c);
                }
            }
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(arg);
                }
                arg.push(c);
            }
            _ => arg.push(c),
        }
    }
    None
}

/// Map a free-text complexity statement to a canonical class.
pub fn canonicalize_complexity(text: &str) -> ComplexityClass {
    let Some(arg) = big_o_argument(text) else {
        return ComplexityClass::Other;
    };
    let norm: String = arg
        .replace("**", "^")
        .replace('²', "^2")
        .replace('³', "^3")
        .replace('ⁿ', "^n")
        .chars()
        .filter(|c| !c.is_whitespace() && !matches!(c, '*' | '·' | '⋅' | '×' | '(' | ')'))
        .collect::<String>()
        .to_lowercase();
    let norm = norm
        .replace("log_2", "log")
        .replace("log2", "log")
        .replace("lg", "log")
        .replace("ln", "log");
    match norm.as_str() {
        "1" => ComplexityClass::Constant,
        "logn" => ComplexityClass::Logarithmic,
        "n" => ComplexityClass::Linear,
        "nlogn" | "lognn" => ComplexityClass::Linearithmic,
        "n^2" | "nn" => ComplexityClass::Quadratic,
        "n^3" | "nnn" => ComplexityClass::Cubic,
        "2^n" => ComplexityClass::Exponential,
        _ => ComplexityClass::Other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code_whitelists() -> BTreeMap<String, BTreeSet<String>> {
        BTreeMap::from([
            ("algorithms".to_string(), whitelist(ALGORITHMS)),
            ("data structures".to_string(), whitelist(DATA_STRUCTURES)),
        ])
    }

    #[test]
    fn shipped_lists() {
        assert_eq!(whitelist(TAGS).len(), 34);
        assert_eq!(whitelist(ALGORITHMS).len(), 11);
        assert_eq!(whitelist(DATA_STRUCTURES).len(), 11);
        assert!(whitelist(TAGS).contains("dfs and similar"));
    }

    #[test]
    fn parses_two_keys() {
        let r = "Algorithms: Sorting Algorithms, Recursion\nData structures: Arrays";
        let p = parse_labeled_lines(r, &["Algorithms", "Data structures"], &code_whitelists());
        assert_eq!(
            p.labels["algorithms"],
            BTreeSet::from(["sorting algorithms".to_string(), "recursion".to_string()])
        );
        assert_eq!(
            p.labels["data structures"],
            BTreeSet::from(["arrays".to_string()])
        );
        assert!(p.missing.is_empty());
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn empty_response_flags_all() {
        let p = parse_labeled_lines("", &["Algorithms", "Data structures"], &code_whitelists());
        assert!(p.labels.values().all(BTreeSet::is_empty));
        assert_eq!(p.missing.len(), 2);
    }

    #[test]
    fn off_list_labels_dropped() {
        let p = parse_labeled_lines(
            "Algorithms: Quantum Magic",
            &["Algorithms"],
            &code_whitelists(),
        );
        assert!(p.labels["algorithms"].is_empty());
        assert_eq!(p.dropped, 1);
    }

    #[test]
    fn case_insensitive_keys_and_no_whitelist() {
        let p = parse_labeled_lines("TAGS: Math, greedy.\n", &["tags"], &BTreeMap::new());
        assert_eq!(
            p.labels["tags"],
            BTreeSet::from(["math".to_string(), "greedy".to_string()])
        );
    }

    #[test]
    fn field_lookup() {
        let r = "Description: adds numbers\nTime complexity: O(n)\n";
        assert_eq!(parse_field(r, "time complexity").as_deref(), Some("O(n)"));
        assert_eq!(parse_field(r, "space complexity"), None);
    }

    #[test]
    fn complexity_rules() {
        use ComplexityClass::*;
        for (s, c) in [
            ("O(n log n)", Linearithmic),
            ("O(N*logN) due to sorting", Linearithmic),
            ("linear-ish", Other),
            ("O(1)", Constant),
            ("The time complexity is O(log(n)).", Logarithmic),
            ("O(n)", Linear),
            ("O(n^2)", Quadratic),
            ("O(n²)", Quadratic),
            ("O(n*n)", Quadratic),
            ("O(n**3)", Cubic),
            ("O(2^n)", Exponential),
            ("O(n + m)", Other),
            ("Θ(n)", Linear),
            ("FOO(n)", Other),
        ] {
            assert_eq!(canonicalize_complexity(s), c, "{s}");
        }
    }
}
