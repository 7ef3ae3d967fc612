//! Winnowing fingerprints for source code.
//!
//! Source is normalised into a token stream where every identifier becomes
//! `ID` and every literal becomes `LIT`, so renaming and comment edits leave
//! the stream unchanged. Rolling hashes over `k`-token windows are then
//! winnowed with window `w`: any shared run of at least `w + k - 1` tokens is
//! guaranteed to produce a shared fingerprint, and runs shorter than `k` never
//! do.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FingerprintError {
    #[error("winnowing parameters need k >= 1 and w >= 1 (got k={k}, w={w})")]
    BadParams { k: usize, w: usize },
    #[error("pairwise similarity needs at least 2 programs, got {0}")]
    InsufficientPrograms(usize),
}

pub type TokenCode = u32;

pub const TOK_ID: TokenCode = 1;
pub const TOK_LIT: TokenCode = 2;
pub const TOK_RAW: TokenCode = 3;
pub const TOK_NEWLINE: TokenCode = 4;
pub const TOK_INDENT: TokenCode = 5;
pub const TOK_DEDENT: TokenCode = 6;
const KEYWORD_BASE: TokenCode = 100;
const OPERATOR_BASE: TokenCode = 300;

/// Lexical tables for one indentation-sensitive grammar.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub keywords: &'static [&'static str],
    /// Longest match wins, so order does not matter.
    pub operators: &'static [&'static str],
    pub line_comment: &'static str,
    pub string_prefixes: &'static [&'static str],
}

pub const PYTHON_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue",
    "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import",
    "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while",
    "with", "yield",
];

pub const PYTHON_OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=",
    "@=", "==", "!=", "<=", ">=", "**", "//", "<<", ">>", "+", "-", "*", "/", "%", "@", "&", "|",
    "^", "~", "<", ">", "(", ")", "[", "]", "{", "}", ",", ":", ".", ";", "=",
];

impl Grammar {
    pub fn python() -> Self {
        Self {
            keywords: PYTHON_KEYWORDS,
            operators: PYTHON_OPERATORS,
            line_comment: "#",
            string_prefixes: &["rb", "br", "rf", "fr", "r", "b", "f", "u"],
        }
    }
}

impl Default for Grammar {
    fn default() -> Self {
        Self::python()
    }
}

/// A normalised token stream with the source span of each token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedProgram {
    pub tokens: Vec<TokenCode>,
    /// (byte offset, byte length); zero-length for synthetic INDENT/DEDENT/NEWLINE.
    pub origin_spans: Vec<(usize, usize)>,
}

impl TokenizedProgram {
    fn push(&mut self, code: TokenCode, start: usize, len: usize) {
        self.tokens.push(code);
        self.origin_spans.push((start, len));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    grammar: &'a Grammar,
    out: TokenizedProgram,
    depth: usize,
    indents: Vec<usize>,
    line_has_tokens: bool,
    emitted_any: bool,
}

impl<'a> Lexer<'a> {
    fn starts_with(&self, s: &str) -> bool {
        self.src[self.pos..].starts_with(s)
    }

    /// Called at the first token of a logical line.
    fn begin_line(&mut self, indent: usize, at: usize) {
        if self.emitted_any {
            self.out.push(TOK_NEWLINE, at, 0);
        }
        let current = *self.indents.last().unwrap();
        if indent > current {
            self.indents.push(indent);
            self.out.push(TOK_INDENT, at, 0);
        } else {
            while indent < *self.indents.last().unwrap() && self.indents.len() > 1 {
                self.indents.pop();
                self.out.push(TOK_DEDENT, at, 0);
            }
        }
        self.line_has_tokens = true;
        self.emitted_any = true;
    }

    fn emit(&mut self, code: TokenCode, start: usize, len: usize, indent: usize) {
        if !self.line_has_tokens {
            self.begin_line(indent, start);
        }
        self.out.push(code, start, len);
    }

    fn skip_string(&mut self) {
        let quote = self.bytes[self.pos];
        let triple = self.pos + 2 < self.bytes.len()
            && self.bytes[self.pos + 1] == quote
            && self.bytes[self.pos + 2] == quote;
        if triple {
            self.pos += 3;
            while self.pos < self.bytes.len() {
                if self.bytes[self.pos] == b'\\' {
                    self.pos += 2;
                } else if self.pos + 2 < self.bytes.len()
                    && self.bytes[self.pos] == quote
                    && self.bytes[self.pos + 1] == quote
                    && self.bytes[self.pos + 2] == quote
                {
                    self.pos += 3;
                    return;
                } else {
                    self.pos += 1;
                }
            }
        } else {
            self.pos += 1;
            while self.pos < self.bytes.len() {
                match self.bytes[self.pos] {
                    b'\\' => self.pos += 2,
                    b'\n' => return,
                    c if c == quote => {
                        self.pos += 1;
                        return;
                    }
                    _ => self.pos += 1,
                }
            }
        }
        self.pos = self.pos.min(self.bytes.len());
    }

    fn string_prefix_len(&self) -> Option<usize> {
        for p in self.grammar.string_prefixes {
            let n = p.len();
            let rest = &self.src[self.pos..];
            if rest.len() > n
                && rest[..n].eq_ignore_ascii_case(p)
                && matches!(rest.as_bytes()[n], b'"' | b'\'')
            {
                return Some(n);
            }
        }
        None
    }

    fn run(mut self) -> TokenizedProgram {
        let mut indent = 0usize;
        let mut at_line_start = true;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if at_line_start {
                // Measure indentation; tabs advance to the next multiple of 8.
                indent = 0;
                while self.pos < self.bytes.len() {
                    match self.bytes[self.pos] {
                        b' ' => indent += 1,
                        b'\t' => indent = (indent / 8 + 1) * 8,
                        b'\x0c' => indent = 0,
                        _ => break,
                    }
                    self.pos += 1;
                }
                at_line_start = false;
                continue;
            }
            if c == b'\n' {
                self.pos += 1;
                if self.depth == 0 {
                    self.line_has_tokens = false;
                    at_line_start = true;
                }
                continue;
            }
            if c == b'\\' && self.bytes.get(self.pos + 1) == Some(&b'\n') {
                self.pos += 2;
                continue;
            }
            if c.is_ascii_whitespace() {
                self.pos += 1;
                continue;
            }
            if self.starts_with(self.grammar.line_comment) {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            let start = self.pos;
            if c == b'"' || c == b'\'' {
                self.skip_string();
                self.emit(TOK_LIT, start, self.pos - start, indent);
                continue;
            }
            if let Some(n) = self.string_prefix_len() {
                self.pos += n;
                self.skip_string();
                self.emit(TOK_LIT, start, self.pos - start, indent);
                continue;
            }
            if c.is_ascii_digit()
                || (c == b'.' && self.bytes.get(self.pos + 1).is_some_and(u8::is_ascii_digit))
            {
                self.pos += 1;
                while self.pos < self.bytes.len() {
                    let d = self.bytes[self.pos];
                    let exp_sign =
                        matches!(d, b'+' | b'-') && matches!(self.bytes[self.pos - 1], b'e' | b'E');
                    if d.is_ascii_alphanumeric() || d == b'_' || d == b'.' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                self.emit(TOK_LIT, start, self.pos - start, indent);
                continue;
            }
            let ch = self.src[self.pos..].chars().next().unwrap();
            if ch == '_' || ch.is_alphabetic() {
                while let Some(ch) = self.src[self.pos..].chars().next() {
                    if ch == '_' || ch.is_alphanumeric() {
                        self.pos += ch.len_utf8();
                    } else {
                        break;
                    }
                }
                let word = &self.src[start..self.pos];
                let code = match self.grammar.keywords.iter().position(|k| *k == word) {
                    Some(i) => KEYWORD_BASE + i as TokenCode,
                    None => TOK_ID,
                };
                self.emit(code, start, self.pos - start, indent);
                continue;
            }
            let op = self
                .grammar
                .operators
                .iter()
                .enumerate()
                .filter(|(_, op)| self.starts_with(op))
                .max_by_key(|(_, op)| op.len());
            if let Some((i, op)) = op {
                let op_len = op.len();
                match *op {
                    "(" | "[" | "{" => self.depth += 1,
                    ")" | "]" | "}" => self.depth = self.depth.saturating_sub(1),
                    _ => {}
                }
                self.pos += op_len;
                self.emit(OPERATOR_BASE + i as TokenCode, start, op_len, indent);
                continue;
            }
            self.pos += ch.len_utf8();
            self.emit(TOK_RAW, start, self.pos - start, indent);
        }
        self.out
    }
}

/// Tokenise and normalise source code under `grammar`.
pub fn normalize_code_with(source: &str, grammar: &Grammar) -> TokenizedProgram {
    Lexer {
        src: source,
        bytes: source.as_bytes(),
        pos: 0,
        grammar,
        out: TokenizedProgram::default(),
        depth: 0,
        indents: vec![0],
        line_has_tokens: false,
        emitted_any: false,
    }
    .run()
}

pub fn normalize_code(source: &str) -> TokenizedProgram {
    normalize_code_with(source, &Grammar::python())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinnowParams {
    pub k: usize,
    pub w: usize,
}

impl Default for WinnowParams {
    fn default() -> Self {
        Self { k: 8, w: 4 }
    }
}

impl WinnowParams {
    pub fn new(k: usize, w: usize) -> Result<Self, FingerprintError> {
        if k == 0 || w == 0 {
            return Err(FingerprintError::BadParams { k, w });
        }
        Ok(Self { k, w })
    }

    /// Shortest shared run guaranteed to be detected.
    pub fn guarantee_threshold(&self) -> usize {
        self.w + self.k - 1
    }
}

const HASH_BASE: u64 = 0x0000_0100_0000_01b3;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-token value fed into the polynomial hash.
pub fn token_value(code: TokenCode) -> u64 {
    mix64(u64::from(code).wrapping_add(0x9e37_79b9_7f4a_7c15))
}

/// Finalised hash of an explicit window, computed from scratch.
pub fn window_hash(window: &[TokenCode]) -> u64 {
    let h = window.iter().fold(0u64, |h, &c| {
        h.wrapping_mul(HASH_BASE).wrapping_add(token_value(c))
    });
    mix64(h)
}

/// Rolling polynomial hashes of every `k`-token window, tagged with the
/// window's start index. Empty when there are fewer than `k` tokens.
pub fn kgram_hashes(tokens: &[TokenCode], k: usize) -> Vec<(u64, usize)> {
    if k == 0 || tokens.len() < k {
        return Vec::new();
    }
    let top = (1..k).fold(1u64, |p, _| p.wrapping_mul(HASH_BASE));
    let mut h = tokens[..k].iter().fold(0u64, |h, &c| {
        h.wrapping_mul(HASH_BASE).wrapping_add(token_value(c))
    });
    let mut out = Vec::with_capacity(tokens.len() - k + 1);
    out.push((mix64(h), 0));
    for start in 1..=tokens.len() - k {
        h = h.wrapping_sub(token_value(tokens[start - 1]).wrapping_mul(top));
        h = h
            .wrapping_mul(HASH_BASE)
            .wrapping_add(token_value(tokens[start + k - 1]));
        out.push((mix64(h), start));
    }
    out
}

/// Selected (hash, position) pairs in increasing position order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintSet {
    pub prints: Vec<(u64, usize)>,
}

impl FingerprintSet {
    pub fn hashes(&self) -> HashSet<u64> {
        self.prints.iter().map(|&(h, _)| h).collect()
    }

    pub fn len(&self) -> usize {
        self.prints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prints.is_empty()
    }
}

/// Select the minimum of every `w`-window of hashes (rightmost on ties).
/// Inputs shorter than `w` form one window.
pub fn winnow(hashes: &[(u64, usize)], w: usize) -> FingerprintSet {
    assert!(w >= 1, "window must be >= 1");
    let mut prints = Vec::new();
    if hashes.is_empty() {
        return FingerprintSet { prints };
    }
    let windows = hashes.len().saturating_sub(w) + 1;
    let span = w.min(hashes.len());
    // Monotone deque of indices; values non-decreasing from back to front so
    // the front is the rightmost minimum of the window.
    let mut deque: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let mut last: Option<usize> = None;
    let push = |deque: &mut std::collections::VecDeque<usize>, i: usize| {
        while let Some(&b) = deque.back() {
            if hashes[b].0 >= hashes[i].0 {
                deque.pop_back();
            } else {
                break;
            }
        }
        deque.push_back(i);
    };
    for i in 0..span {
        push(&mut deque, i);
    }
    for win in 0..windows {
        if win > 0 {
            let incoming = win + span - 1;
            push(&mut deque, incoming);
            while *deque.front().unwrap() < win {
                deque.pop_front();
            }
        }
        let sel = *deque.front().unwrap();
        if last != Some(sel) {
            prints.push(hashes[sel]);
            last = Some(sel);
        }
    }
    FingerprintSet { prints }
}

/// Jaccard similarity of the two fingerprint hash sets; 0 when both are empty.
pub fn fingerprint_similarity(a: &FingerprintSet, b: &FingerprintSet) -> f64 {
    let ha = a.hashes();
    let hb = b.hashes();
    let union = ha.union(&hb).count();
    if union == 0 {
        return 0.0;
    }
    ha.intersection(&hb).count() as f64 / union as f64
}

/// Fraction of `a`'s fingerprints that also occur in `b`.
pub fn containment(a: &FingerprintSet, b: &FingerprintSet) -> f64 {
    let ha = a.hashes();
    if ha.is_empty() {
        return 0.0;
    }
    let hb = b.hashes();
    ha.intersection(&hb).count() as f64 / ha.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub matrix: Vec<Vec<f64>>,
    /// Mean over the strict upper triangle.
    pub mean: f64,
}

/// All-pairs similarity with a unit diagonal. Pairs are scored in parallel,
/// the mean is reduced sequentially in row-major order.
pub fn pairwise_fingerprint_matrix(
    programs: &[FingerprintSet],
) -> Result<SimilarityMatrix, FingerprintError> {
    let n = programs.len();
    if n < 2 {
        return Err(FingerprintError::InsufficientPrograms(n));
    }
    let hash_sets: Vec<HashSet<u64>> = programs.iter().map(FingerprintSet::hashes).collect();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let scores: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let union = hash_sets[i].union(&hash_sets[j]).count();
            if union == 0 {
                0.0
            } else {
                hash_sets[i].intersection(&hash_sets[j]).count() as f64 / union as f64
            }
        })
        .collect();
    let mut matrix = vec![vec![0.0; n]; n];
    for (i, row) in matrix.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut total = 0.0;
    for (&(i, j), &s) in pairs.iter().zip(&scores) {
        matrix[i][j] = s;
        matrix[j][i] = s;
        total += s;
    }
    Ok(SimilarityMatrix {
        matrix,
        mean: total / pairs.len() as f64,
    })
}

/// Normalise-hash-winnow pipeline with fixed parameters.
#[derive(Debug, Clone, Default)]
pub struct Fingerprinter {
    pub params: WinnowParams,
    pub grammar: Grammar,
}

impl Fingerprinter {
    pub fn new(params: WinnowParams) -> Self {
        Self {
            params,
            grammar: Grammar::python(),
        }
    }

    pub fn fingerprint_tokens(&self, tokens: &[TokenCode]) -> FingerprintSet {
        winnow(&kgram_hashes(tokens, self.params.k), self.params.w)
    }

    pub fn fingerprint(&self, source: &str) -> FingerprintSet {
        self.fingerprint_tokens(&normalize_code_with(source, &self.grammar).tokens)
    }
}
