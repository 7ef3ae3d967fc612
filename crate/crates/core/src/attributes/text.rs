//! Word-choice pipeline: lowercase, expand contractions, tokenise, keep
//! alphabetic words, lemmatise, then count.

use std::collections::BTreeMap;

/// Shipped contraction table. Keys are lowercase with ASCII apostrophes.
pub const CONTRACTIONS: &[(&str, &str)] = &[
    ("ain't", "are not"),
    ("aren't", "are not"),
    ("can't", "can not"),
    ("could've", "could have"),
    ("couldn't", "could not"),
    ("didn't", "did not"),
    ("doesn't", "does not"),
    ("don't", "do not"),
    ("hadn't", "had not"),
    ("hasn't", "has not"),
    ("haven't", "have not"),
    ("he'd", "he would"),
    ("he'll", "he will"),
    ("he's", "he is"),
    ("here's", "here is"),
    ("how's", "how is"),
    ("i'd", "i would"),
    ("i'll", "i will"),
    ("i'm", "i am"),
    ("i've", "i have"),
    ("isn't", "is not"),
    ("it'd", "it would"),
    ("it'll", "it will"),
    ("it's", "it is"),
    ("let's", "let us"),
    ("ma'am", "madam"),
    ("might've", "might have"),
    ("mightn't", "might not"),
    ("must've", "must have"),
    ("mustn't", "must not"),
    ("needn't", "need not"),
    ("o'clock", "of the clock"),
    ("shan't", "shall not"),
    ("she'd", "she would"),
    ("she'll", "she will"),
    ("she's", "she is"),
    ("should've", "should have"),
    ("shouldn't", "should not"),
    ("that'd", "that would"),
    ("that'll", "that will"),
    ("that's", "that is"),
    ("there'd", "there would"),
    ("there'll", "there will"),
    ("there's", "there is"),
    ("they'd", "they would"),
    ("they'll", "they will"),
    ("they're", "they are"),
    ("they've", "they have"),
    ("wasn't", "was not"),
    ("we'd", "we would"),
    ("we'll", "we will"),
    ("we're", "we are"),
    ("we've", "we have"),
    ("weren't", "were not"),
    ("what'll", "what will"),
    ("what's", "what is"),
    ("when's", "when is"),
    ("where's", "where is"),
    ("who'd", "who would"),
    ("who'll", "who will"),
    ("who's", "who is"),
    ("why's", "why is"),
    ("won't", "will not"),
    ("would've", "would have"),
    ("wouldn't", "would not"),
    ("y'all", "you all"),
    ("you'd", "you would"),
    ("you'll", "you will"),
    ("you're", "you are"),
    ("you've", "you have"),
];

const IRREGULAR: &[(&str, &str)] = &[
    ("children", "child"),
    ("feet", "foot"),
    ("geese", "goose"),
    ("halves", "half"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("lives", "life"),
    ("men", "man"),
    ("mice", "mouse"),
    ("people", "person"),
    ("shelves", "shelf"),
    ("teeth", "tooth"),
    ("wives", "wife"),
    ("wolves", "wolf"),
    ("women", "woman"),
];

/// Words the suffix rules would mangle.
const PROTECTED: &[&str] = &[
    "always",
    "anything",
    "as",
    "bed",
    "being",
    "bled",
    "bleed",
    "breed",
    "bring",
    "ceiling",
    "during",
    "evening",
    "everything",
    "exceed",
    "fed",
    "feed",
    "greed",
    "has",
    "his",
    "hundred",
    "indeed",
    "is",
    "king",
    "led",
    "lens",
    "less",
    "morning",
    "naked",
    "need",
    "news",
    "nothing",
    "perhaps",
    "plus",
    "proceed",
    "red",
    "ring",
    "sacred",
    "seed",
    "series",
    "shed",
    "sing",
    "something",
    "species",
    "speed",
    "spring",
    "sting",
    "string",
    "succeed",
    "swing",
    "thing",
    "this",
    "thus",
    "unless",
    "us",
    "was",
    "wed",
    "weed",
    "wicked",
    "wing",
    "yes",
];

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn has_vowel(s: &str) -> bool {
    s.bytes().any(|c| is_vowel(c) || c == b'y')
}

/// Repair a stem left by stripping -ing/-ed: undouble a final consonant pair,
/// or restore a silent e.
fn fix_stem(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2
        && b[n - 1] == b[n - 2]
        && !is_vowel(b[n - 1])
        && !matches!(b[n - 1], b'l' | b's' | b'z')
    {
        return stem[..n - 1].to_string();
    }
    if stem.ends_with("at") || stem.ends_with("bl") || stem.ends_with("iz") {
        return format!("{stem}e");
    }
    if n == 3
        && !is_vowel(b[0])
        && is_vowel(b[1])
        && !is_vowel(b[2])
        && !matches!(b[2], b'w' | b'x' | b'y')
    {
        return format!("{stem}e");
    }
    stem.to_string()
}

fn lemma_step(w: &str) -> String {
    if let Some((_, base)) = IRREGULAR.iter().find(|(k, _)| *k == w) {
        return (*base).to_string();
    }
    if PROTECTED.contains(&w) || !w.is_ascii() {
        return w.to_string();
    }
    let n = w.len();
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..n - 3]);
    }
    if w.ends_with("sses")
        || w.ends_with("shes")
        || w.ends_with("ches")
        || w.ends_with("xes")
        || (n > 4 && w.ends_with("oes"))
    {
        return w[..n - 2].to_string();
    }
    if n > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..n - 1].to_string();
    }
    if n > 5 && w.ends_with("ing") && has_vowel(&w[..n - 3]) {
        return fix_stem(&w[..n - 3]);
    }
    if n > 4 && w.ends_with("ed") && has_vowel(&w[..n - 2]) {
        return fix_stem(&w[..n - 2]);
    }
    w.to_string()
}

/// Suffix-rule lemmatiser, iterated to a fixed point so that
/// `lemmatize(lemmatize(w)) == lemmatize(w)`.
pub fn lemmatize(word: &str) -> String {
    let mut cur = word.to_string();
    loop {
        let next = lemma_step(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn expand_contractions(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut run = String::new();
    let flush = |run: &mut String, out: &mut String| {
        match CONTRACTIONS.iter().find(|(k, _)| *k == run.as_str()) {
            Some((_, v)) => out.push_str(v),
            None => out.push_str(run),
        }
        run.clear();
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            run.push(ch);
        } else {
            flush(&mut run, &mut out);
            out.push(ch);
        }
    }
    flush(&mut run, &mut out);
    out
}

/// Split on whitespace and punctuation boundaries. Alphanumeric runs are
/// tokens; an apostrophe between word characters starts a new token that
/// keeps the apostrophe (`john's` becomes `john`, `'s`); every other
/// punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for (i, &ch) in chars.iter().enumerate() {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        let next_is_word = chars.get(i + 1).is_some_and(|c| c.is_alphanumeric());
        if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
            if ch == '\'' && next_is_word {
                cur.push('\'');
                continue;
            }
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Full pipeline over a collection of documents.
pub fn normalize_text<S: AsRef<str>>(texts: &[S]) -> Vec<String> {
    let joined = texts
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join("\n");
    let lowered = joined.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    let expanded = expand_contractions(&lowered);
    tokenize(&expanded)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .filter(|t| t.chars().all(char::is_alphabetic))
        .map(|t| lemmatize(&t))
        .collect()
}

pub fn word_frequency_table<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<String, usize> {
    let mut table = BTreeMap::new();
    for t in tokens {
        *table.entry(t.as_ref().to_string()).or_insert(0) += 1;
    }
    table
}

pub fn unique_word_count(table: &BTreeMap<String, usize>) -> usize {
    table.len()
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("word distribution entropy needs a non-empty frequency table")]
pub struct EmptyTable;

/// Shannon entropy (bits) of the unigram distribution.
pub fn word_distribution_entropy(table: &BTreeMap<String, usize>) -> Result<f64, EmptyTable> {
    let total: usize = table.values().sum();
    if total == 0 {
        return Err(EmptyTable);
    }
    let total = total as f64;
    Ok(0.0
        - table
            .values()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                p * p.log2()
            })
            .sum::<f64>())
}
