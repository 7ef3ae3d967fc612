//! Deterministic stand-ins for the remote services: a completion model, a
//! sentiment classifier, a topic model, an embedder and a perplexity scorer.
//!
//! Every answer is a pure function of the request body, so a run against the
//! stubs is reproducible byte for byte. The same handlers are reachable
//! in-process through `stub://<service>` endpoints and over real HTTP through
//! [`StubServer`].

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::attributes::{normalize_text, PROMPT_ALGORITHMS_DATA_STRUCTURES, PROMPT_CODE_SUMMARY};
use crate::client::TransportError;
use crate::sampling::{LogitVector, NucleusPolicy};
use crate::util::fnv1a64;

pub const SERVICES: &[&str] = &[
    "completion",
    "sentiment",
    "topic",
    "embedding",
    "perplexity",
];

const EMBED_DIM: usize = 32;

/// Answer one request for `service`.
pub fn handle(service: &str, body: &Value) -> Result<Value, TransportError> {
    let text = || {
        body["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Permanent("request lacks `text`".into()))
    };
    match service.trim_matches('/') {
        "completion" => completion(body),
        "sentiment" => Ok(json!({"kind": "binary", "value": sentiment(&text()?)})),
        "topic" => Ok(json!({"kind": "category", "value": topic(&text()?)})),
        "embedding" => Ok(json!({"kind": "embedding", "value": embedding(&text()?)})),
        "perplexity" => Ok(json!({"kind": "scalar", "value": perplexity(&text()?)})),
        other => Err(TransportError::Permanent(format!(
            "unknown stub service `{other}`"
        ))),
    }
}

const POSITIVE: &[&str] = &[
    "love",
    "loved",
    "wonderful",
    "brilliant",
    "beautiful",
    "masterful",
    "moving",
    "delightful",
    "great",
    "gripping",
    "enjoyed",
    "charming",
    "excellent",
    "fantastic",
    "luminous",
    "superb",
    "compelling",
    "rich",
    "recommend",
];
const NEGATIVE: &[&str] = &[
    "boring",
    "dull",
    "tedious",
    "disappointing",
    "flat",
    "weak",
    "hated",
    "confusing",
    "shallow",
    "clumsy",
    "slow",
    "forgettable",
    "bland",
    "awful",
    "overlong",
    "tiresome",
];

/// 1 when positive cue words are at least as frequent as negative ones.
fn sentiment(text: &str) -> u8 {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .collect();
    let pos = words.iter().filter(|w| POSITIVE.contains(w)).count();
    let neg = words.iter().filter(|w| NEGATIVE.contains(w)).count();
    u8::from(pos >= neg)
}

const TOPICS: &[(&str, &[&str])] = &[
    (
        "0_war_battle_soldier",
        &["war", "battle", "soldier", "army", "empire", "rebellion"],
    ),
    (
        "1_love_romance_heart",
        &["romance", "heart", "lover", "marriage", "kiss", "passion"],
    ),
    (
        "2_family_mother_child",
        &[
            "family", "mother", "father", "child", "sister", "brother", "home",
        ],
    ),
    (
        "3_space_planet_science",
        &[
            "space", "planet", "desert", "science", "ecology", "spice", "star",
        ],
    ),
    (
        "4_crime_murder_detective",
        &[
            "crime",
            "murder",
            "detective",
            "kill",
            "rob",
            "police",
            "mystery",
        ],
    ),
    (
        "5_nature_sea_animal",
        &[
            "nature", "sea", "ocean", "animal", "whale", "river", "forest",
        ],
    ),
    (
        "6_power_politics_society",
        &[
            "power",
            "politics",
            "society",
            "government",
            "control",
            "freedom",
        ],
    ),
    (
        "7_writing_prose_style",
        &["prose", "style", "writing", "language", "sentence", "voice"],
    ),
];

/// Topic with most keyword hits; ties go to the lower topic; none → outlier.
fn topic(text: &str) -> String {
    let tokens = normalize_text(&[text]);
    let mut best: Option<(usize, &str)> = None;
    for (label, words) in TOPICS {
        let hits = tokens
            .iter()
            .filter(|t| words.contains(&t.as_str()))
            .count();
        if hits > 0 && best.is_none_or(|(h, _)| hits > h) {
            best = Some((hits, label));
        }
    }
    best.map_or_else(|| "-1_outlier".to_string(), |(_, l)| (*l).to_string())
}

/// Hashed bag of lemmas plus a constant bias component, so no text maps to zero.
fn embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    v[0] = 1.0;
    for t in normalize_text(&[text]) {
        v[1 + (fnv1a64(t.as_bytes()) % (EMBED_DIM as u64 - 1)) as usize] += 1.0;
    }
    v
}

/// Grows with mean word length; long rare words push it past typical thresholds.
fn perplexity(text: &str) -> f64 {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return 1000.0;
    }
    let mean_len =
        words.iter().map(|w| w.chars().count()).sum::<usize>() as f64 / words.len() as f64;
    ((4.0 + 2.0 * mean_len) * 1e6).round() / 1e6
}

fn completion(body: &Value) -> Result<Value, TransportError> {
    let prompt = body["prompt"]
        .as_str()
        .ok_or_else(|| TransportError::Permanent("request lacks `prompt`".into()))?;
    let temperature = body["temperature"].as_f64().unwrap_or(1.0);
    let top_p = body["top_p"].as_f64().unwrap_or(1.0);
    let seed = body["seed"].as_u64().unwrap_or(0);
    let model = body["model"].as_str().unwrap_or("stub");
    let text = if let Some(code) = strip_template(prompt, PROMPT_ALGORITHMS_DATA_STRUCTURES) {
        summarize_labels(code)
    } else if let Some(code) = strip_template(prompt, PROMPT_CODE_SUMMARY) {
        summarize_description(code)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(
            format!("{model}\u{0}{prompt}\u{0}{seed}").as_bytes(),
        ));
        // Temperature 0 is greedy decoding; the policy needs T > 0.
        let policy = NucleusPolicy {
            temperature: temperature.max(1e-3),
            top_p: top_p.clamp(1e-9, 1.0),
            decay: None,
        };
        if prompt.contains("python code") {
            write_program(prompt, &policy, &mut rng)
        } else {
            write_review(prompt, &policy, &mut rng)
        }
    };
    Ok(json!({ "choices": [{ "text": text }] }))
}

fn strip_template<'a>(prompt: &'a str, template: &str) -> Option<&'a str> {
    let (head, tail) = template.split_once("{code}")?;
    prompt.strip_prefix(head)?.strip_suffix(tail)
}

fn pick(policy: &NucleusPolicy, weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let logits = LogitVector::new(weights.to_vec()).expect("static logits are finite");
    policy
        .sample(&logits, 0, rng)
        .expect("policy parameters clamped")
}

fn choose<'a>(policy: &NucleusPolicy, options: &[(&'a str, f64)], rng: &mut ChaCha8Rng) -> &'a str {
    let weights: Vec<f64> = options.iter().map(|o| o.1).collect();
    options[pick(policy, &weights, rng)].0
}

const ADJECTIVES: &[(&str, f64)] = &[
    ("wonderful", 3.0),
    ("brilliant", 2.6),
    ("moving", 2.2),
    ("gripping", 1.8),
    ("charming", 1.2),
    ("uneven", 0.2),
    ("slow", -0.4),
    ("disappointing", -0.8),
    ("phantasmagorical", -1.5),
    ("incomprehensible", -2.0),
];
const ASPECTS: &[(&str, f64)] = &[
    ("characters", 2.5),
    ("prose", 2.0),
    ("world", 1.6),
    ("plot", 1.4),
    ("pacing", 0.6),
    ("dialogue", 0.4),
    ("worldbuilding", -0.5),
    ("characterization", -1.2),
];
const THEMES: &[(&str, f64)] = &[
    ("family", 2.0),
    ("power", 1.8),
    ("love", 1.5),
    ("society", 1.0),
    ("war", 0.5),
    ("nature", 0.3),
    ("crime", -0.5),
    ("science", -0.8),
];
const CLOSERS: &[(&str, f64)] = &[
    ("I loved it and would recommend it to anyone.", 3.0),
    ("A delightful read from start to finish.", 2.2),
    ("I enjoyed it more than I expected.", 1.5),
    ("It is worth reading once.", 0.5),
    ("In the end it felt tedious and forgettable.", -0.5),
    ("Honestly a boring and disappointing book.", -1.0),
];

fn write_review(prompt: &str, policy: &NucleusPolicy, rng: &mut ChaCha8Rng) -> String {
    let title = prompt
        .split("titled ")
        .nth(1)
        .map(|t| {
            t.split(" as if you are")
                .next()
                .unwrap_or(t)
                .trim_end_matches(':')
                .trim()
        })
        .unwrap_or("this book");
    let persona = prompt
        .split("as if you are ")
        .nth(1)
        .map(|p| p.trim_end_matches(':').trim());
    let mut out = String::new();
    if let Some(p) = persona {
        out.push_str(&format!("Speaking as {p}, "));
    }
    out.push_str(&format!(
        "{title} is a {} book about {}.",
        choose(policy, ADJECTIVES, rng),
        choose(policy, THEMES, rng)
    ));
    for _ in 0..2 {
        out.push_str(&format!(
            " The {} felt {} and the {} {}.",
            choose(policy, ASPECTS, rng),
            choose(policy, ADJECTIVES, rng),
            choose(policy, ASPECTS, rng),
            if choose(policy, &[("was", 1.0), ("seemed", 0.5)], rng) == "was" {
                "was strong"
            } else {
                "seemed thin"
            }
        ));
    }
    out.push(' ');
    out.push_str(choose(policy, CLOSERS, rng));
    out
}

const SUM_PROGRAMS: &[(&str, f64)] = &[
    ("a, b = map(int, input().split())\nprint(a + b)\n", 3.0),
    ("nums = list(map(int, input().split()))\nprint(sum(nums))\n", 1.5),
    ("import sys\n\ndef main():\n    data = sys.stdin.read().split()\n    total = 0\n    for x in data:\n        total += int(x)\n    print(total)\n\nmain()\n", 0.8),
    ("a, b = map(int, input().split())\nprint(a - b)\n", 0.3),
];
const REVERSE_PROGRAMS: &[(&str, f64)] = &[
    ("s = input().strip()\nprint(s[::-1])\n", 3.0),
    ("s = input().strip()\nprint(''.join(reversed(s)))\n", 1.6),
    ("s = input().strip()\nout = []\nfor i in range(len(s) - 1, -1, -1):\n    out.append(s[i])\nprint(''.join(out))\n", 0.8),
    ("s = input().strip()\nprint(s)\n", 0.2),
];

fn write_program(prompt: &str, policy: &NucleusPolicy, rng: &mut ChaCha8Rng) -> String {
    let lower = prompt.to_lowercase();
    let table = if lower.contains("revers") {
        REVERSE_PROGRAMS
    } else {
        SUM_PROGRAMS
    };
    choose(policy, table, rng).to_string()
}

struct CodeFeatures {
    sorts: bool,
    strings: bool,
    loops: usize,
    nested: bool,
    lists: bool,
    dicts: bool,
    sets: bool,
}

fn code_features(code: &str) -> CodeFeatures {
    let loop_lines: Vec<usize> = code
        .lines()
        .filter(|l| {
            let t = l.trim_start();
            t.starts_with("for ") || t.starts_with("while ")
        })
        .map(|l| l.len() - l.trim_start().len())
        .collect();
    let nested = loop_lines.windows(2).any(|w| w[1] > w[0]);
    CodeFeatures {
        sorts: code.contains("sort"),
        strings: code.contains("[::-1]") || code.contains("reversed") || code.contains("join"),
        loops: loop_lines.len()
            + usize::from(
                code.contains("sum(") || code.contains("[::-1]") || code.contains("join"),
            ),
        nested,
        lists: code.contains('[') || code.contains("list("),
        dicts: code.contains("dict(") || code.contains("{}"),
        sets: code.contains("set("),
    }
}

fn summarize_labels(code: &str) -> String {
    let f = code_features(code);
    let mut algs = Vec::new();
    if f.sorts {
        algs.push("Sorting Algorithms");
    }
    if f.strings {
        algs.push("String Algorithms");
    }
    if algs.is_empty() {
        algs.push("Others");
    }
    let mut ds = Vec::new();
    if f.lists {
        ds.push("Arrays");
    }
    if f.dicts {
        ds.push("Hash Tables");
    }
    if f.sets {
        ds.push("Sets");
    }
    if ds.is_empty() {
        ds.push("Others");
    }
    format!(
        "Algorithms: {}\nData structures: {}\n",
        algs.join(", "),
        ds.join(", ")
    )
}

fn summarize_description(code: &str) -> String {
    let f = code_features(code);
    let time = if f.nested {
        "O(n^2)"
    } else if f.sorts {
        "O(n log n)"
    } else if f.loops > 0 {
        "O(n)"
    } else {
        "O(1)"
    };
    let space = if f.lists || f.strings { "O(n)" } else { "O(1)" };
    let mut what = vec!["reads the input"];
    if f.strings {
        what.push("reverses the string");
    }
    if f.loops > 0 && !f.strings {
        what.push("accumulates the numbers");
    }
    if f.sorts {
        what.push("sorts the values");
    }
    what.push("prints the result");
    let tags = if f.strings {
        "strings, implementation"
    } else {
        "math, implementation"
    };
    format!(
        "Description: The code {}.\nFunctionality: {}\nTime complexity: {time}\nSpace complexity: {space}\nTags: {tags}\n",
        what.join(" then "),
        if f.strings { "string manipulation" } else { "arithmetic" },
    )
}

/// The stub services behind a real HTTP listener on 127.0.0.1. Requests are
/// `POST /<service>` with a JSON body. Stops when dropped.
pub struct StubServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start() -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub server has no IP address"))?;
        let server = Arc::new(server);
        let srv = Arc::clone(&server);
        let worker = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut raw = String::new();
                let reply = match std::io::Read::read_to_string(req.as_reader(), &mut raw) {
                    Err(e) => Err((400, e.to_string())),
                    Ok(_) => match serde_json::from_str::<Value>(&raw) {
                        Err(e) => Err((400, e.to_string())),
                        Ok(body) => handle(req.url(), &body).map_err(|e| (404, e.to_string())),
                    },
                };
                let (status, payload) = match reply {
                    Ok(v) => (200, v.to_string()),
                    Err((code, msg)) => (code, json!({ "error": msg }).to_string()),
                };
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                    .expect("static header");
                let resp = tiny_http::Response::from_string(payload)
                    .with_status_code(status)
                    .with_header(header);
                if let Err(e) = req.respond(resp) {
                    log::warn!("stub server failed to respond: {e}");
                }
            }
        });
        Ok(Self {
            addr,
            server,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, service: &str) -> String {
        format!("http://{}/{service}", self.addr)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ClientSpec, HttpTransport, Transport};

    #[test]
    fn classifier_cues() {
        assert_eq!(sentiment("I love it"), 1);
        assert_eq!(sentiment("boring and dull, but I love the cover"), 0);
        assert_eq!(sentiment(""), 1);
    }

    #[test]
    fn completion_is_deterministic_per_seed() {
        let body = json!({"model":"m","prompt":"Write a personalized review of the book titled Dune:","temperature":1.0,"top_p":1.0,"seed":3});
        let a = handle("completion", &body).unwrap();
        assert_eq!(a, handle("completion", &body).unwrap());
        let texts: std::collections::BTreeSet<String> = (0..20)
            .map(|s| {
                let mut b = body.clone();
                b["seed"] = json!(s);
                handle("completion", &b).unwrap()["choices"][0]["text"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect();
        assert!(texts.len() > 1);
        assert!(texts.iter().all(|t| t.starts_with("Dune is a ")));
    }

    #[test]
    fn summary_prompts_are_recognised() {
        let code = "s = input().strip()\nprint(s[::-1])\n";
        let prompt = PROMPT_ALGORITHMS_DATA_STRUCTURES.replace("{code}", code);
        let r = handle("completion", &json!({"prompt": prompt, "temperature": 0.0})).unwrap();
        let text = r["choices"][0]["text"].as_str().unwrap();
        assert!(
            text.starts_with("Algorithms: String Algorithms\nData structures: Arrays"),
            "{text}"
        );
        let prompt = PROMPT_CODE_SUMMARY.replace("{code}", code);
        let r = handle("completion", &json!({"prompt": prompt})).unwrap();
        assert!(r["choices"][0]["text"]
            .as_str()
            .unwrap()
            .contains("Time complexity: O(n)"));
    }

    #[test]
    fn embedding_never_zero() {
        let v = embedding("");
        assert_eq!(v.len(), EMBED_DIM);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn unknown_service_is_permanent() {
        assert!(matches!(
            handle("nope", &json!({})),
            Err(TransportError::Permanent(_))
        ));
    }

    #[test]
    fn http_round_trip() {
        let server = StubServer::start().unwrap();
        let t = HttpTransport::new(&ClientSpec::new(server.url("sentiment")));
        let v = t
            .post_json(&server.url("sentiment"), &json!({"text": "I love it"}))
            .unwrap();
        assert_eq!(v, json!({"kind":"binary","value":1}));
        let e = t
            .post_json(&server.url("bogus"), &json!({"text": "x"}))
            .unwrap_err();
        assert!(matches!(e, TransportError::Permanent(_)));
    }
}
