use std::collections::BTreeSet;

use gemometer_core::attributes::text::{
    lemmatize, normalize_text, unique_word_count, word_frequency_table,
};
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: &[&str] = &[
    "book", "plot", "good", "dark", "tale", "hero", "moon", "story", "city", "war", "love", "fear",
    "hope", "king", "queen", "ship", "sea", "night", "day", "world", "voice", "end", "heart",
    "mind", "dream", "road", "fire", "rain",
];

#[test]
fn synthetic_reviews_match_set_oracle() {
    for w in VOCAB {
        assert_eq!(lemmatize(w), *w, "vocabulary must be lemma-stable");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let punct = [",", ".", "!", "?", ";", " -", " (", ")"];
    let mut docs = Vec::new();
    let mut oracle = BTreeSet::new();
    for _ in 0..1000 {
        let mut doc = String::new();
        for _ in 0..rng.random_range(3..25) {
            let w = *VOCAB.choose(&mut rng).unwrap();
            if rng.random_range(0..20) == 0 {
                continue;
            }
            oracle.insert(w.to_string());
            let shown = if rng.random_bool(0.3) {
                w.to_uppercase()
            } else {
                w.to_string()
            };
            doc.push_str(&shown);
            if rng.random_bool(0.2) {
                doc.push_str(punct.choose(&mut rng).unwrap());
            }
            if rng.random_bool(0.1) {
                doc.push_str(" 42");
            }
            doc.push(' ');
        }
        docs.push(doc);
    }
    let tokens = normalize_text(&docs);
    let table = word_frequency_table(&tokens);
    assert_eq!(unique_word_count(&table), oracle.len());
    assert_eq!(table.values().sum::<usize>(), tokens.len());
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            Just("don't".to_string()),
            Just("It's".to_string()),
            Just("john's".to_string()),
            Just("CATS".to_string()),
            Just("running".to_string()),
            Just("stories".to_string()),
            Just("çafé".to_string()),
            Just("İstanbul".to_string()),
            "[a-zA-Z']{1,10}",
            "[ ,.!?;:0-9\\-]{1,3}",
            "\\PC{1,4}",
        ],
        0..20,
    )
    .prop_map(|parts| parts.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn pipeline_idempotent(s in text()) {
        let once = normalize_text(&[s.as_str()]);
        let twice = normalize_text(&[once.join(" ")]);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn unique_counts_subadditive(a in text(), b in text()) {
        let ta = normalize_text(&[a.as_str()]);
        let tb = normalize_text(&[b.as_str()]);
        let ua = unique_word_count(&word_frequency_table(&ta));
        let ub = unique_word_count(&word_frequency_table(&tb));
        let both: Vec<String> = ta.iter().chain(&tb).cloned().collect();
        let u = unique_word_count(&word_frequency_table(&both));
        prop_assert!(u <= ua + ub);
        let sa: BTreeSet<&String> = ta.iter().collect();
        let sb: BTreeSet<&String> = tb.iter().collect();
        prop_assert_eq!(u == ua + ub, sa.is_disjoint(&sb));
    }

    #[test]
    fn counts_sum_to_length(s in text()) {
        let t = normalize_text(&[s.as_str()]);
        prop_assert_eq!(word_frequency_table(&t).values().sum::<usize>(), t.len());
    }
}
