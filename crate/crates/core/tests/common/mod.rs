// Copyright 2026 The medbert authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Oracles shared by the per-module suites and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use medbert::tokenizer::{decode, encode, train_bpe, BpeOptions, SPECIAL_TOKENS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Recounts every pair from scratch each round, expanding each word occurrence.
pub fn oracle_merges(corpus: &[String], target: usize, min_freq: u64) -> Vec<(String, String)> {
    let sym = |w: &str| -> Vec<String> {
        w.chars()
            .enumerate()
            .map(|(i, c)| if i == 0 { c.to_string() } else { format!("##{c}") })
            .collect()
    };
    let mut occurrences: Vec<Vec<String>> = corpus.iter().flat_map(|d| d.split_whitespace().map(sym)).collect();
    let mut tokens: BTreeSet<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for o in &occurrences {
        tokens.extend(o.iter().cloned());
    }
    let strip = |s: &str| s.trim_start_matches("##").to_string();
    let mut banned = BTreeSet::new();
    let mut merges = Vec::new();
    while tokens.len() < target {
        let mut counts: HashMap<(String, String), u64> = HashMap::new();
        for o in &occurrences {
            for w in o.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|(p, c)| *c >= min_freq.max(1) && !banned.contains(p))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (strip(&pa.0), strip(&pa.1), &pa.0, &pa.1);
                    let kb = (strip(&pb.0), strip(&pb.1), &pb.0, &pb.1);
                    kb.cmp(&ka)
                })
            });
        let Some(((l, r), _)) = best else { break };
        let merged = format!("{l}{}", r.strip_prefix("##").unwrap_or(&r));
        if SPECIAL_TOKENS.contains(&merged.as_str()) {
            banned.insert((l, r));
            continue;
        }
        for o in occurrences.iter_mut() {
            let mut out = Vec::new();
            let mut i = 0;
            while i < o.len() {
                if i + 1 < o.len() && o[i] == l && o[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(o[i].clone());
                    i += 1;
                }
            }
            *o = out;
        }
        tokens.insert(merged);
        merges.push((l, r));
    }
    merges
}

pub fn random_corpus(rng: &mut ChaCha8Rng, max_words: usize) -> Vec<String> {
    let alphabet: Vec<char> = "abcdeé".chars().collect();
    let pool: Vec<String> = (0..rng.random_range(3..40))
        .map(|_| {
            (0..rng.random_range(1..7))
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect()
        })
        .collect();
    let total = rng.random_range(1..=max_words);
    let mut docs = Vec::new();
    let mut left = total;
    while left > 0 {
        let n = rng.random_range(1..=left.min(30));
        let doc: Vec<&str> = (0..n)
            .map(|_| {
                // Skewed draws so frequencies differ.
                let i = rng.random_range(0..pool.len());
                pool[rng.random_range(0..=i)].as_str()
            })
            .collect();
        docs.push(doc.join(" "));
        left -= n;
    }
    docs
}

pub fn minimum_size(corpus: &[String]) -> usize {
    let mut alpha = BTreeSet::new();
    for w in corpus.iter().flat_map(|d| d.split_whitespace()) {
        for (i, c) in w.chars().enumerate() {
            alpha.insert(if i == 0 { c.to_string() } else { format!("##{c}") });
        }
    }
    alpha.len() + SPECIAL_TOKENS.len()
}

/// Runs `cases` randomized corpora through `train_bpe` and the recount oracle.
pub fn bpe_oracle_mismatches(cases: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..cases {
        let corpus = random_corpus(&mut rng, 1000);
        let target = minimum_size(&corpus) + rng.random_range(0..80);
        let min_freq = rng.random_range(1..4);
        let vocab = train_bpe(&corpus, target, min_freq, BpeOptions::default()).unwrap();
        if vocab.merges() != oracle_merges(&corpus, target, min_freq).as_slice() || vocab.len() > target {
            bad.push(case);
        }
    }
    bad
}

/// Encodes and decodes `n` random strings over characters the vocabulary can spell both
/// word-initially and as continuations; returns the first failing string.
pub fn round_trip_failure(n: usize, seed: u64) -> Option<String> {
    let mut corpus = vec!["the kidney renal nephropathy disease cardiac hepatic".to_string(); 3];
    corpus.push("ht ek ie dk ni yd rn la pc os".to_string());
    let vocab = train_bpe(&corpus, 90, 1, BpeOptions::default()).unwrap();
    let alphabet: Vec<char> = vocab
        .tokens()
        .iter()
        .filter(|t| t.chars().count() == 1 && vocab.id(&format!("##{t}")).is_some())
        .flat_map(|t| t.chars())
        .collect();
    assert!(alphabet.len() >= 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specials = vocab.specials();
    for _ in 0..n {
        let words: Vec<String> = (0..rng.random_range(1..6))
            .map(|_| {
                (0..rng.random_range(1..10))
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                    .collect()
            })
            .collect();
        let mut s = String::new();
        for w in &words {
            s.push_str(w);
            s.push_str(if rng.random_bool(0.3) { "  " } else { " " });
        }
        let t = encode(&s, &vocab);
        let text = decode(&t.ids, &vocab);
        let ok = t.ids.iter().all(|&id| !specials.contains(id))
            && t.word_count() == words.len()
            && text == words.join(" ")
            && encode(&text, &vocab) == t;
        if !ok {
            return Some(s);
        }
    }
    None
}
