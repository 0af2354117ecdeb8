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

//! BPE vocabulary induction over whitespace-delimited words.
//!
//! Words start as character sequences where every non-initial character
//! carries the continuation prefix (`h ##u ##g`). Each round merges the most
//! frequent adjacent pair. Ties go to the pair whose prefix-stripped
//! `(left, right)` strings sort first, then to the raw strings.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};

use super::vocab::{merge_strings, DEFAULT_CONTINUATION_PREFIX, SPECIAL_TOKENS};
use super::{TokenizerError, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BpeOptions {
    pub lowercase: bool,
}

/// Word frequencies in first-seen order.
pub(crate) fn word_counts(corpus: &[String], lowercase: bool) -> Vec<(String, u64)> {
    let mut order = Vec::new();
    let mut counts: HashMap<String, u64> = HashMap::new();
    for doc in corpus {
        for w in doc.split_whitespace() {
            let w = if lowercase { w.to_lowercase() } else { w.to_string() };
            match counts.get_mut(&w) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(w.clone(), 1);
                    order.push(w);
                }
            }
        }
    }
    order
        .into_iter()
        .map(|w| {
            let c = counts[&w];
            (w, c)
        })
        .collect()
}

/// Initial symbol strings of a word: first char bare, the rest prefixed.
pub(crate) fn initial_symbols(word: &str, prefix: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{prefix}{c}") })
        .collect()
}

/// Ordering used to break frequency ties between candidate pairs.
pub(crate) fn tie_break(a: (&str, &str), b: (&str, &str), prefix: &str) -> Ordering {
    let strip = |s: &str| s.strip_prefix(prefix).unwrap_or(s).to_string();
    (strip(a.0), strip(a.1), a.0, a.1).cmp(&(strip(b.0), strip(b.1), b.0, b.1))
}

type Pair = (u32, u32);

struct Trainer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    words: Vec<Vec<u32>>,
    freqs: Vec<u64>,
    pair_counts: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, BTreeSet<usize>>,
    banned: HashSet<Pair>,
    prefix: String,
}

impl Trainer {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    fn count_word(&mut self, w: usize, sign: i64) {
        let freq = self.freqs[w];
        for win in self.words[w].windows(2) {
            let pair = (win[0], win[1]);
            let c = self.pair_counts.entry(pair).or_insert(0);
            if sign > 0 {
                *c += freq;
                self.pair_words.entry(pair).or_default().insert(w);
            } else {
                *c -= freq;
            }
        }
    }

    fn best_pair(&self, min_freq: u64) -> Option<Pair> {
        let mut best: Option<(Pair, u64)> = None;
        for (&pair, &count) in &self.pair_counts {
            if count == 0 || count < min_freq || self.banned.contains(&pair) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc
                            && tie_break(
                                (&self.tokens[pair.0 as usize], &self.tokens[pair.1 as usize]),
                                (&self.tokens[bp.0 as usize], &self.tokens[bp.1 as usize]),
                                &self.prefix,
                            ) == Ordering::Less)
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        best.map(|(p, _)| p)
    }

    fn apply(&mut self, pair: Pair, merged: u32) {
        let affected: Vec<usize> = self
            .pair_words
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for w in affected {
            self.count_word(w, -1);
            let old = std::mem::take(&mut self.words[w]);
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == pair.0 && old[i + 1] == pair.1 {
                    new.push(merged);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            self.words[w] = new;
            self.count_word(w, 1);
        }
        self.pair_counts.retain(|_, c| *c > 0);
    }
}

/// Learns a vocabulary of at most `target_size` tokens from `corpus`.
pub fn train_bpe(
    corpus: &[String],
    target_size: usize,
    min_pair_freq: u64,
    options: BpeOptions,
) -> Result<Vocabulary, TokenizerError> {
    let counts = word_counts(corpus, options.lowercase);
    if counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let prefix = DEFAULT_CONTINUATION_PREFIX.to_string();

    let mut alphabet = BTreeSet::new();
    for (w, _) in &counts {
        alphabet.extend(initial_symbols(w, &prefix));
    }
    let minimum = alphabet.len() + SPECIAL_TOKENS.len();
    if target_size < minimum {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            minimum,
        });
    }

    let mut trainer = Trainer {
        tokens: Vec::new(),
        index: HashMap::new(),
        words: Vec::with_capacity(counts.len()),
        freqs: Vec::with_capacity(counts.len()),
        pair_counts: HashMap::new(),
        pair_words: HashMap::new(),
        banned: HashSet::new(),
        prefix: prefix.clone(),
    };
    for s in SPECIAL_TOKENS {
        trainer.intern(s);
    }
    for s in &alphabet {
        trainer.intern(s);
    }
    for (w, c) in &counts {
        let syms: Vec<u32> = initial_symbols(w, &prefix).iter().map(|s| trainer.index[s]).collect();
        trainer.words.push(syms);
        trainer.freqs.push(*c);
    }
    for w in 0..trainer.words.len() {
        trainer.count_word(w, 1);
    }

    let mut merges = Vec::new();
    while trainer.tokens.len() < target_size {
        let Some(pair) = trainer.best_pair(min_pair_freq.max(1)) else {
            break;
        };
        let (l, r) = (
            trainer.tokens[pair.0 as usize].clone(),
            trainer.tokens[pair.1 as usize].clone(),
        );
        let merged = merge_strings(&l, &r, &prefix);
        if SPECIAL_TOKENS.contains(&merged.as_str()) {
            trainer.banned.insert(pair);
            continue;
        }
        let id = trainer.intern(&merged);
        trainer.apply(pair, id);
        merges.push((l, r));
    }

    Ok(Vocabulary::new(trainer.tokens, merges)?.with_lowercase(options.lowercase))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[&str]) -> Vec<String> {
        docs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn first_merge_breaks_ties_lexicographically() {
        // ("h","##u") and ("##u","##g") both occur 3 times.
        let v = train_bpe(&corpus(&["hug hug hugs"]), 12, 1, BpeOptions::default()).unwrap();
        assert_eq!(v.merges()[0], ("h".to_string(), "##u".to_string()));
    }

    #[test]
    fn single_character_corpus() {
        let v = train_bpe(&corpus(&["a"]), 6, 1, BpeOptions::default()).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.id("a").is_some());
        assert!(v.merges().is_empty());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_bpe(&[], 10, 1, BpeOptions::default()),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe(&corpus(&["   "]), 10, 1, BpeOptions::default()),
            Err(TokenizerError::EmptyCorpus)
        ));
        let err = train_bpe(&corpus(&["abc"]), 7, 1, BpeOptions::default()).unwrap_err();
        assert!(matches!(err, TokenizerError::TargetTooSmall { minimum: 8, .. }));
        assert!(err.to_string().contains('8'));
    }

    #[test]
    fn never_learns_special_strings() {
        let docs = corpus(&["[PAD] [PAD] [PAD] [MASK] [MASK]"]);
        let v = train_bpe(&docs, 200, 1, BpeOptions::default()).unwrap();
        for s in SPECIAL_TOKENS {
            assert!(v.merges().iter().all(|(l, r)| merge_strings(l, r, "##") != s));
        }
    }

    #[test]
    fn respects_min_pair_frequency() {
        let v = train_bpe(&corpus(&["ab ab cd"]), 100, 2, BpeOptions::default()).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "##b".to_string())]);
    }

    #[test]
    fn lowercase_flag() {
        let v = train_bpe(&corpus(&["Hug HUG"]), 100, 1, BpeOptions { lowercase: true }).unwrap();
        assert!(v.id("H").is_none());
        assert!(v.id("hug").is_some());
        assert!(v.lowercase());
    }
}
