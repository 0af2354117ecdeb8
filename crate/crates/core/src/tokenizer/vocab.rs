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

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TokenizerError;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const DEFAULT_CONTINUATION_PREFIX: &str = "##";

const MERGES_HEADER: &str = "#medbert-merges v1: one `left right` pair per line in rank order";

/// Ids of the five special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl SpecialIds {
    pub fn contains(&self, id: usize) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

/// Token list (index = id), BPE merge ranks and special-token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    specials: SpecialIds,
    continuation_prefix: String,
    lowercase: bool,
    max_token_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary, checking uniqueness and the presence of all specials.
    pub fn new(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::InvalidVocabulary(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(TokenizerError::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| TokenizerError::InvalidVocabulary(format!("missing special token {s}")))
        };
        let specials = SpecialIds {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
        };
        let prefix = DEFAULT_CONTINUATION_PREFIX.to_string();
        for (l, r) in &merges {
            let merged = merge_strings(l, r, &prefix);
            if SPECIAL_TOKENS.contains(&merged.as_str()) {
                return Err(TokenizerError::InvalidVocabulary(format!(
                    "merge ({l}, {r}) produces a special token"
                )));
            }
        }
        let max_token_chars = tokens
            .iter()
            .map(|t| t.strip_prefix(prefix.as_str()).unwrap_or(t).chars().count())
            .max()
            .unwrap_or(0);
        Ok(Vocabulary {
            tokens,
            index,
            merges,
            specials,
            continuation_prefix: prefix,
            lowercase: false,
            max_token_chars,
        })
    }

    /// Lowercases text before encoding when set.
    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.specials.contains(id)
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.continuation_prefix
    }

    pub(crate) fn max_token_chars(&self) -> usize {
        self.max_token_chars
    }

    /// Ids of every non-special token, ascending.
    pub fn non_special_ids(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| !self.is_special(i)).collect()
    }

    /// One token per line, line number = id.
    pub fn render_tokens(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn render_merges(&self) -> String {
        let mut s = String::from(MERGES_HEADER);
        s.push('\n');
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn parse(tokens_text: &str, merges_text: Option<&str>) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = tokens_text.lines().map(str::to_string).collect();
        let known: std::collections::HashSet<&str> = tokens.iter().map(String::as_str).collect();
        let mut merges = Vec::new();
        if let Some(text) = merges_text {
            for (i, line) in text.lines().enumerate() {
                let fields: Vec<&str> = line.split(' ').collect();
                let is_pair = fields.len() == 2 && known.contains(fields[0]) && known.contains(fields[1]);
                if is_pair {
                    merges.push((fields[0].to_string(), fields[1].to_string()));
                } else if line.starts_with('#') || line.is_empty() {
                    continue;
                } else {
                    return Err(TokenizerError::InvalidVocabulary(format!(
                        "merges line {}: expected `left right` over known tokens, got {line:?}",
                        i + 1
                    )));
                }
            }
        }
        Vocabulary::new(tokens, merges)
    }

    pub fn save(&self, vocab_path: &Path, merges_path: Option<&Path>) -> Result<(), TokenizerError> {
        fs::write(vocab_path, self.render_tokens())?;
        if let Some(p) = merges_path {
            fs::write(p, self.render_merges())?;
        }
        Ok(())
    }

    pub fn load(vocab_path: &Path, merges_path: Option<&Path>) -> Result<Self, TokenizerError> {
        let tokens = fs::read_to_string(vocab_path)?;
        let merges = merges_path.map(fs::read_to_string).transpose()?;
        Vocabulary::parse(&tokens, merges.as_deref())
    }
}

/// String produced by merging two adjacent symbols.
pub(crate) fn merge_strings(left: &str, right: &str, prefix: &str) -> String {
    let mut s = String::with_capacity(left.len() + right.len());
    s.push_str(left);
    s.push_str(right.strip_prefix(prefix).unwrap_or(right));
    s
}
