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

use super::Vocabulary;

/// Token ids plus a flag marking the first piece of each whitespace-delimited word.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub word_starts: Vec<bool>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.word_starts.iter().filter(|&&s| s).count()
    }
}

/// `[CLS] A [SEP] B [SEP]` framing with segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// First-piece flags aligned with `ids`; false on specials.
    pub word_starts: Vec<bool>,
    /// Number of A and B pieces kept after truncation.
    pub kept: (usize, usize),
}

/// Greedy longest-match segmentation of one word.
///
/// With `continuation` set, every piece (including the first) must carry the
/// continuation prefix. Positions with no matching piece emit `[UNK]` and
/// advance one character.
pub fn encode_word(word: &str, vocab: &Vocabulary, continuation: bool) -> Vec<usize> {
    let chars: Vec<char> = word.chars().collect();
    let prefix = vocab.continuation_prefix();
    let max_len = vocab.max_token_chars().max(1);
    let mut out = Vec::new();
    let mut start = 0;
    let mut buf = String::new();
    while start < chars.len() {
        let mut found = None;
        let mut end = (start + max_len).min(chars.len());
        while end > start {
            buf.clear();
            if start > 0 || continuation {
                buf.push_str(prefix);
            }
            buf.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&buf).filter(|&id| !vocab.is_special(id)) {
                found = Some((id, end));
                break;
            }
            end -= 1;
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(vocab.specials().unk);
                start += 1;
            }
        }
    }
    out
}

fn normalize<'a>(text: &'a str, vocab: &Vocabulary) -> std::borrow::Cow<'a, str> {
    if vocab.lowercase() {
        std::borrow::Cow::Owned(text.to_lowercase())
    } else {
        std::borrow::Cow::Borrowed(text)
    }
}

/// Encodes text word by word. Never emits `[CLS]`, `[SEP]` or `[MASK]`.
pub fn encode(text: &str, vocab: &Vocabulary) -> TokenizedText {
    let text = normalize(text, vocab);
    let mut out = TokenizedText::default();
    for word in text.split_whitespace() {
        let pieces = encode_word(word, vocab, false);
        for (i, id) in pieces.into_iter().enumerate() {
            out.ids.push(id);
            out.word_starts.push(i == 0);
        }
    }
    out
}

/// Encodes pre-split words, keeping one entry per word even when a word is empty.
pub fn encode_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> TokenizedText {
    let mut out = TokenizedText::default();
    for w in words {
        let w = normalize(w.as_ref(), vocab);
        let mut pieces = encode_word(&w, vocab, false);
        if pieces.is_empty() {
            pieces.push(vocab.specials().unk);
        }
        for (i, id) in pieces.into_iter().enumerate() {
            out.ids.push(id);
            out.word_starts.push(i == 0);
        }
    }
    out
}

/// Joins pieces back into text: continuation pieces attach to the previous
/// token, everything else starts a new space-separated word.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> String {
    let prefix = vocab.continuation_prefix();
    let mut s = String::new();
    for &id in ids {
        let tok = vocab.token(id).unwrap_or(super::vocab::UNK);
        match tok.strip_prefix(prefix) {
            Some(rest) if !s.is_empty() => s.push_str(rest),
            _ => {
                if !s.is_empty() {
                    s.push(' ');
                }
                s.push_str(tok);
            }
        }
    }
    s
}

/// Truncates the longer side one piece at a time until `a + b + reserved <= max_len`.
/// Ties trim `b`.
pub(crate) fn truncate_longest_first(a: &mut TokenizedText, b: &mut TokenizedText, budget: usize) {
    while a.len() + b.len() > budget {
        let side = if a.len() > b.len() { &mut *a } else { &mut *b };
        side.ids.pop();
        side.word_starts.pop();
    }
}

/// Frames one or two pre-tokenized sentences. An empty `b` yields `[CLS] A [SEP]`.
pub fn frame_pair(mut a: TokenizedText, mut b: TokenizedText, vocab: &Vocabulary, max_len: usize) -> EncodedPair {
    assert!(max_len >= 5, "max_len must be at least 5");
    let sp = vocab.specials();
    let single = b.is_empty();
    let budget = if single { max_len - 2 } else { max_len - 3 };
    truncate_longest_first(&mut a, &mut b, budget);

    let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
    let mut segment_ids = Vec::with_capacity(ids.capacity());
    let mut word_starts = Vec::with_capacity(ids.capacity());
    ids.push(sp.cls);
    segment_ids.push(0);
    word_starts.push(false);
    ids.extend(&a.ids);
    segment_ids.extend(std::iter::repeat_n(0, a.len()));
    word_starts.extend(&a.word_starts);
    ids.push(sp.sep);
    segment_ids.push(0);
    word_starts.push(false);
    if !single {
        ids.extend(&b.ids);
        segment_ids.extend(std::iter::repeat_n(1, b.len()));
        word_starts.extend(&b.word_starts);
        ids.push(sp.sep);
        segment_ids.push(1);
        word_starts.push(false);
    }
    EncodedPair {
        ids,
        segment_ids,
        word_starts,
        kept: (a.len(), b.len()),
    }
}

/// `[CLS] A [SEP] B [SEP]` with longest-first truncation to `max_len` (≥ 5).
pub fn encode_pair(a: &str, b: &str, vocab: &Vocabulary, max_len: usize) -> EncodedPair {
    frame_pair(encode(a, vocab), encode(b, vocab), vocab, max_len)
}

#[cfg(test)]
mod tests {
    use super::super::vocab::SPECIAL_TOKENS;
    use super::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let tokens = SPECIAL_TOKENS.iter().chain(extra).map(|s| s.to_string()).collect();
        Vocabulary::new(tokens, vec![]).unwrap()
    }

    #[test]
    fn longest_match_with_continuations() {
        let v = vocab(&["n", "ne", "nephro", "##p", "##pathy", "##path", "##y"]);
        let t = encode("nephropathy", &v);
        assert_eq!(t.ids, vec![v.id("nephro").unwrap(), v.id("##pathy").unwrap()]);
        assert_eq!(t.word_starts, vec![true, false]);
        assert_eq!(decode(&t.ids, &v), "nephropathy");
    }

    #[test]
    fn unknown_character_is_unk() {
        let v = vocab(&["a"]);
        let t = encode("ﬂ", &v);
        assert_eq!(t.ids, vec![v.specials().unk]);
        assert_eq!(t.word_starts, vec![true]);
    }

    #[test]
    fn never_emits_framing_specials() {
        let v = vocab(&["[", "##C", "##L", "##S", "##]"]);
        let t = encode("[CLS] [MASK]", &v);
        assert!(!t.ids.contains(&v.specials().cls));
        assert!(!t.ids.contains(&v.specials().mask));
    }

    #[test]
    fn pair_layout() {
        let v = vocab(&["x", "y"]);
        let p = encode_pair("x", "y", &v, 512);
        assert_eq!(p.ids.len(), 5);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 1, 1]);
        let single = encode_pair("x", "", &v, 512);
        assert_eq!(single.ids, vec![v.specials().cls, v.id("x").unwrap(), v.specials().sep]);
        assert_eq!(single.segment_ids, vec![0, 0, 0]);
    }

    #[test]
    fn truncates_longest_first() {
        let v = vocab(&["a", "b"]);
        let a = vec!["a"; 600].join(" ");
        let b = vec!["b"; 10].join(" ");
        let p = encode_pair(&a, &b, &v, 512);
        assert_eq!(p.kept, (499, 10));
        assert_eq!(p.ids.len(), 512);
    }
}
