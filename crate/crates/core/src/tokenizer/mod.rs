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

//! Vocabulary learning, subword encoding and embedding alignment.

mod align;
mod bpe;
mod encode;
mod vocab;

use thiserror::Error;

pub use align::{align_vector, align_vocabulary, alignment_plan, base_pieces, fresh_row, RowSource, FRESH_ROW_STD};
pub use bpe::{train_bpe, BpeOptions};
pub use encode::{decode, encode, encode_pair, encode_word, encode_words, frame_pair, EncodedPair, TokenizedText};
pub use vocab::{SpecialIds, Vocabulary, CLS, DEFAULT_CONTINUATION_PREFIX, MASK, PAD, SEP, SPECIAL_TOKENS, UNK};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} is too small; the minimum for this corpus is {minimum}")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("embedding table has {got} rows (or rank), expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
