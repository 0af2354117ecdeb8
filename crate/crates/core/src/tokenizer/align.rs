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

//! Embedding transfer from a base vocabulary onto a newly learned one.
//!
//! Each new token takes its row from the base table by one of three rules:
//! an exact string match copies the base row, a token that decomposes into
//! base pieces takes the mean of those rows, and a token that decomposes to
//! nothing but `[UNK]` is drawn fresh from `N(0, 0.02²)`.
//!
//! Fresh rows are deterministic: the row for new token id `i` is the first
//! `H` normal samples of ChaCha8 seeded with `seed` on stream `i`, so a row
//! does not depend on how many other tokens needed fresh draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::encode::encode_word;
use super::{TokenizerError, Vocabulary};
use crate::numerics::Tensor;

pub const FRESH_ROW_STD: f64 = 0.02;

/// Where a new token's embedding row comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowSource {
    Copy(usize),
    Mean(Vec<usize>),
    Fresh,
}

/// Base-vocabulary pieces of a token string, honoring the continuation prefix.
pub fn base_pieces(token: &str, base: &Vocabulary) -> Vec<usize> {
    match token.strip_prefix(base.continuation_prefix()) {
        Some(rest) if !rest.is_empty() => encode_word(rest, base, true),
        _ => encode_word(token, base, false),
    }
}

/// Row source for every token of `new_vocab`, by new id.
pub fn alignment_plan(new_vocab: &Vocabulary, base_vocab: &Vocabulary) -> Vec<RowSource> {
    let unk = base_vocab.specials().unk;
    new_vocab
        .tokens()
        .iter()
        .map(|tok| {
            if let Some(id) = base_vocab.id(tok) {
                return RowSource::Copy(id);
            }
            let pieces = base_pieces(tok, base_vocab);
            if pieces.is_empty() || pieces.iter().all(|&p| p == unk) {
                RowSource::Fresh
            } else {
                RowSource::Mean(pieces)
            }
        })
        .collect()
}

/// Deterministic fresh row for new token `id`.
pub fn fresh_row(seed: u64, id: usize, hidden: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let normal = Normal::new(0.0, FRESH_ROW_STD).expect("valid std");
    (0..hidden).map(|_| normal.sample(&mut rng)).collect()
}

fn check_rows(base_vocab: &Vocabulary, rows: usize) -> Result<(), TokenizerError> {
    if rows != base_vocab.len() {
        return Err(TokenizerError::DimensionMismatch {
            expected: base_vocab.len(),
            got: rows,
        });
    }
    Ok(())
}

/// Builds a `[|new| × H]` embedding table from a `[|base| × H]` one.
pub fn align_vocabulary(
    new_vocab: &Vocabulary,
    base_vocab: &Vocabulary,
    base_embeddings: &Tensor,
    seed: u64,
) -> Result<Tensor, TokenizerError> {
    if base_embeddings.rank() != 2 {
        return Err(TokenizerError::DimensionMismatch {
            expected: 2,
            got: base_embeddings.rank(),
        });
    }
    check_rows(base_vocab, base_embeddings.shape()[0])?;
    let h = base_embeddings.shape()[1];
    let plan = alignment_plan(new_vocab, base_vocab);
    let mut out = Tensor::zeros(&[new_vocab.len(), h]);
    for (i, src) in plan.iter().enumerate() {
        let row = out.row_mut(i);
        match src {
            RowSource::Copy(b) => row.copy_from_slice(base_embeddings.row(*b)),
            RowSource::Mean(pieces) => {
                for &p in pieces {
                    for (o, &v) in row.iter_mut().zip(base_embeddings.row(p)) {
                        *o += v;
                    }
                }
                let n = pieces.len() as f64;
                row.iter_mut().for_each(|o| *o /= n);
            }
            RowSource::Fresh => row.copy_from_slice(&fresh_row(seed, i, h)),
        }
    }
    Ok(out)
}

/// Same transfer for a per-token vector such as an output bias; fresh entries are 0.
pub fn align_vector(new_vocab: &Vocabulary, base_vocab: &Vocabulary, base: &[f64]) -> Result<Vec<f64>, TokenizerError> {
    check_rows(base_vocab, base.len())?;
    Ok(alignment_plan(new_vocab, base_vocab)
        .iter()
        .map(|src| match src {
            RowSource::Copy(b) => base[*b],
            RowSource::Mean(p) => p.iter().map(|&i| base[i]).sum::<f64>() / p.len() as f64,
            RowSource::Fresh => 0.0,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::vocab::SPECIAL_TOKENS;
    use super::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let tokens = SPECIAL_TOKENS.iter().chain(extra).map(|s| s.to_string()).collect();
        Vocabulary::new(tokens, vec![]).unwrap()
    }

    fn table(rows: usize, h: usize) -> Tensor {
        let data = (0..rows * h).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        Tensor::new(vec![rows, h], data).unwrap()
    }

    #[test]
    fn plan_rules() {
        let base = vocab(&["disease", "ne", "##phro", "##pathy", "d"]);
        let new = vocab(&["disease", "nephropathy", "ﬂ", "##pathy"]);
        let plan = alignment_plan(&new, &base);
        assert_eq!(plan[5], RowSource::Copy(base.id("disease").unwrap()));
        assert_eq!(
            plan[6],
            RowSource::Mean(vec![
                base.id("ne").unwrap(),
                base.id("##phro").unwrap(),
                base.id("##pathy").unwrap()
            ])
        );
        assert_eq!(plan[7], RowSource::Fresh);
        assert_eq!(plan[8], RowSource::Copy(base.id("##pathy").unwrap()));
        for (i, _) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(plan[i], RowSource::Copy(i));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let base = vocab(&["a"]);
        let new = vocab(&["a"]);
        assert!(align_vocabulary(&new, &base, &table(3, 4), 0).is_err());
        assert!(align_vector(&new, &base, &[0.0; 2]).is_err());
    }

    #[test]
    fn fresh_rows_are_reproducible() {
        let base = vocab(&["a"]);
        let new = vocab(&["a", "ﬂ"]);
        let e = table(base.len(), 8);
        let x = align_vocabulary(&new, &base, &e, 11).unwrap();
        let y = align_vocabulary(&new, &base, &e, 11).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.row(6), fresh_row(11, 6, 8).as_slice());
        assert_ne!(x.row(6), align_vocabulary(&new, &base, &e, 12).unwrap().row(6));
    }
}
