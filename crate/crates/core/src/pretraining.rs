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

//! MLM + NSP pretraining: sentence-pair construction, masking, and the training loop.
//!
//! Every random draw is keyed off the run seed through [`derive_seed`], so a run is a
//! pure function of its inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{mlm_logits_at, nsp_logits, BertModel, ForwardMode, ModelError, TokenBatch};
use crate::numerics::{adam_step, lr_schedule, AdamConfig, Graph, NumericsError, OptimizerState};
use crate::seeds::derive_seed;
use crate::tokenizer::{encode, frame_pair, EncodedPair, TokenizedText, Vocabulary};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("masking: {0}")]
    Masking(String),
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step} (batch {batch:#018x})")]
    NonFinite { step: u64, batch: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NSP class ids follow the usual convention: 0 = IsNext, 1 = NotNext.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn class_id(self) -> usize {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspPair<T> {
    pub a: T,
    pub b: T,
    pub label: NspLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NspMix {
    /// `floor(n/2)` NotNext pairs, the rest IsNext.
    Balanced,
    PositivesOnly,
}

/// Samples `count` sentence pairs: IsNext pairs are consecutive sentences of one document,
/// NotNext pairs take `b` from a different document.
pub fn build_nsp_pairs<T: Clone>(
    documents: &[Vec<T>],
    count: usize,
    seed: u64,
    mix: NspMix,
) -> Result<Vec<NspPair<T>>, PretrainError> {
    let consecutive: Vec<(usize, usize)> = documents
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (1..doc.len()).map(move |i| (d, i - 1)))
        .collect();
    let sentences: Vec<(usize, usize)> = documents
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.len()).map(move |i| (d, i)))
        .collect();
    let negatives = match mix {
        NspMix::Balanced => count / 2,
        NspMix::PositivesOnly => 0,
    };
    let positives = count - negatives;
    if positives > 0 && consecutive.is_empty() {
        return Err(PretrainError::Corpus(
            "no document has at least 2 sentences; IsNext pairs impossible".into(),
        ));
    }
    let non_empty = documents.iter().filter(|d| !d.is_empty()).count();
    if negatives > 0 && non_empty < 2 {
        return Err(PretrainError::Corpus(format!(
            "NotNext pairs need at least 2 non-empty documents, found {non_empty}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..positives {
        let (d, i) = consecutive[rng.random_range(0..consecutive.len())];
        pairs.push(NspPair {
            a: documents[d][i].clone(),
            b: documents[d][i + 1].clone(),
            label: NspLabel::IsNext,
        });
    }
    for _ in 0..negatives {
        let (da, ia) = sentences[rng.random_range(0..sentences.len())];
        let others = sentences.len() - documents[da].len();
        let mut k = rng.random_range(0..others);
        // Skip over document `da`, whose sentences occupy one contiguous block.
        let start = sentences.iter().position(|&(d, _)| d == da).unwrap_or(0);
        if k >= start {
            k += documents[da].len();
        }
        let (db, ib) = sentences[k];
        pairs.push(NspPair {
            a: documents[da][ia].clone(),
            b: documents[db][ib].clone(),
            label: NspLabel::NotNext,
        });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Which positions get selected and what replaces them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingPolicy {
    pub p_select: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            p_select: 0.15,
            p_mask: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
            seed: 0,
        }
    }
}

impl MaskingPolicy {
    pub fn with_seed(self, seed: u64) -> Self {
        MaskingPolicy { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let probs = [self.p_mask, self.p_random, self.p_keep];
        if !(self.p_select > 0.0 && self.p_select < 1.0) {
            return Err(PretrainError::InvalidConfig(format!(
                "p_select {} outside (0, 1)",
                self.p_select
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(PretrainError::InvalidConfig(
                "replacement probabilities must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PretrainError::InvalidConfig(format!(
                "p_mask + p_random + p_keep = {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// `max(1, round(p_select · maskable))`.
    pub fn selected_count(&self, maskable: usize) -> usize {
        ((self.p_select * maskable as f64).round() as usize).clamp(1, maskable.max(1))
    }
}

/// One masked pretraining input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainExample {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// Original id at selected positions, `None` elsewhere.
    pub mlm_labels: Vec<Option<usize>>,
    pub nsp_label: NspLabel,
}

impl PretrainExample {
    pub fn selected_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mlm_labels.iter().enumerate().filter_map(|(i, l)| l.map(|_| i))
    }
}

/// Selects positions uniformly without replacement, then replaces each with `[MASK]`,
/// a uniform non-special token, or leaves it, with probabilities `p_mask / p_random / p_keep`.
pub fn apply_masking(
    encoded: &EncodedPair,
    nsp_label: NspLabel,
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
) -> Result<PretrainExample, PretrainError> {
    policy.validate()?;
    let maskable: Vec<usize> = (0..encoded.ids.len())
        .filter(|&i| !vocab.is_special(encoded.ids[i]))
        .collect();
    if maskable.is_empty() {
        return Err(PretrainError::Masking("sequence has no maskable tokens".into()));
    }
    let replacements = vocab.non_special_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let k = policy.selected_count(maskable.len());
    let mut picked: Vec<usize> = index::sample(&mut rng, maskable.len(), k)
        .into_iter()
        .map(|j| maskable[j])
        .collect();
    picked.sort_unstable();

    let mut ids = encoded.ids.clone();
    let mut mlm_labels = vec![None; ids.len()];
    let mask_id = vocab.specials().mask;
    for pos in picked {
        mlm_labels[pos] = Some(ids[pos]);
        let u: f64 = rng.random();
        if u < policy.p_mask {
            ids[pos] = mask_id;
        } else if u < policy.p_mask + policy.p_random {
            ids[pos] = replacements[rng.random_range(0..replacements.len())];
        }
    }
    Ok(PretrainExample {
        attention_mask: vec![true; ids.len()],
        ids,
        segment_ids: encoded.segment_ids.clone(),
        mlm_labels,
        nsp_label,
    })
}

/// Parses a corpus: one sentence per line, blank lines separate documents.
pub fn parse_corpus(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Toy corpus: document `d` owns `pool` words `d{d}w{k}` in cyclic order, and sentence `s`
/// is the window of `words` words starting at `2s` in that cycle.
pub fn synthetic_corpus(documents: usize, sentences: usize, words: usize, pool: usize) -> Vec<Vec<String>> {
    (0..documents)
        .map(|d| {
            (0..sentences)
                .map(|s| {
                    (0..words)
                        .map(|j| format!("d{d}w{}", (2 * s + j) % pool))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect()
        })
        .collect()
}

pub fn render_corpus(docs: &[Vec<String>]) -> String {
    docs.iter().map(|d| d.join("\n") + "\n").collect::<Vec<_>>().join("\n")
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>, PretrainError> {
    Ok(parse_corpus(&std::fs::read_to_string(path)?))
}

pub fn tokenize_corpus(docs: &[Vec<String>], vocab: &Vocabulary) -> Vec<Vec<TokenizedText>> {
    docs.iter()
        .map(|d| d.iter().map(|s| encode(s, vocab)).collect())
        .collect()
}

/// Training-loop settings. `base_lr` is scaled by the warmup/decay schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub policy: MaskingPolicy,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write `step-<n>.ckpt` every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            policy: MaskingPolicy::default(),
            base_lr: 3e-4,
            warmup_steps: 2000,
            total_steps: 10_000,
            batch_size: 32,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: u64,
    pub mlm: f64,
    pub nsp: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.mlm + self.nsp
    }
}

pub fn render_loss_trace(trace: &[StepLoss]) -> String {
    let mut out = String::new();
    for s in trace {
        let _ = writeln!(out, "{}\t{}\t{}", s.step, s.mlm, s.nsp);
    }
    out
}

pub fn parse_loss_trace(text: &str) -> Result<Vec<StepLoss>, PretrainError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || PretrainError::Corpus(format!("loss trace line {}: expected step<TAB>mlm<TAB>nsp", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(StepLoss {
                step: f[0].parse().map_err(|_| bad())?,
                mlm: f[1].parse().map_err(|_| bad())?,
                nsp: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Builds the masked batch for one step.
pub fn sample_batch(
    corpus: &[Vec<TokenizedText>],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    max_seq: usize,
    batch_size: usize,
    batch_seed: u64,
) -> Result<Vec<PretrainExample>, PretrainError> {
    let pairs = build_nsp_pairs(corpus, batch_size, derive_seed(batch_seed, 0), NspMix::Balanced)?;
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let framed = frame_pair(p.a, p.b, vocab, max_seq);
            apply_masking(
                &framed,
                p.label,
                vocab,
                &policy.with_seed(derive_seed(batch_seed, 2 + i as u64)),
            )
        })
        .collect()
}

struct BatchLoss {
    mlm: crate::numerics::Var,
    nsp: crate::numerics::Var,
    mlm_logits: crate::numerics::Var,
    nsp_logits: crate::numerics::Var,
    targets: Vec<usize>,
}

fn batch_loss(
    g: &mut Graph,
    model: &BertModel,
    examples: &[PretrainExample],
    pad: usize,
    mode: &ForwardMode,
) -> Result<BatchLoss, PretrainError> {
    let seqs: Vec<(&[usize], &[usize])> = examples.iter().map(|e| (&e.ids[..], &e.segment_ids[..])).collect();
    let batch = TokenBatch::from_sequences(&seqs, pad);
    let out = model.encode(g, &batch, mode)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, e) in examples.iter().enumerate() {
        for (t, label) in e.mlm_labels.iter().enumerate() {
            if let Some(id) = label {
                rows.push(b * batch.seq + t);
                targets.push(*id);
            }
        }
    }
    let mlm_logits = mlm_logits_at(g, &model.params, out.hidden_states, &rows)?;
    let mlm = g.cross_entropy(mlm_logits, &targets.iter().map(|&t| Some(t)).collect::<Vec<_>>())?;
    let nsp_logits = nsp_logits(g, &model.params, out.pooled)?;
    let nsp_targets: Vec<Option<usize>> = examples.iter().map(|e| Some(e.nsp_label.class_id())).collect();
    let nsp = g.cross_entropy(nsp_logits, &nsp_targets)?;
    Ok(BatchLoss {
        mlm,
        nsp,
        mlm_logits,
        nsp_logits,
        targets,
    })
}

pub struct PretrainRun {
    pub model: BertModel,
    pub trace: Vec<StepLoss>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains `model` in place on MLM + NSP (unweighted sum of the two mean cross-entropies).
pub fn pretrain(
    mut model: BertModel,
    corpus: &[Vec<TokenizedText>],
    vocab: &Vocabulary,
    opts: &PretrainOptions,
) -> Result<PretrainRun, PretrainError> {
    opts.policy.validate()?;
    if opts.batch_size == 0 {
        return Err(PretrainError::InvalidConfig("batch_size must be positive".into()));
    }
    if model.config.vocab_size != vocab.len() {
        return Err(PretrainError::InvalidConfig(format!(
            "model vocab_size {} does not match vocabulary size {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    // Surface structural problems before any training.
    build_nsp_pairs(corpus, 2, opts.seed, NspMix::Balanced)?;

    let adam = AdamConfig {
        lr: opts.base_lr,
        weight_decay: opts.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(adam, &model.params);
    let pad = vocab.specials().pad;
    let mut trace = Vec::with_capacity(opts.total_steps as usize);
    let mut checkpoints = Vec::new();
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for step in 0..opts.total_steps {
        let batch_seed = derive_seed(opts.seed, step);
        let examples = sample_batch(
            corpus,
            vocab,
            &opts.policy,
            model.config.max_seq,
            opts.batch_size,
            batch_seed,
        )?;
        let mut g = Graph::new();
        let mode = ForwardMode::train(derive_seed(batch_seed, 1));
        let losses = batch_loss(&mut g, &model, &examples, pad, &mode)?;
        let loss = g.add(losses.mlm, losses.nsp)?;
        let (mlm, nsp) = (g.value(losses.mlm).item(), g.value(losses.nsp).item());
        if !(mlm.is_finite() && nsp.is_finite()) {
            return Err(PretrainError::NonFinite {
                step,
                batch: batch_seed,
            });
        }
        g.backward(loss, &mut model.params)?;
        adam_step(
            &mut model.params,
            &mut state,
            lr_schedule(step + 1, opts.warmup_steps, opts.total_steps, 1.0),
        );
        trace.push(StepLoss { step, mlm, nsp });

        let done = step + 1;
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
                let path = dir.join(format!("step-{done}.ckpt"));
                model.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(PretrainRun {
        model,
        trace,
        checkpoints,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEval {
    pub mlm_accuracy: f64,
    pub nsp_accuracy: f64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub masked_tokens: usize,
    pub pairs: usize,
}

/// Masked-token and NSP accuracy on freshly sampled batches, without dropout.
pub fn evaluate_pretraining(
    model: &BertModel,
    corpus: &[Vec<TokenizedText>],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PretrainEval, PretrainError> {
    let pad = vocab.specials().pad;
    let (mut mlm_hits, mut mlm_n, mut nsp_hits, mut nsp_n) = (0usize, 0usize, 0usize, 0usize);
    let (mut mlm_loss, mut nsp_loss) = (0.0, 0.0);
    for b in 0..batches {
        let examples = sample_batch(
            corpus,
            vocab,
            policy,
            model.config.max_seq,
            batch_size,
            derive_seed(seed, b as u64),
        )?;
        let mut g = Graph::new();
        let l = batch_loss(&mut g, model, &examples, pad, &ForwardMode::eval())?;
        mlm_loss += g.value(l.mlm).item() * l.targets.len() as f64;
        nsp_loss += g.value(l.nsp).item() * examples.len() as f64;
        let logits = g.value(l.mlm_logits);
        for (r, &t) in l.targets.iter().enumerate() {
            mlm_hits += (argmax(logits.row(r)) == t) as usize;
        }
        mlm_n += l.targets.len();
        let nsp = g.value(l.nsp_logits);
        for (r, e) in examples.iter().enumerate() {
            nsp_hits += (argmax(nsp.row(r)) == e.nsp_label.class_id()) as usize;
        }
        nsp_n += examples.len();
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(PretrainEval {
        mlm_accuracy: frac(mlm_hits, mlm_n),
        nsp_accuracy: frac(nsp_hits, nsp_n),
        mlm_loss: if mlm_n == 0 { 0.0 } else { mlm_loss / mlm_n as f64 },
        nsp_loss: if nsp_n == 0 { 0.0 } else { nsp_loss / nsp_n as f64 },
        masked_tokens: mlm_n,
        pairs: nsp_n,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip() {
        let text = "a b\nc d\n\n\ne f\n";
        let docs = parse_corpus(text);
        assert_eq!(docs, vec![vec!["a b".to_string(), "c d".into()], vec!["e f".into()]]);
        assert_eq!(parse_corpus(&render_corpus(&docs)), docs);
    }

    #[test]
    fn selected_count_rule() {
        let p = MaskingPolicy::default();
        assert_eq!(p.selected_count(20), 3);
        assert_eq!(p.selected_count(1), 1);
        assert_eq!(p.selected_count(3), 1);
        assert_eq!(p.selected_count(100), 15);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
