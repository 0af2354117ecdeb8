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

//! Task heads on a pretrained encoder: label alignment, training, BIO decoding, prediction.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasets::{ConllData, LabeledData, TaskKind};
use crate::kv::KvDoc;
use crate::metrics::{classification_scores, entity_f1, multilabel_scores, pearson, MetricReport, MetricsError, Span};
use crate::model::{pooling_mask, sentence_embedding, BertModel, ForwardMode, ModelError, TokenBatch, INIT_STD};
use crate::numerics::{
    adam_step, AdamConfig, Graph, Initializer, NumericsError, OptimizerState, ParameterStore, Tensor, Var,
};
use crate::pretraining::argmax;
use crate::seeds::derive_seed;
use crate::tokenizer::{encode, encode_words, frame_pair, EncodedPair, TokenizedText, Vocabulary};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid finetune config: {0}")]
    InvalidConfig(String),
    #[error("label {label:?} is not part of the task")]
    UnknownLabel { label: String },
    #[error("example {index}: {message}")]
    BadExample { index: usize, message: String },
    #[error("label alignment: {0}")]
    Misaligned(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Task family plus its label inventory; label ids are positions in the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSpec {
    TokenClassification(Vec<String>),
    SequenceClassification(Vec<String>),
    MultiLabel(Vec<String>),
    Similarity,
    QaClassification(Vec<String>),
}

impl TaskSpec {
    pub fn labels(&self) -> &[String] {
        match self {
            TaskSpec::TokenClassification(l)
            | TaskSpec::SequenceClassification(l)
            | TaskSpec::MultiLabel(l)
            | TaskSpec::QaClassification(l) => l,
            TaskSpec::Similarity => &[],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TaskSpec::TokenClassification(_) => "token",
            TaskSpec::SequenceClassification(_) => "sequence",
            TaskSpec::MultiLabel(_) => "multilabel",
            TaskSpec::Similarity => "similarity",
            TaskSpec::QaClassification(_) => "qa",
        }
    }

    pub fn validate(&self) -> Result<(), FinetuneError> {
        if matches!(self, TaskSpec::Similarity) {
            return Ok(());
        }
        let labels = self.labels();
        if labels.is_empty() {
            return Err(FinetuneError::InvalidTask("label set is empty".into()));
        }
        if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
            return Err(FinetuneError::InvalidTask("label set has duplicates".into()));
        }
        if labels.iter().any(|l| l.is_empty() || l.contains([',', '\t', '\n'])) {
            return Err(FinetuneError::InvalidTask(
                "labels must be non-empty and free of , TAB and newline".into(),
            ));
        }
        Ok(())
    }

    pub fn label_id(&self, label: &str) -> Result<usize, FinetuneError> {
        self.labels()
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| FinetuneError::UnknownLabel {
                label: label.to_string(),
            })
    }

    /// Output width of the task head (0 for similarity, which has no head).
    pub fn head_width(&self) -> usize {
        self.labels().len()
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("task", self.kind_name());
        if !matches!(self, TaskSpec::Similarity) {
            d.set("labels", self.labels().join(","));
        }
        d
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, FinetuneError> {
        let labels = || -> Vec<String> {
            doc.get("labels")
                .unwrap_or("")
                .split(',')
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        };
        let spec = match doc.get("task") {
            Some("token") => TaskSpec::TokenClassification(labels()),
            Some("sequence") => TaskSpec::SequenceClassification(labels()),
            Some("multilabel") => TaskSpec::MultiLabel(labels()),
            Some("qa") => TaskSpec::QaClassification(labels()),
            Some("similarity") => TaskSpec::Similarity,
            other => return Err(FinetuneError::InvalidTask(format!("unknown task kind {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One training or evaluation input, with label ids resolved against a [`TaskSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum FinetuneExample {
    Tokens { words: Vec<String>, tags: Vec<usize> },
    Sequence { a: String, b: Option<String>, label: usize },
    MultiLabel { text: String, labels: Vec<bool> },
    Pair { a: String, b: String, score: f64 },
}

/// Sentences of a CoNLL file with tags resolved against the file's tag set.
pub fn token_examples(data: &ConllData) -> (TaskSpec, Vec<FinetuneExample>) {
    let task = TaskSpec::TokenClassification(data.tags.clone());
    let examples = data
        .sentences()
        .map(|s| FinetuneExample::Tokens {
            words: s.words.clone(),
            tags: s
                .tags
                .iter()
                .map(|t| task.label_id(t).expect("tag set collected from file"))
                .collect(),
        })
        .collect();
    (task, examples)
}

/// Typed examples from a labeled-text dataset.
pub fn labeled_examples(data: &LabeledData) -> Result<(TaskSpec, Vec<FinetuneExample>), FinetuneError> {
    Ok(match data {
        LabeledData::Relation { labels, examples, .. } => {
            let task = TaskSpec::SequenceClassification(labels.clone());
            let ex = examples
                .iter()
                .map(|e| {
                    Ok(FinetuneExample::Sequence {
                        a: e.sentence.clone(),
                        b: None,
                        label: task.label_id(&e.label)?,
                    })
                })
                .collect::<Result<_, FinetuneError>>()?;
            (task, ex)
        }
        LabeledData::Qa { labels, examples } => {
            let task = TaskSpec::QaClassification(labels.clone());
            let ex = examples
                .iter()
                .map(|e| {
                    Ok(FinetuneExample::Sequence {
                        a: e.question.clone(),
                        b: Some(e.context.clone()),
                        label: task.label_id(&e.label)?,
                    })
                })
                .collect::<Result<_, FinetuneError>>()?;
            (task, ex)
        }
        LabeledData::MultiLabel { labels, examples } => {
            let task = TaskSpec::MultiLabel(labels.clone());
            let ex = examples
                .iter()
                .map(|e| {
                    let mut ind = vec![false; labels.len()];
                    for l in &e.labels {
                        ind[task.label_id(l)?] = true;
                    }
                    Ok(FinetuneExample::MultiLabel {
                        text: e.text.clone(),
                        labels: ind,
                    })
                })
                .collect::<Result<_, FinetuneError>>()?;
            (task, ex)
        }
        LabeledData::Pair { examples } => (
            TaskSpec::Similarity,
            examples
                .iter()
                .map(|e| FinetuneExample::Pair {
                    a: e.a.clone(),
                    b: e.b.clone(),
                    score: e.score,
                })
                .collect(),
        ),
    })
}

/// Per-token labels: the first piece of each word carries the word's label, everything
/// else (continuations, specials) is ignored.
pub fn align_labels(word_labels: &[usize], word_starts: &[bool]) -> Result<Vec<Option<usize>>, FinetuneError> {
    let starts = word_starts.iter().filter(|&&s| s).count();
    if starts != word_labels.len() {
        return Err(FinetuneError::Misaligned(format!(
            "{} word labels but {starts} word starts",
            word_labels.len()
        )));
    }
    let mut next = word_labels.iter();
    Ok(word_starts
        .iter()
        .map(|&s| if s { next.next().copied() } else { None })
        .collect())
}

/// Maximal `B-X (I-X)*` runs become inclusive word spans; a stray `I-X` opens a new span.
pub fn decode_bio<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (kind, ty) = crate::datasets::parse_tag(tag).unwrap_or(('O', ""));
        let continues = kind == 'I' && open.as_ref().is_some_and(|(_, t)| t == ty);
        if continues {
            continue;
        }
        if let Some((start, t)) = open.take() {
            spans.push(Span::new(start, i - 1, t));
        }
        if kind != 'O' {
            open = Some((i, ty.to_string()));
        }
    }
    if let Some((start, t)) = open {
        spans.push(Span::new(start, tags.len() - 1, t));
    }
    spans
}

/// Inverse of [`decode_bio`] for non-overlapping spans.
pub fn encode_bio(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for s in spans {
        tags[s.start] = format!("B-{}", s.ty);
        for t in &mut tags[s.start + 1..=s.end] {
            *t = format!("I-{}", s.ty);
        }
    }
    tags
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Similarity only: train the encoder through the cosine objective. When false the
    /// run evaluates inference-time cosine and leaves parameters untouched.
    pub train_similarity: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 16,
            lr: 5e-5,
            epochs: 10,
            max_seq: 128,
            seed: 0,
            weight_decay: 0.01,
            train_similarity: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: String| Err(FinetuneError::InvalidConfig(m));
        if ![16, 32].contains(&self.batch_size) {
            return bad(format!("batch_size must be 16 or 32, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs > 100 {
            return bad(format!("epochs must be at most 100, got {}", self.epochs));
        }
        if self.max_seq < 5 {
            return bad(format!("max_seq must be at least 5, got {}", self.max_seq));
        }
        Ok(())
    }
}

/// Learning rate, batch size and epochs assigned per dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

/// Named-dataset overrides; anything else gets the defaults for its task kind.
pub const DATASET_OVERRIDES: &[(&str, Hyperparameters)] = &[
    (
        "jnlpba",
        Hyperparameters {
            lr: 1e-5,
            batch_size: 32,
            epochs: 25,
        },
    ),
    (
        "chemprot",
        Hyperparameters {
            lr: 3e-5,
            batch_size: 32,
            epochs: 10,
        },
    ),
    (
        "ddi",
        Hyperparameters {
            lr: 3e-5,
            batch_size: 32,
            epochs: 10,
        },
    ),
    (
        "gad",
        Hyperparameters {
            lr: 3e-5,
            batch_size: 32,
            epochs: 10,
        },
    ),
];

pub fn hyperparameters_for(dataset: &str, kind: TaskKind) -> Hyperparameters {
    let key = dataset.to_ascii_lowercase();
    if let Some((_, h)) = DATASET_OVERRIDES
        .iter()
        .find(|(name, _)| key == *name || key.starts_with(&format!("{name}-")))
    {
        return *h;
    }
    match kind {
        TaskKind::Ner | TaskKind::Pico => Hyperparameters {
            lr: 5e-5,
            batch_size: 16,
            epochs: 25,
        },
        TaskKind::Relation(_) | TaskKind::Qa | TaskKind::MultiLabel => Hyperparameters {
            lr: 2e-5,
            batch_size: 32,
            epochs: 10,
        },
        TaskKind::Similarity => Hyperparameters {
            lr: 2e-5,
            batch_size: 16,
            epochs: 10,
        },
    }
}

/// Encoder with an attached head.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub encoder: BertModel,
    pub task: TaskSpec,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
const HEAD_STREAM: u64 = 0x4845_4144;

impl TaskModel {
    /// Adds a linear head with Gaussian(0, 0.02) weights and zero bias, replacing any existing one.
    pub fn new(mut encoder: BertModel, task: TaskSpec, seed: u64) -> Result<Self, FinetuneError> {
        task.validate()?;
        let (h, c) = (encoder.config.hidden, task.head_width());
        if c > 0 {
            let w = Initializer::new(derive_seed(seed, HEAD_STREAM), INIT_STD).gaussian(&[h, c]);
            attach(&mut encoder.params, HEAD_WEIGHT, w, true)?;
            attach(&mut encoder.params, HEAD_BIAS, Tensor::zeros(&[c]), false)?;
        }
        Ok(TaskModel { encoder, task })
    }

    pub fn task_path(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".task");
        PathBuf::from(s)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<(), FinetuneError> {
        self.encoder.save(checkpoint)?;
        std::fs::write(Self::task_path(checkpoint), self.task.to_kv().render())?;
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<Self, FinetuneError> {
        let text = std::fs::read_to_string(Self::task_path(checkpoint))?;
        let doc = KvDoc::parse(&text).map_err(|e| FinetuneError::InvalidTask(e.to_string()))?;
        let task = TaskSpec::from_kv(&doc)?;
        let mut encoder = BertModel::init(
            crate::model::ModelConfig::load(&crate::model::config_path(checkpoint))?,
            0,
        )?;
        let (h, c) = (encoder.config.hidden, task.head_width());
        if c > 0 {
            attach(&mut encoder.params, HEAD_WEIGHT, Tensor::zeros(&[h, c]), true)?;
            attach(&mut encoder.params, HEAD_BIAS, Tensor::zeros(&[c]), false)?;
        }
        let tensors = crate::numerics::load_tensors(checkpoint)?;
        crate::numerics::load_into(&mut encoder.params, tensors, false)?;
        Ok(TaskModel { encoder, task })
    }
}

fn attach(p: &mut ParameterStore, name: &str, value: Tensor, decay: bool) -> Result<(), NumericsError> {
    if p.contains(name) {
        p.replace(name, value)
    } else {
        p.insert(name, value, decay).map(|_| ())
    }
}

/// A framed input plus per-token targets for token tasks.
struct Prepared {
    framed: EncodedPair,
    token_targets: Vec<Option<usize>>,
    words_kept: usize,
    truncated: bool,
}

fn prepare(text_a: TokenizedText, text_b: TokenizedText, vocab: &Vocabulary, max_seq: usize) -> (EncodedPair, bool) {
    let total = text_a.len() + text_b.len();
    let framed = frame_pair(text_a, text_b, vocab, max_seq);
    let truncated = framed.kept.0 + framed.kept.1 < total;
    (framed, truncated)
}

fn prepare_tokens(
    words: &[String],
    tags: &[usize],
    vocab: &Vocabulary,
    max_seq: usize,
) -> Result<Prepared, FinetuneError> {
    let (framed, truncated) = prepare(encode_words(words, vocab), TokenizedText::default(), vocab, max_seq);
    let words_kept = framed.word_starts.iter().filter(|&&s| s).count();
    let token_targets = align_labels(&tags[..words_kept.min(tags.len())], &framed.word_starts)?;
    Ok(Prepared {
        framed,
        token_targets,
        words_kept,
        truncated,
    })
}

fn single(text: &str, vocab: &Vocabulary, max_seq: usize) -> (EncodedPair, bool) {
    prepare(encode(text, vocab), TokenizedText::default(), vocab, max_seq)
}

fn batch_of(framed: &[&EncodedPair], pad: usize) -> TokenBatch {
    let seqs: Vec<(&[usize], &[usize])> = framed.iter().map(|f| (&f.ids[..], &f.segment_ids[..])).collect();
    TokenBatch::from_sequences(&seqs, pad)
}

fn head(g: &mut Graph, p: &ParameterStore, x: Var) -> Result<Var, FinetuneError> {
    let w = g.param(p, HEAD_WEIGHT)?;
    let b = g.param(p, HEAD_BIAS)?;
    let y = g.matmul(x, w, false)?;
    Ok(g.add(y, b)?)
}

/// Rescaled cosine `2(cos + 1)` in `[0, 4]` between the mean-pooled embeddings of two
/// single-sentence batches.
fn similarity_scores(
    g: &mut Graph,
    model: &BertModel,
    vocab: &Vocabulary,
    a: &[&EncodedPair],
    b: &[&EncodedPair],
    mode: &ForwardMode,
) -> Result<Var, FinetuneError> {
    let pad = vocab.specials().pad;
    let embed_side = |g: &mut Graph, side: &[&EncodedPair]| -> Result<Var, FinetuneError> {
        let batch = batch_of(side, pad);
        let out = model.encode(g, &batch, mode)?;
        let mask = pooling_mask(&batch, |id| vocab.is_special(id));
        Ok(sentence_embedding(g, out.hidden_states, &mask)?)
    };
    let ea = embed_side(g, a)?;
    let eb = embed_side(g, b)?;
    let cos = g.row_cosine(ea, eb)?;
    Ok(g.affine(cos, 2.0, 2.0))
}

/// Forward pass producing either the loss (training) or the raw outputs (prediction).
struct Forward {
    loss: Option<Var>,
    out: Var,
    /// Per example, flat row indices into `out` for token tasks.
    token_rows: Vec<Vec<usize>>,
}

fn forward(
    g: &mut Graph,
    tm: &TaskModel,
    vocab: &Vocabulary,
    examples: &[&FinetuneExample],
    max_seq: usize,
    mode: &ForwardMode,
    with_loss: bool,
    truncations: &mut usize,
) -> Result<Forward, FinetuneError> {
    let pad = vocab.specials().pad;
    let model = &tm.encoder;
    let p = &model.params;
    match &tm.task {
        TaskSpec::TokenClassification(_) => {
            let prepared: Vec<Prepared> = examples
                .iter()
                .map(|e| match e {
                    FinetuneExample::Tokens { words, tags } => prepare_tokens(words, tags, vocab, max_seq),
                    _ => Err(FinetuneError::InvalidTask("token task needs word/tag examples".into())),
                })
                .collect::<Result<_, _>>()?;
            *truncations += prepared.iter().filter(|p| p.truncated).count();
            let framed: Vec<&EncodedPair> = prepared.iter().map(|p| &p.framed).collect();
            let batch = batch_of(&framed, pad);
            let enc = model.encode(g, &batch, mode)?;
            let flat = g.reshape(enc.hidden_states, &[batch.batch * batch.seq, model.config.hidden])?;
            let logits = head(g, p, flat)?;
            let mut targets = vec![None; batch.batch * batch.seq];
            let mut token_rows = Vec::with_capacity(prepared.len());
            for (b, pr) in prepared.iter().enumerate() {
                let mut rows = Vec::with_capacity(pr.words_kept);
                for (t, tgt) in pr.token_targets.iter().enumerate() {
                    targets[b * batch.seq + t] = *tgt;
                    if pr.framed.word_starts[t] {
                        rows.push(b * batch.seq + t);
                    }
                }
                token_rows.push(rows);
            }
            let loss = if with_loss {
                Some(g.cross_entropy(logits, &targets)?)
            } else {
                None
            };
            Ok(Forward {
                loss,
                out: logits,
                token_rows,
            })
        }
        TaskSpec::SequenceClassification(_) | TaskSpec::QaClassification(_) | TaskSpec::MultiLabel(_) => {
            let mut framed = Vec::with_capacity(examples.len());
            for e in examples {
                let (f, truncated) = match e {
                    FinetuneExample::Sequence { a, b, .. } => prepare(
                        encode(a, vocab),
                        b.as_deref().map(|b| encode(b, vocab)).unwrap_or_default(),
                        vocab,
                        max_seq,
                    ),
                    FinetuneExample::MultiLabel { text, .. } => single(text, vocab, max_seq),
                    _ => return Err(FinetuneError::InvalidTask("example does not match the task".into())),
                };
                *truncations += truncated as usize;
                framed.push(f);
            }
            let refs: Vec<&EncodedPair> = framed.iter().collect();
            let batch = batch_of(&refs, pad);
            let enc = model.encode(g, &batch, mode)?;
            let logits = head(g, p, enc.pooled)?;
            let loss = if !with_loss {
                None
            } else if let TaskSpec::MultiLabel(labels) = &tm.task {
                let mut t = Vec::with_capacity(examples.len() * labels.len());
                for e in examples {
                    if let FinetuneExample::MultiLabel { labels: ind, .. } = e {
                        t.extend(ind.iter().map(|&b| b as u8 as f64));
                    }
                }
                Some(g.bce_with_logits(logits, &Tensor::new(vec![examples.len(), labels.len()], t)?)?)
            } else {
                let t: Vec<Option<usize>> = examples
                    .iter()
                    .map(|e| match e {
                        FinetuneExample::Sequence { label, .. } => Some(*label),
                        _ => None,
                    })
                    .collect();
                Some(g.cross_entropy(logits, &t)?)
            };
            Ok(Forward {
                loss,
                out: logits,
                token_rows: vec![],
            })
        }
        TaskSpec::Similarity => {
            let mut fa = Vec::new();
            let mut fb = Vec::new();
            let mut scores = Vec::new();
            for e in examples {
                let FinetuneExample::Pair { a, b, score } = e else {
                    return Err(FinetuneError::InvalidTask("similarity needs sentence pairs".into()));
                };
                let (x, ta) = single(a, vocab, max_seq);
                let (y, tb) = single(b, vocab, max_seq);
                *truncations += ta as usize + tb as usize;
                fa.push(x);
                fb.push(y);
                scores.push(*score);
            }
            let ra: Vec<&EncodedPair> = fa.iter().collect();
            let rb: Vec<&EncodedPair> = fb.iter().collect();
            let pred = similarity_scores(g, model, vocab, &ra, &rb, mode)?;
            let loss = if with_loss {
                Some(g.mse(pred, &Tensor::vector(&scores))?)
            } else {
                None
            };
            Ok(Forward {
                loss,
                out: pred,
                token_rows: vec![],
            })
        }
    }
}

/// Task-typed predictions.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// Per example, one tag id per word.
    Tags(Vec<Vec<usize>>),
    Classes(Vec<usize>),
    LabelSets(Vec<Vec<bool>>),
    Scores(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRun {
    pub predictions: Predictions,
    /// Inputs cut to fit `max_seq`.
    pub truncated: usize,
}

const EVAL_BATCH: usize = 32;

/// Argmax tags (lowest id on ties), argmax classes, sigmoid > 0.5 label sets, or the
/// rescaled cosine. Words lost to truncation are tagged `O` (or tag 0 without an `O`).
pub fn predict(
    tm: &TaskModel,
    vocab: &Vocabulary,
    examples: &[FinetuneExample],
    max_seq: usize,
) -> Result<PredictionRun, FinetuneError> {
    let mut truncated = 0;
    let mut tags = Vec::new();
    let mut classes = Vec::new();
    let mut sets = Vec::new();
    let mut scores = Vec::new();
    let fill_tag = tm.task.label_id("O").unwrap_or(0);
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&FinetuneExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = forward(
            &mut g,
            tm,
            vocab,
            &refs,
            max_seq,
            &ForwardMode::eval(),
            false,
            &mut truncated,
        )?;
        let out = g.value(f.out);
        match &tm.task {
            TaskSpec::TokenClassification(_) => {
                for (rows, e) in f.token_rows.iter().zip(chunk) {
                    let FinetuneExample::Tokens { words, .. } = e else {
                        unreachable!()
                    };
                    let mut w: Vec<usize> = rows.iter().map(|&r| argmax(out.row(r))).collect();
                    w.resize(words.len(), fill_tag);
                    tags.push(w);
                }
            }
            TaskSpec::SequenceClassification(_) | TaskSpec::QaClassification(_) => {
                classes.extend((0..chunk.len()).map(|r| argmax(out.row(r))));
            }
            TaskSpec::MultiLabel(_) => {
                sets.extend((0..chunk.len()).map(|r| out.row(r).iter().map(|&z| z > 0.0).collect()));
            }
            TaskSpec::Similarity => scores.extend_from_slice(out.data()),
        }
    }
    let predictions = match &tm.task {
        TaskSpec::TokenClassification(_) => Predictions::Tags(tags),
        TaskSpec::SequenceClassification(_) | TaskSpec::QaClassification(_) => Predictions::Classes(classes),
        TaskSpec::MultiLabel(_) => Predictions::LabelSets(sets),
        TaskSpec::Similarity => Predictions::Scores(scores),
    };
    Ok(PredictionRun { predictions, truncated })
}

/// Scores predictions against the gold labels carried by `examples`.
///
/// Token tasks report exact-match entity precision/recall/f1 plus word-level macro F1;
/// classification tasks report micro/macro F1 and accuracy; similarity reports Pearson
/// (omitted when undefined).
pub fn score(
    task: &TaskSpec,
    examples: &[FinetuneExample],
    predictions: &Predictions,
) -> Result<MetricReport, FinetuneError> {
    let mismatch = || FinetuneError::InvalidTask("predictions do not match the task".into());
    match (task, predictions) {
        (TaskSpec::TokenClassification(labels), Predictions::Tags(pred)) => {
            let mut gold_spans = Vec::new();
            let mut pred_spans = Vec::new();
            let (mut gw, mut pw) = (Vec::new(), Vec::new());
            for (e, p) in examples.iter().zip(pred) {
                let FinetuneExample::Tokens { tags, .. } = e else {
                    return Err(mismatch());
                };
                let names = |ids: &[usize]| ids.iter().map(|&i| labels[i].as_str()).collect::<Vec<_>>();
                gold_spans.push(decode_bio(&names(tags)));
                pred_spans.push(decode_bio(&names(p)));
                gw.extend_from_slice(tags);
                pw.extend_from_slice(p);
            }
            let mut report = entity_f1(&gold_spans, &pred_spans)?;
            let words = classification_scores(&gw, &pw, labels.len())?;
            report.set("macro_f1", words.get("macro_f1").unwrap_or(0.0));
            Ok(report)
        }
        (TaskSpec::SequenceClassification(labels) | TaskSpec::QaClassification(labels), Predictions::Classes(pred)) => {
            let gold: Vec<usize> = examples
                .iter()
                .map(|e| match e {
                    FinetuneExample::Sequence { label, .. } => Ok(*label),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_, _>>()?;
            Ok(classification_scores(&gold, pred, labels.len())?)
        }
        (TaskSpec::MultiLabel(_), Predictions::LabelSets(pred)) => {
            let gold: Vec<Vec<bool>> = examples
                .iter()
                .map(|e| match e {
                    FinetuneExample::MultiLabel { labels, .. } => Ok(labels.clone()),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_, _>>()?;
            Ok(multilabel_scores(&gold, pred)?)
        }
        (TaskSpec::Similarity, Predictions::Scores(pred)) => {
            let gold: Vec<f64> = examples
                .iter()
                .map(|e| match e {
                    FinetuneExample::Pair { score, .. } => Ok(*score),
                    _ => Err(mismatch()),
                })
                .collect::<Result<_, _>>()?;
            let mut report = MetricReport {
                n_examples: gold.len(),
                ..MetricReport::default()
            };
            match pearson(&gold, pred) {
                Ok(r) => report.set("pearson", r),
                Err(MetricsError::UndefinedCorrelation(_)) => {}
                Err(e) => return Err(e.into()),
            }
            Ok(report)
        }
        _ => Err(mismatch()),
    }
}

pub fn evaluate(
    tm: &TaskModel,
    vocab: &Vocabulary,
    examples: &[FinetuneExample],
    max_seq: usize,
) -> Result<MetricReport, FinetuneError> {
    let run = predict(tm, vocab, examples, max_seq)?;
    score(&tm.task, examples, &run.predictions)
}

fn check_examples(task: &TaskSpec, examples: &[FinetuneExample]) -> Result<(), FinetuneError> {
    let n = task.head_width();
    for (index, e) in examples.iter().enumerate() {
        let bad = |message: String| Err(FinetuneError::BadExample { index, message });
        match (task, e) {
            (TaskSpec::TokenClassification(_), FinetuneExample::Tokens { words, tags }) => {
                if words.len() != tags.len() {
                    return bad(format!("{} words but {} tags", words.len(), tags.len()));
                }
                if words.is_empty() {
                    return bad("empty sentence".into());
                }
                if let Some(t) = tags.iter().find(|&&t| t >= n) {
                    return bad(format!("tag id {t} outside the tag set"));
                }
            }
            (
                TaskSpec::SequenceClassification(_) | TaskSpec::QaClassification(_),
                FinetuneExample::Sequence { label, .. },
            ) => {
                if *label >= n {
                    return bad(format!("label id {label} outside the label set"));
                }
            }
            (TaskSpec::MultiLabel(_), FinetuneExample::MultiLabel { labels, .. }) => {
                if labels.len() != n {
                    return bad(format!("{} indicators for {n} labels", labels.len()));
                }
            }
            (TaskSpec::Similarity, FinetuneExample::Pair { score, .. }) => {
                if !score.is_finite() {
                    return bad("non-finite score".into());
                }
            }
            _ => return bad(format!("example does not fit a {} task", task.kind_name())),
        }
    }
    Ok(())
}

/// Mean training loss and evaluation metrics after an epoch (epoch 0 is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub metrics: MetricReport,
}

pub fn render_metric_trace(trace: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        let _ = write!(out, "{}\t", r.epoch);
        match r.train_loss {
            Some(l) => {
                let _ = write!(out, "{l}");
            }
            None => out.push('-'),
        }
        for (k, v) in &r.metrics.values {
            let _ = write!(out, "\t{k}={v:.6}");
        }
        out.push('\n');
    }
    out
}

pub struct FinetuneRun {
    pub model: TaskModel,
    pub trace: Vec<EpochRecord>,
    pub truncated: usize,
}

/// Trains encoder and head with Adam at a constant rate, shuffling each epoch.
///
/// Metrics are computed on `validation`, or on `train` when `validation` is empty.
pub fn finetune(
    encoder: BertModel,
    task: TaskSpec,
    train: &[FinetuneExample],
    validation: &[FinetuneExample],
    vocab: &Vocabulary,
    config: &FinetuneConfig,
) -> Result<FinetuneRun, FinetuneError> {
    config.validate()?;
    if config.max_seq > encoder.config.max_seq {
        return Err(FinetuneError::InvalidConfig(format!(
            "max_seq {} exceeds the checkpoint's {}",
            config.max_seq, encoder.config.max_seq
        )));
    }
    if encoder.config.vocab_size != vocab.len() {
        return Err(FinetuneError::InvalidConfig(format!(
            "checkpoint vocab_size {} does not match vocabulary size {}",
            encoder.config.vocab_size,
            vocab.len()
        )));
    }
    check_examples(&task, train)?;
    check_examples(&task, validation)?;
    let eval_set = if validation.is_empty() { train } else { validation };

    let mut tm = TaskModel::new(encoder, task, config.seed)?;
    let adam = AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(adam, &tm.encoder.params);
    let mut truncated = 0;
    let mut trace = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        metrics: evaluate(&tm, vocab, eval_set, config.max_seq)?,
    }];
    let frozen = matches!(tm.task, TaskSpec::Similarity) && !config.train_similarity;

    for epoch in 1..=config.epochs {
        let epoch_seed = derive_seed(config.seed, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        if !frozen {
            for (bi, idx) in order.chunks(config.batch_size).enumerate() {
                let refs: Vec<&FinetuneExample> = idx.iter().map(|&i| &train[i]).collect();
                let mut g = Graph::new();
                let mode = ForwardMode::train(derive_seed(epoch_seed, bi as u64));
                let f = forward(&mut g, &tm, vocab, &refs, config.max_seq, &mode, true, &mut truncated)?;
                let loss = f.loss.expect("training forward returns a loss");
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(FinetuneError::NonFinite { epoch, batch: bi });
                }
                g.backward(loss, &mut tm.encoder.params)?;
                adam_step(&mut tm.encoder.params, &mut state, 1.0);
                loss_sum += value;
                batches += 1;
            }
        }
        trace.push(EpochRecord {
            epoch,
            train_loss: (batches > 0).then(|| loss_sum / batches as f64),
            metrics: evaluate(&tm, vocab, eval_set, config.max_seq)?,
        });
    }
    Ok(FinetuneRun {
        model: tm,
        trace,
        truncated,
    })
}

/// Writes predictions in the per-task file layouts.
pub fn render_predictions(
    task: &TaskSpec,
    examples: &[FinetuneExample],
    predictions: &Predictions,
) -> Result<String, FinetuneError> {
    let mismatch = || FinetuneError::InvalidTask("predictions do not match the task".into());
    let labels = task.labels();
    let mut out = String::new();
    if !labels.is_empty() {
        let _ = writeln!(out, "{PREDICTION_LABELS_HEADER} {}", labels.join(","));
    }
    match predictions {
        Predictions::Tags(pred) => {
            for (e, p) in examples.iter().zip(pred) {
                let FinetuneExample::Tokens { words, tags } = e else {
                    return Err(mismatch());
                };
                for ((w, g), p) in words.iter().zip(tags).zip(p) {
                    let _ = writeln!(out, "{w}\t{}\t{}", labels[*g], labels[*p]);
                }
                out.push('\n');
            }
        }
        Predictions::Classes(pred) => {
            for (i, (e, p)) in examples.iter().zip(pred).enumerate() {
                let FinetuneExample::Sequence { label, .. } = e else {
                    return Err(mismatch());
                };
                let _ = writeln!(out, "{i}\t{}\t{}", labels[*label], labels[*p]);
            }
        }
        Predictions::LabelSets(pred) => {
            let join = |ind: &[bool]| {
                ind.iter()
                    .zip(labels)
                    .filter(|(b, _)| **b)
                    .map(|(_, l)| l.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            for (i, (e, p)) in examples.iter().zip(pred).enumerate() {
                let FinetuneExample::MultiLabel { labels: g, .. } = e else {
                    return Err(mismatch());
                };
                let _ = writeln!(out, "{i}\t{}\t{}", join(g), join(p));
            }
        }
        Predictions::Scores(pred) => {
            for (i, (e, p)) in examples.iter().zip(pred).enumerate() {
                let FinetuneExample::Pair { score, .. } = e else {
                    return Err(mismatch());
                };
                let _ = writeln!(out, "{i}\t{score}\t{p}");
            }
        }
    }
    Ok(out)
}

/// First line of a prediction file for labelled tasks.
pub const PREDICTION_LABELS_HEADER: &str = "# labels:";

/// The label set declared in a prediction file's header, if any.
pub fn prediction_file_labels(text: &str) -> Option<Vec<String>> {
    let rest = text.lines().next()?.strip_prefix(PREDICTION_LABELS_HEADER)?;
    Some(
        rest.split(',')
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
    )
}

/// Reads a prediction file back into gold and predicted values, then scores it.
pub fn score_prediction_file(task: &TaskSpec, text: &str) -> Result<MetricReport, FinetuneError> {
    let text = match prediction_file_labels(text) {
        Some(_) => text.split_once('\n').map_or("", |(_, rest)| rest),
        None => text,
    };
    let bad = |line: usize| FinetuneError::InvalidTask(format!("prediction file line {line}: unexpected layout"));
    match task {
        TaskSpec::TokenClassification(_) => {
            let (mut examples, mut preds) = (Vec::new(), Vec::new());
            let (mut words, mut gold, mut pred) = (Vec::new(), Vec::new(), Vec::new());
            let mut flush = |w: &mut Vec<String>, g: &mut Vec<usize>, p: &mut Vec<usize>| {
                if !w.is_empty() {
                    examples.push(FinetuneExample::Tokens {
                        words: std::mem::take(w),
                        tags: std::mem::take(g),
                    });
                    preds.push(std::mem::take(p));
                }
            };
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    flush(&mut words, &mut gold, &mut pred);
                    continue;
                }
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(bad(n + 1));
                }
                words.push(f[0].to_string());
                gold.push(task.label_id(f[1])?);
                pred.push(task.label_id(f[2])?);
            }
            flush(&mut words, &mut gold, &mut pred);
            score(task, &examples, &Predictions::Tags(preds))
        }
        _ => {
            let mut examples = Vec::new();
            let mut classes = Vec::new();
            let mut sets = Vec::new();
            let mut scores = Vec::new();
            let set = |s: &str| -> Result<Vec<bool>, FinetuneError> {
                let mut ind = vec![false; task.head_width()];
                for l in s.split(',').filter(|l| !l.is_empty()) {
                    ind[task.label_id(l)?] = true;
                }
                Ok(ind)
            };
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(bad(n + 1));
                }
                match task {
                    TaskSpec::Similarity => {
                        let g: f64 = f[1].parse().map_err(|_| bad(n + 1))?;
                        scores.push(f[2].parse().map_err(|_| bad(n + 1))?);
                        examples.push(FinetuneExample::Pair {
                            a: String::new(),
                            b: String::new(),
                            score: g,
                        });
                    }
                    TaskSpec::MultiLabel(_) => {
                        examples.push(FinetuneExample::MultiLabel {
                            text: String::new(),
                            labels: set(f[1])?,
                        });
                        sets.push(set(f[2])?);
                    }
                    _ => {
                        examples.push(FinetuneExample::Sequence {
                            a: String::new(),
                            b: None,
                            label: task.label_id(f[1])?,
                        });
                        classes.push(task.label_id(f[2])?);
                    }
                }
            }
            let p = match task {
                TaskSpec::Similarity => Predictions::Scores(scores),
                TaskSpec::MultiLabel(_) => Predictions::LabelSets(sets),
                _ => Predictions::Classes(classes),
            };
            score(task, &examples, &p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_bio_examples() {
        assert_eq!(decode_bio(&["B-Chem", "I-Chem", "O"]), vec![Span::new(0, 1, "Chem")]);
        assert!(decode_bio(&["O", "O"]).is_empty());
        assert_eq!(
            decode_bio(&["B-A", "I-B"]),
            vec![Span::new(0, 0, "A"), Span::new(1, 1, "B")]
        );
        assert_eq!(
            decode_bio(&["I-A", "I-A", "B-A"]),
            vec![Span::new(0, 1, "A"), Span::new(2, 2, "A")]
        );
    }

    #[test]
    fn align_first_subword() {
        let a = align_labels(&[3, 1], &[false, true, false, true, false]).unwrap();
        assert_eq!(a, vec![None, Some(3), None, Some(1), None]);
        assert!(align_labels(&[1, 2, 3], &[true, true]).is_err());
    }

    #[test]
    fn override_table() {
        assert_eq!(hyperparameters_for("JNLPBA", TaskKind::Ner).lr, 1e-5);
        assert_eq!(hyperparameters_for("ncbi-disease", TaskKind::Ner).lr, 5e-5);
        let c = hyperparameters_for(
            "chemprot",
            TaskKind::Relation(crate::datasets::RelationFamily::GeneChemical),
        );
        assert_eq!((c.batch_size, c.epochs), (32, 10));
    }

    #[test]
    fn config_bounds() {
        let ok = FinetuneConfig::default();
        assert!(ok.validate().is_ok());
        assert!(FinetuneConfig {
            batch_size: 8,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(FinetuneConfig {
            epochs: 101,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(FinetuneConfig { lr: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn task_spec_validation() {
        assert!(TaskSpec::SequenceClassification(vec![]).validate().is_err());
        assert!(TaskSpec::MultiLabel(vec!["a".into(), "a".into()]).validate().is_err());
        let t = TaskSpec::QaClassification(vec!["maybe".into(), "no".into(), "yes".into()]);
        assert_eq!(TaskSpec::from_kv(&t.to_kv()).unwrap(), t);
    }
}
