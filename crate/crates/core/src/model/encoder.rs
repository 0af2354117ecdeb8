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

use std::cell::Cell;
use std::path::Path;

use super::{ModelConfig, ModelError};
use crate::numerics::{load_into, load_tensors, save_store, Graph, Initializer, ParameterStore, Tensor, Var};
use crate::seeds::derive_seed;

pub const INIT_STD: f64 = 0.02;

/// Padded batch of token sequences, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// Pads `(ids, segments)` sequences to the longest one with `pad_id`.
    pub fn from_sequences(seqs: &[(&[usize], &[usize])], pad_id: usize) -> Self {
        let seq = seqs.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        let batch = seqs.len();
        let mut ids = vec![pad_id; batch * seq];
        let mut segments = vec![0; batch * seq];
        let mut mask = vec![false; batch * seq];
        for (b, (s_ids, s_seg)) in seqs.iter().enumerate() {
            for t in 0..s_ids.len() {
                ids[b * seq + t] = s_ids[t];
                segments[b * seq + t] = s_seg[t];
                mask[b * seq + t] = true;
            }
        }
        TokenBatch {
            ids,
            segments,
            mask,
            batch,
            seq,
        }
    }

    pub fn mask_rows(&self) -> Vec<Vec<bool>> {
        self.mask.chunks(self.seq.max(1)).map(<[bool]>::to_vec).collect()
    }
}

/// Dropout switch plus a per-call seed stream.
pub struct ForwardMode {
    train: bool,
    seed: u64,
    counter: Cell<u64>,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode {
            train: false,
            seed: 0,
            counter: Cell::new(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardMode {
            train: true,
            seed,
            counter: Cell::new(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn next_seed(&self) -> u64 {
        let c = self.counter.get();
        self.counter.set(c + 1);
        derive_seed(self.seed, c)
    }
}

/// Encoder activations.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, T, H]`
    pub hidden_states: Var,
    /// `[B, H]`, tanh projection of the `[CLS]` state.
    pub pooled: Var,
    /// Per layer, `[B, A, T, T]` attention weights.
    pub attentions: Vec<Var>,
}

/// Encoder parameters and their configuration.
#[derive(Debug, Clone)]
pub struct BertModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl BertModel {
    /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (v, h, i) = (config.vocab_size, config.hidden, config.intermediate);
        let mut init = Initializer::new(seed, INIT_STD);
        let mut p = ParameterStore::new();
        let mut weight = |p: &mut ParameterStore, name: String, shape: &[usize]| {
            p.insert(name, init.gaussian(shape), true).map(|_| ())
        };
        fn bias(p: &mut ParameterStore, name: String, n: usize) -> Result<(), crate::numerics::NumericsError> {
            p.insert(name, Tensor::zeros(&[n]), false).map(|_| ())
        }
        fn norm(p: &mut ParameterStore, prefix: &str, n: usize) -> Result<(), crate::numerics::NumericsError> {
            p.insert(format!("{prefix}.gamma"), Tensor::full(&[n], 1.0), false)?;
            p.insert(format!("{prefix}.beta"), Tensor::zeros(&[n]), false)?;
            Ok(())
        }

        weight(&mut p, "embeddings.word".into(), &[v, h])?;
        weight(&mut p, "embeddings.position".into(), &[config.max_seq, h])?;
        weight(&mut p, "embeddings.segment".into(), &[config.type_vocab, h])?;
        norm(&mut p, "embeddings.ln", h)?;
        for l in 0..config.layers {
            for part in ["query", "key", "value", "output"] {
                weight(&mut p, format!("layer.{l}.attention.{part}.weight"), &[h, h])?;
                bias(&mut p, format!("layer.{l}.attention.{part}.bias"), h)?;
            }
            norm(&mut p, &format!("layer.{l}.attention.ln"), h)?;
            weight(&mut p, format!("layer.{l}.ffn.in.weight"), &[h, i])?;
            bias(&mut p, format!("layer.{l}.ffn.in.bias"), i)?;
            weight(&mut p, format!("layer.{l}.ffn.out.weight"), &[i, h])?;
            bias(&mut p, format!("layer.{l}.ffn.out.bias"), h)?;
            norm(&mut p, &format!("layer.{l}.ffn.ln"), h)?;
        }
        weight(&mut p, "pooler.weight".into(), &[h, h])?;
        bias(&mut p, "pooler.bias".into(), h)?;
        weight(&mut p, "mlm.transform.weight".into(), &[h, h])?;
        bias(&mut p, "mlm.transform.bias".into(), h)?;
        norm(&mut p, "mlm.ln", h)?;
        bias(&mut p, "mlm.bias".into(), v)?;
        weight(&mut p, "nsp.weight".into(), &[h, 2])?;
        bias(&mut p, "nsp.bias".into(), 2)?;
        Ok(BertModel { config, params: p })
    }

    /// Writes the checkpoint and `<path>.config` beside it.
    pub fn save(&self, checkpoint: &Path) -> Result<(), ModelError> {
        save_store(&self.params, checkpoint)?;
        self.config.save(&config_path(checkpoint))?;
        Ok(())
    }

    /// Loads encoder parameters; tensors for extra heads in the file are skipped.
    pub fn load(checkpoint: &Path) -> Result<Self, ModelError> {
        let config = ModelConfig::load(&config_path(checkpoint))?;
        let mut model = BertModel::init(config, 0)?;
        load_into(&mut model.params, load_tensors(checkpoint)?, true)?;
        Ok(model)
    }

    pub fn embed(&self, g: &mut Graph, batch: &TokenBatch, mode: &ForwardMode) -> Result<Var, ModelError> {
        embed(g, &self.params, &self.config, batch, mode)
    }

    pub fn encode(&self, g: &mut Graph, batch: &TokenBatch, mode: &ForwardMode) -> Result<EncoderOutput, ModelError> {
        let x = embed(g, &self.params, &self.config, batch, mode)?;
        encoder_forward(g, &self.params, &self.config, x, &batch.mask_rows(), mode)
    }
}

pub fn config_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config");
    s.into()
}

fn layer_norm(g: &mut Graph, p: &ParameterStore, x: Var, prefix: &str) -> Result<Var, ModelError> {
    let gamma = g.param(p, &format!("{prefix}.gamma"))?;
    let beta = g.param(p, &format!("{prefix}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

fn dense(g: &mut Graph, p: &ParameterStore, x: Var, prefix: &str) -> Result<Var, ModelError> {
    let w = g.param(p, &format!("{prefix}.weight"))?;
    let b = g.param(p, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w, false)?;
    Ok(g.add(y, b)?)
}

/// Token + position + segment embeddings, then layer norm and dropout.
pub fn embed(
    g: &mut Graph,
    p: &ParameterStore,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    mode: &ForwardMode,
) -> Result<Var, ModelError> {
    let (b, t) = (batch.batch, batch.seq);
    if b == 0 || t == 0 {
        return Err(ModelError::InvalidInput("empty batch".into()));
    }
    if t > cfg.max_seq {
        return Err(ModelError::InvalidInput(format!(
            "sequence length {t} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(ModelError::InvalidInput(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    if let Some(&bad) = batch.segments.iter().find(|&&s| s >= cfg.type_vocab) {
        return Err(ModelError::InvalidInput(format!("segment id {bad} out of range")));
    }
    let word = g.param(p, "embeddings.word")?;
    let pos_table = g.param(p, "embeddings.position")?;
    let seg_table = g.param(p, "embeddings.segment")?;
    let tok = g.embedding(word, &batch.ids, &[b, t])?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.embedding(pos_table, &positions, &[t])?;
    let seg = g.embedding(seg_table, &batch.segments, &[b, t])?;
    let x = g.add(tok, pos)?;
    let x = g.add(x, seg)?;
    let x = layer_norm(g, p, x, "embeddings.ln")?;
    Ok(g.dropout(x, cfg.dropout, mode.is_train(), mode.next_seed())?)
}

/// Stacked self-attention layers over `embedded[B, T, H]`.
pub fn encoder_forward(
    g: &mut Graph,
    p: &ParameterStore,
    cfg: &ModelConfig,
    embedded: Var,
    attention_mask: &[Vec<bool>],
    mode: &ForwardMode,
) -> Result<EncoderOutput, ModelError> {
    let shape = g.shape(embedded).to_vec();
    if shape.len() != 3 || shape[2] != cfg.hidden || attention_mask.len() != shape[0] {
        return Err(ModelError::InvalidInput(format!(
            "encoder input {shape:?} with {} mask rows",
            attention_mask.len()
        )));
    }
    if let Some(row) = attention_mask.iter().position(|m| !m.iter().any(|&x| x)) {
        return Err(ModelError::InvalidInput(format!(
            "attention mask row {row} is fully masked"
        )));
    }
    let (b, t) = (shape[0], shape[1]);
    let heads = cfg.heads;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut x = embedded;
    let mut attentions = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let pre = format!("layer.{l}.attention");
        let q = dense(g, p, x, &format!("{pre}.query"))?;
        let k = dense(g, p, x, &format!("{pre}.key"))?;
        let v = dense(g, p, x, &format!("{pre}.value"))?;
        let q = g.split_heads(q, heads)?;
        let k = g.split_heads(k, heads)?;
        let v = g.split_heads(v, heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.affine(scores, scale, 0.0);
        let probs = g.masked_softmax(scores, attention_mask)?;
        attentions.push(probs);
        let probs_d = g.dropout(probs, cfg.dropout, mode.is_train(), mode.next_seed())?;
        let ctx = g.batch_matmul(probs_d, v, false)?;
        let ctx = g.merge_heads(ctx)?;
        let attn_out = dense(g, p, ctx, &format!("{pre}.output"))?;
        let attn_out = g.dropout(attn_out, cfg.dropout, mode.is_train(), mode.next_seed())?;
        let res = g.add(x, attn_out)?;
        let x1 = layer_norm(g, p, res, &format!("{pre}.ln"))?;

        let ff = dense(g, p, x1, &format!("layer.{l}.ffn.in"))?;
        let ff = g.gelu(ff);
        let ff = dense(g, p, ff, &format!("layer.{l}.ffn.out"))?;
        let ff = g.dropout(ff, cfg.dropout, mode.is_train(), mode.next_seed())?;
        let res = g.add(x1, ff)?;
        x = layer_norm(g, p, res, &format!("layer.{l}.ffn.ln"))?;
    }
    let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
    let cls = g.gather_rows(x, &cls_rows)?;
    let pooled = dense(g, p, cls, "pooler")?;
    let pooled = g.tanh(pooled);
    Ok(EncoderOutput {
        hidden_states: x,
        pooled,
        attentions,
    })
}

/// Dense + GELU + layer norm, then projection onto the (tied) token embeddings plus bias.
/// Works on any `[.., H]` input, giving `[.., V]`.
pub fn mlm_logits(g: &mut Graph, p: &ParameterStore, hidden: Var) -> Result<Var, ModelError> {
    let h = dense(g, p, hidden, "mlm.transform")?;
    let h = g.gelu(h);
    let h = layer_norm(g, p, h, "mlm.ln")?;
    let word = g.param(p, "embeddings.word")?;
    let logits = g.matmul(h, word, true)?;
    let bias = g.param(p, "mlm.bias")?;
    Ok(g.add(logits, bias)?)
}

/// MLM logits restricted to flat positions `rows` of `hidden[B, T, H]`, giving `[k, V]`.
pub fn mlm_logits_at(g: &mut Graph, p: &ParameterStore, hidden: Var, rows: &[usize]) -> Result<Var, ModelError> {
    let selected = g.gather_rows(hidden, rows)?;
    mlm_logits(g, p, selected)
}

/// `[B, H]` to `[B, 2]` (index 0 = IsNext, 1 = NotNext).
pub fn nsp_logits(g: &mut Graph, p: &ParameterStore, pooled: Var) -> Result<Var, ModelError> {
    dense(g, p, pooled, "nsp")
}

/// Mean of `hidden[B, T, H]` over the positions selected by `mask[B][T]`.
pub fn sentence_embedding(g: &mut Graph, hidden: Var, mask: &[Vec<bool>]) -> Result<Var, ModelError> {
    Ok(g.masked_mean(hidden, mask)?)
}

/// Positions that are attended to and are not special tokens.
pub fn pooling_mask(batch: &TokenBatch, is_special: impl Fn(usize) -> bool) -> Vec<Vec<bool>> {
    batch
        .ids
        .chunks(batch.seq.max(1))
        .zip(batch.mask.chunks(batch.seq.max(1)))
        .map(|(ids, m)| ids.iter().zip(m).map(|(&id, &on)| on && !is_special(id)).collect())
        .collect()
}
