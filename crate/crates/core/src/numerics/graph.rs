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

//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in reverse
//! and accumulates parameter gradients into the [`ParameterStore`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gelu, gelu_grad, gemm, sigmoid, softmax_row, MatRef};
use super::{NumericsError, ParamId, ParameterStore, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    MaskedMean {
        x: Var,
        weights: Vec<f64>,
    },
    RowCosine {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf. Repeated requests for the same parameter share a node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, NumericsError> {
        let id = store.id(name)?;
        Ok(self.param_by_id(store, id))
    }

    pub fn param_by_id(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// `a[.., K] · b[K, N]`, or `a[.., K] · b[N, K]ᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 1 || bv.rank() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let k = av.last_dim();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        let bm = MatRef::new(bv.data(), bv.shape()[0], bv.shape()[1]);
        gemm(
            MatRef::new(av.data(), m, k),
            if trans_b { bm.t() } else { bm },
            &mut out,
            0.0,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }, needs))
    }

    /// Batched product of `[n, m, k]` with `[n, k, p]` (or `[n, p, k]ᵀ`).
    /// Leading axes beyond the last two are flattened into the batch.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || {
            shape_err(
                "batch_matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            )
        };
        if av.rank() < 3 || av.rank() != bv.rank() {
            return Err(err());
        }
        let r = av.rank();
        if av.shape()[..r - 2] != bv.shape()[..r - 2] {
            return Err(err());
        }
        let batch: usize = av.shape()[..r - 2].iter().product();
        let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
        let (b0, b1) = (bv.shape()[r - 2], bv.shape()[r - 1]);
        let (bk, p) = if trans_b { (b1, b0) } else { (b0, b1) };
        if bk != k {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * p];
        for i in 0..batch {
            let am = MatRef::new(&av.data()[i * m * k..(i + 1) * m * k], m, k);
            let bm = MatRef::new(&bv.data()[i * b0 * b1..(i + 1) * b0 * b1], b0, b1);
            gemm(
                am,
                if trans_b { bm.t() } else { bm },
                &mut out[i * m * p..(i + 1) * m * p],
                0.0,
            );
        }
        let mut shape = av.shape().to_vec();
        shape[r - 1] = p;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchMatMul { a, b, trans_b }, needs))
    }

    /// Elementwise sum. `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, rb) = (av.rank(), bv.rank());
        if rb > ra || av.shape()[ra - rb..] != *bv.shape() || bv.is_empty() {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let inner = bv.len();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let needs = self.ng(x);
        self.push(out, Op::Affine { x, scale }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let needs = self.ng(x);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let needs = self.ng(x);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.ng(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            softmax_row(out.row_mut(i), None);
        }
        let needs = self.ng(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Attention softmax over the last axis of `scores[B, ..., Tq, Tk]`.
    /// Keys with `key_mask[b][k] == false` receive exactly zero weight.
    pub fn masked_softmax(&mut self, scores: Var, key_mask: &[Vec<bool>]) -> Result<Var, NumericsError> {
        let sv = self.value(scores);
        let batch = key_mask.len();
        let tk = sv.last_dim();
        if sv.rank() < 2 || sv.shape()[0] != batch || key_mask.iter().any(|m| m.len() != tk) {
            return Err(shape_err(
                "masked_softmax",
                format!(
                    "scores {:?} with mask {}x{}",
                    sv.shape(),
                    batch,
                    key_mask.first().map_or(0, Vec::len)
                ),
            ));
        }
        if let Some(b) = key_mask.iter().position(|m| !m.iter().any(|&k| k)) {
            return Err(NumericsError::InvalidArgument(format!(
                "attention mask row {b} has no unmasked position"
            )));
        }
        let mut out = sv.clone();
        let rows_per_batch = out.rows() / batch;
        for i in 0..out.rows() {
            softmax_row(out.row_mut(i), Some(&key_mask[i / rows_per_batch]));
        }
        let needs = self.ng(scores);
        Ok(self.push(out, Op::MaskedSoftmax(scores), needs))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let h = xv.last_dim();
        if gv.shape() != [h] || bv.shape() != [h] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut x_hat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..h {
                let xh = (row[j] - mean) * inv;
                x_hat[r * h + j] = xh;
                out[r * h + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            needs,
        ))
    }

    /// Rows of `table[V, H]` selected by `ids`, shaped `out_shape + [H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        if tv.rank() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err(
                "embedding",
                format!("table {:?}, {} ids into {:?}", tv.shape(), ids.len(), out_shape),
            ));
        }
        let (v, h) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::InvalidArgument(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let mut shape = out_shape.to_vec();
        shape.push(h);
        let needs = self.ng(table);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`; result is `[k, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let n = xv.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} of {:?}", xv.shape())));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            needs,
        ))
    }

    /// Mean token cross-entropy of `logits[.., V]`; `None` targets are ignored.
    /// Returns 0 when every target is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(NumericsError::InvalidArgument(format!(
                "cross_entropy target {bad} out of range for {v} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            softmax_row(row, None);
            if let Some(t) = t {
                // log p computed from the logits for accuracy.
                let logits_row = lv.row(r);
                let max = logits_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits_row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - logits_row[*t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy taking raw logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() || lv.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        let n = lv.len() as f64;
        let loss = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy of probabilities in (0, 1).
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var, NumericsError> {
        let pv = self.value(probs);
        if pv.shape() != targets.shape() || pv.is_empty() {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("{:?} vs {:?}", pv.shape(), targets.shape()),
            ));
        }
        if pv.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(NumericsError::InvalidArgument(
                "binary_cross_entropy needs probabilities strictly inside (0, 1)".into(),
            ));
        }
        let n = pv.len() as f64;
        let loss = -pv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            .sum::<f64>()
            / n;
        let needs = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.data().to_vec(),
            },
            needs,
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument(format!("dropout probability {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// `[B, T, H]` to `[B, A, T, H/A]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.rank() != 3 || heads == 0 || xv.shape()[2] % heads != 0 {
            return Err(shape_err("split_heads", format!("{:?} into {heads} heads", xv.shape())));
        }
        let (b, t, h) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let d = h / heads;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for a in 0..heads {
                    let src = (bi * t + ti) * h + a * d;
                    let dst = ((bi * heads + a) * t + ti) * d;
                    out[dst..dst + d].copy_from_slice(&xv.data()[src..src + d]);
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![b, heads, t, d], out)?,
            Op::SplitHeads { x, heads },
            needs,
        ))
    }

    /// `[B, A, T, D]` to `[B, T, A·D]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(shape_err("merge_heads", format!("{:?}", xv.shape())));
        }
        let (b, heads, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let h = heads * d;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for a in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + a) * t + ti) * d;
                    let dst = (bi * t + ti) * h + a * d;
                    out[dst..dst + d].copy_from_slice(&xv.data()[src..src + d]);
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(vec![b, t, h], out)?, Op::MergeHeads { x, heads }, needs))
    }

    /// Weighted mean over the time axis of `x[B, T, H]`; each row of
    /// `mask[B][T]` selects the positions to average.
    pub fn masked_mean(&mut self, x: Var, mask: &[Vec<bool>]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[0] != mask.len() || mask.iter().any(|m| m.len() != xv.shape()[1]) {
            return Err(shape_err(
                "masked_mean",
                format!("{:?} with mask of {} rows", xv.shape(), mask.len()),
            ));
        }
        let (b, t, h) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut weights = vec![0.0; b * t];
        for (bi, row) in mask.iter().enumerate() {
            let n = row.iter().filter(|&&m| m).count();
            if n == 0 {
                return Err(NumericsError::InvalidArgument(format!(
                    "pooling mask row {bi} selects no position"
                )));
            }
            for (ti, &m) in row.iter().enumerate() {
                if m {
                    weights[bi * t + ti] = 1.0 / n as f64;
                }
            }
        }
        let mut out = vec![0.0; b * h];
        for bi in 0..b {
            let n = mask[bi].iter().filter(|&&m| m).count() as f64;
            for ti in 0..t {
                if !mask[bi][ti] {
                    continue;
                }
                let src = &xv.data()[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                for (o, &v) in out[bi * h..(bi + 1) * h].iter_mut().zip(src) {
                    *o += v;
                }
            }
            out[bi * h..(bi + 1) * h].iter_mut().for_each(|o| *o /= n);
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(vec![b, h], out)?, Op::MaskedMean { x, weights }, needs))
    }

    /// Cosine similarity of matching rows of two `[N, H]` tensors, giving `[N]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rank() != 2 {
            return Err(shape_err("row_cosine", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let (x, y) = (av.row(r), bv.row(r));
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(NumericsError::InvalidArgument(format!("zero vector in cosine row {r}")));
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            out.push(dot / (nx * ny));
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::vector(&out), Op::RowCosine { a, b }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len().max(1) as f64;
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, NumericsError> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.is_empty() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / pv.len() as f64;
        let needs = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Propagates d(loss)/d(node) backwards and adds parameter gradients to `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<(), NumericsError> {
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(NumericsError::NoGraph);
        };
        if root.value.len() != 1 {
            return Err(NumericsError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.needs_grad {
            return Err(NumericsError::NoGraph);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParameterStore) {
        let mut send = |v: Var, t: Tensor, nodes: &[Node]| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let k = av.last_dim();
                let m = av.rows();
                let n = g.last_dim();
                let gm = MatRef::new(gd, m, n);
                let bm = MatRef::new(bv.data(), bv.shape()[0], bv.shape()[1]);
                if nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    // C = A·B  => dA = dC·Bᵀ ; C = A·Bᵀ => dA = dC·B
                    gemm(gm, if *trans_b { bm } else { bm.t() }, &mut da, 0.0);
                    send(*a, Tensor::new(av.shape().to_vec(), da).unwrap(), nodes);
                }
                if nodes[b.0].needs_grad {
                    let am = MatRef::new(av.data(), m, k);
                    let mut db = vec![0.0; bv.len()];
                    if *trans_b {
                        gemm(gm.t(), am, &mut db, 0.0);
                    } else {
                        gemm(am.t(), gm, &mut db, 0.0);
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap(), nodes);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let r = av.rank();
                let batch: usize = av.shape()[..r - 2].iter().product();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let (b0, b1) = (bv.shape()[r - 2], bv.shape()[r - 1]);
                let p = g.last_dim();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..batch {
                    let gm = MatRef::new(&gd[i * m * p..(i + 1) * m * p], m, p);
                    let am = MatRef::new(&av.data()[i * m * k..(i + 1) * m * k], m, k);
                    let bm = MatRef::new(&bv.data()[i * b0 * b1..(i + 1) * b0 * b1], b0, b1);
                    let da_i = &mut da[i * m * k..(i + 1) * m * k];
                    gemm(gm, if *trans_b { bm } else { bm.t() }, da_i, 0.0);
                    let db_i = &mut db[i * b0 * b1..(i + 1) * b0 * b1];
                    if *trans_b {
                        gemm(gm.t(), am, db_i, 0.0);
                    } else {
                        gemm(am.t(), gm, db_i, 0.0);
                    }
                }
                send(*a, Tensor::new(av.shape().to_vec(), da).unwrap(), nodes);
                send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap(), nodes);
            }
            Op::Add { a, b } => {
                let bv = val(*b);
                if nodes[b.0].needs_grad {
                    let inner = bv.len();
                    let mut db = vec![0.0; inner];
                    for chunk in gd.chunks(inner) {
                        for (d, &x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap(), nodes);
                }
                send(*a, g.clone(), nodes);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let da = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                send(*a, Tensor::new(av.shape().to_vec(), da).unwrap(), nodes);
                send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap(), nodes);
            }
            Op::Affine { x, scale } => send(*x, g.map(|v| v * scale), nodes),
            Op::Gelu(x) => {
                let xv = val(*x);
                let dx = gd.iter().zip(xv.data()).map(|(g, &v)| g * gelu_grad(v)).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap(), nodes);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let dx = gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                send(*x, Tensor::new(y.shape().to_vec(), dx).unwrap(), nodes);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                send(*x, Tensor::new(y.shape().to_vec(), dx).unwrap(), nodes);
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), dx).unwrap(), nodes);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let h = gv.len();
                let rows = inv_std.len();
                let mut dgamma = vec![0.0; h];
                let mut dbeta = vec![0.0; h];
                let mut dx = vec![0.0; rows * h];
                for r in 0..rows {
                    let gr = &gd[r * h..(r + 1) * h];
                    let xr = &x_hat[r * h..(r + 1) * h];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..h {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gv.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xr[j];
                    }
                    let scale = inv_std[r] / h as f64;
                    for j in 0..h {
                        let dxh = gr[j] * gv.data()[j];
                        dx[r * h + j] = scale * (h as f64 * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                    }
                }
                send(*gamma, Tensor::vector(&dgamma), nodes);
                send(*beta, Tensor::vector(&dbeta), nodes);
                send(*x, Tensor::new(val(*x).shape().to_vec(), dx).unwrap(), nodes);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let h = tv.last_dim();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &x) in dt.row_mut(id).iter_mut().zip(&gd[r * h..(r + 1) * h]) {
                        *d += x;
                    }
                }
                send(*table, dt, nodes);
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in dx.data_mut()[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&gd[i * d..(i + 1) * d])
                    {
                        *o += v;
                    }
                }
                send(*x, dx, nodes);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let lv = val(*logits);
                let v = lv.last_dim();
                let mut dl = vec![0.0; lv.len()];
                if *count > 0 {
                    let scale = gd[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * scale;
                        }
                        dl[r * v + t] -= scale;
                    }
                }
                send(*logits, Tensor::new(lv.shape().to_vec(), dl).unwrap(), nodes);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits);
                let scale = gd[0] / lv.len() as f64;
                let dl = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                send(*logits, Tensor::new(lv.shape().to_vec(), dl).unwrap(), nodes);
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let pv = val(*probs);
                let scale = gd[0] / pv.len() as f64;
                let dp = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| scale * (p - t) / (p * (1.0 - p)))
                    .collect();
                send(*probs, Tensor::new(pv.shape().to_vec(), dp).unwrap(), nodes);
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                send(*x, Tensor::new(g.shape().to_vec(), dx).unwrap(), nodes);
            }
            Op::SplitHeads { x, heads } => {
                let (b, t, d) = (g.shape()[0], g.shape()[2], g.shape()[3]);
                let h = heads * d;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for a in 0..*heads {
                        for ti in 0..t {
                            let src = ((bi * heads + a) * t + ti) * d;
                            let dst = (bi * t + ti) * h + a * d;
                            dx[dst..dst + d].copy_from_slice(&gd[src..src + d]);
                        }
                    }
                }
                send(*x, Tensor::new(vec![b, t, h], dx).unwrap(), nodes);
            }
            Op::MergeHeads { x, heads } => {
                let (b, t, h) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let d = h / heads;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for a in 0..*heads {
                            let src = (bi * t + ti) * h + a * d;
                            let dst = ((bi * heads + a) * t + ti) * d;
                            dx[dst..dst + d].copy_from_slice(&gd[src..src + d]);
                        }
                    }
                }
                send(*x, Tensor::new(vec![b, *heads, t, d], dx).unwrap(), nodes);
            }
            Op::MaskedMean { x, weights } => {
                let xv = val(*x);
                let (b, t, h) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![0.0; xv.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        let w = weights[bi * t + ti];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..h {
                            dx[(bi * t + ti) * h + j] = w * gd[bi * h + j];
                        }
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap(), nodes);
            }
            Op::RowCosine { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let h = av.last_dim();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for r in 0..av.rows() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = node.value.data()[r];
                    for j in 0..h {
                        da[r * h + j] = gd[r] * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        db[r * h + j] = gd[r] * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                send(*a, Tensor::new(av.shape().to_vec(), da).unwrap(), nodes);
                send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap(), nodes);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                send(*x, Tensor::full(xv.shape(), gd[0]), nodes);
            }
            Op::Mean(x) => {
                let xv = val(*x);
                send(*x, Tensor::full(xv.shape(), gd[0] / xv.len().max(1) as f64), nodes);
            }
            Op::Mse { pred, target } => {
                let pv = val(*pred);
                let scale = 2.0 * gd[0] / pv.len() as f64;
                let dp = pv.data().iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                send(*pred, Tensor::new(pv.shape().to_vec(), dp).unwrap(), nodes);
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                send(*x, g.clone().reshape(&shape).unwrap(), nodes);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut store = store_with("w", Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad_by_name("w").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn gradient_of_half_square_is_identity() {
        let w0 = Tensor::new(vec![4], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let mut store = store_with("w", w0.clone());
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let loss = g.affine(s, 0.5, 0.0);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad_by_name("w").unwrap(), &w0);
    }

    #[test]
    fn backward_needs_recorded_graph() {
        let mut store = ParameterStore::new();
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c, &mut store), Err(NumericsError::NoGraph)));
        let other = Graph::new();
        assert!(matches!(other.backward(c, &mut store), Err(NumericsError::NoGraph)));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_equal_logits_is_log_v() {
        let mut g = Graph::new();
        let v = 7;
        let x = g.constant(Tensor::full(&[1, v], 0.3));
        for t in 0..v {
            let l = g.cross_entropy(x, &[Some(t)]).unwrap();
            assert!((g.value(l).item() - (v as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.25));
        let gamma = g.constant(Tensor::full(&[5], 1.0));
        let beta = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b, false).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![1, 1, 3], vec![5.0, 1.0, 2.0]).unwrap());
        let p = g.masked_softmax(s, &[vec![false, true, true]]).unwrap();
        let pv = g.value(p).data();
        assert_eq!(pv[0], 0.0);
        assert!((pv[1] + pv[2] - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax(s, &[vec![false; 3]]).is_err());
    }

    #[test]
    fn dropout_is_seeded() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[64], 1.0));
        let a = g.dropout(x, 0.1, true, 42).unwrap();
        let b = g.dropout(x, 0.1, true, 42).unwrap();
        let c = g.dropout(x, 0.1, false, 42).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(c, x);
    }
}
