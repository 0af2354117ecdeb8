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

use medbert::numerics::{
    adam_step, check_gradients, AdamConfig, Graph, Initializer, NumericsError, OptimizerState, ParameterStore, Tensor,
    Var,
};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn store(params: &[(&str, Tensor)]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (n, t) in params {
        s.insert(*n, t.clone(), true).unwrap();
    }
    s
}

fn rand_tensor(seed: u64, shape: &[usize], std: f64) -> Tensor {
    Initializer::new(seed, std).gaussian(shape)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(seed, &shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_passes(
    name: &str,
    mut s: ParameterStore,
    f: impl FnMut(&mut Graph, &ParameterStore) -> Result<Var, NumericsError>,
) {
    let report = check_gradients(&mut s, H, f).unwrap();
    for e in &report.entries {
        assert!(
            e.relative_error < TOL,
            "{name}: {} rel err {}",
            e.name,
            e.relative_error
        );
    }
}

#[test]
fn gradcheck_matmul_and_transposed() {
    let s = store(&[
        ("a", rand_tensor(1, &[2, 3, 4], 1.0)),
        ("b", rand_tensor(2, &[4, 5], 1.0)),
    ]);
    assert_passes("matmul", s, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let y = g.matmul(a, b, false)?;
        weighted_sum(g, y, 9)
    });
    let s = store(&[("a", rand_tensor(3, &[3, 4], 1.0)), ("b", rand_tensor(4, &[6, 4], 1.0))]);
    assert_passes("matmul_t", s, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let y = g.matmul(a, b, true)?;
        weighted_sum(g, y, 10)
    });
}

#[test]
fn gradcheck_batch_matmul() {
    for trans in [false, true] {
        let bshape: &[usize] = if trans { &[2, 3, 5, 4] } else { &[2, 3, 4, 5] };
        let s = store(&[
            ("a", rand_tensor(5, &[2, 3, 2, 4], 1.0)),
            ("b", rand_tensor(6, bshape, 1.0)),
        ]);
        assert_passes("bmm", s, move |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = g.batch_matmul(a, b, trans)?;
            weighted_sum(g, y, 11)
        });
    }
}

#[test]
fn gradcheck_add_broadcast_and_mul() {
    let s = store(&[
        ("x", rand_tensor(7, &[2, 3, 4], 1.0)),
        ("pos", rand_tensor(8, &[3, 4], 1.0)),
        ("bias", rand_tensor(9, &[4], 1.0)),
    ]);
    assert_passes("add", s, |g, s| {
        let x = g.param(s, "x")?;
        let pos = g.param(s, "pos")?;
        let bias = g.param(s, "bias")?;
        let y = g.add(x, pos)?;
        let y = g.add(y, bias)?;
        let y = g.mul(y, x)?;
        weighted_sum(g, y, 12)
    });
}

#[test]
fn gradcheck_pointwise() {
    let s = store(&[("x", rand_tensor(10, &[3, 5], 1.5))]);
    assert_passes("gelu/tanh/sigmoid/affine", s, |g, s| {
        let x = g.param(s, "x")?;
        let a = g.gelu(x);
        let b = g.tanh(a);
        let c = g.sigmoid(b);
        let d = g.affine(c, -2.5, 0.3);
        weighted_sum(g, d, 13)
    });
}

#[test]
fn gradcheck_softmax_and_masked_softmax() {
    let s = store(&[("x", rand_tensor(11, &[2, 2, 3, 4], 2.0))]);
    assert_passes("softmax", s.clone(), |g, s| {
        let x = g.param(s, "x")?;
        let y = g.softmax(x);
        weighted_sum(g, y, 14)
    });
    let mask = vec![vec![true, false, true, true], vec![true, true, false, false]];
    assert_passes("masked_softmax", s, move |g, s| {
        let x = g.param(s, "x")?;
        let y = g.masked_softmax(x, &mask)?;
        weighted_sum(g, y, 15)
    });
}

#[test]
fn gradcheck_layer_norm() {
    let s = store(&[
        ("x", rand_tensor(12, &[4, 6], 1.0)),
        ("gamma", rand_tensor(13, &[6], 1.0)),
        ("beta", rand_tensor(14, &[6], 1.0)),
    ]);
    assert_passes("layer_norm", s, |g, s| {
        let x = g.param(s, "x")?;
        let gamma = g.param(s, "gamma")?;
        let beta = g.param(s, "beta")?;
        let y = g.layer_norm(x, gamma, beta)?;
        weighted_sum(g, y, 16)
    });
}

#[test]
fn gradcheck_embedding_and_gather() {
    let s = store(&[("table", rand_tensor(15, &[7, 3], 1.0))]);
    assert_passes("embedding", s, |g, s| {
        let t = g.param(s, "table")?;
        let e = g.embedding(t, &[1, 4, 4, 0, 6, 1], &[2, 3])?;
        let r = g.gather_rows(e, &[5, 0, 5])?;
        weighted_sum(g, r, 17)
    });
}

#[test]
fn gradcheck_losses() {
    let s = store(&[("z", rand_tensor(16, &[5, 4], 1.0))]);
    assert_passes("cross_entropy", s.clone(), |g, s| {
        let z = g.param(s, "z")?;
        g.cross_entropy(z, &[Some(1), None, Some(3), Some(0), None])
    });
    let targets = Tensor::new(vec![5, 4], (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let t2 = targets.clone();
    assert_passes("bce_with_logits", s.clone(), move |g, s| {
        let z = g.param(s, "z")?;
        g.bce_with_logits(z, &t2)
    });
    assert_passes("sigmoid+binary_cross_entropy", s.clone(), move |g, s| {
        let z = g.param(s, "z")?;
        let p = g.sigmoid(z);
        g.binary_cross_entropy(p, &targets)
    });
    let target = rand_tensor(99, &[5, 4], 1.0);
    assert_passes("mse", s, move |g, s| {
        let z = g.param(s, "z")?;
        g.mse(z, &target)
    });
}

#[test]
fn gradcheck_dropout_heads_pooling_cosine() {
    let s = store(&[
        ("x", rand_tensor(17, &[2, 3, 4], 1.0)),
        ("y", rand_tensor(18, &[2, 4], 1.0)),
    ]);
    let mask = vec![vec![true, true, false], vec![false, true, true]];
    assert_passes("dropout/heads/mean/cosine", s, move |g, s| {
        let x = g.param(s, "x")?;
        let y = g.param(s, "y")?;
        let d = g.dropout(x, 0.3, true, 77)?;
        let h = g.split_heads(d, 2)?;
        let m = g.merge_heads(h)?;
        let r = g.reshape(m, &[2, 3, 4])?;
        let pooled = g.masked_mean(r, &mask)?;
        let c = g.row_cosine(pooled, y)?;
        let sm = g.sum(c);
        let mn = g.mean(x);
        let tot = g.mul(sm, mn)?;
        Ok(tot)
    });
}

#[test]
fn gradient_shape_matches_parameter_and_accumulates() {
    let mut s = store(&[("w", rand_tensor(20, &[3, 2], 1.0))]);
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let l = g.sum(w);
        g.backward(l, &mut s).unwrap();
    }
    let grad = s.grad_by_name("w").unwrap();
    assert_eq!(grad.shape(), &[3, 2]);
    assert!(grad.data().iter().all(|&v| v == 2.0));
}

#[test]
fn adam_ten_steps_match_scalar_oracle() {
    // f(w) = w², w0 = 1, lr = 0.1, default betas/eps, no decay.
    let cfg = AdamConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut s = ParameterStore::new();
    s.insert("w", Tensor::vector(&[1.0]), false).unwrap();
    let mut state = OptimizerState::new(cfg, &s);

    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut trace = Vec::new();
    for t in 1..=10 {
        let mut g = Graph::new();
        let wv = g.param(&s, "w").unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let l = g.sum(sq);
        g.backward(l, &mut s).unwrap();
        adam_step(&mut s, &mut state, 1.0);

        let grad = 2.0 * w;
        m = 0.9 * m + 0.1 * grad;
        v = 0.999 * v + 0.001 * grad * grad;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 0.1 * mh / (vh.sqrt() + 1e-8);

        let got = s.get("w").unwrap().item();
        assert!((got - w).abs() < 1e-12, "step {t}: {got} vs {w}");
        trace.push(got.abs());
    }
    assert!(trace.windows(2).all(|p| p[1] < p[0]), "{trace:?}");
}

#[test]
fn decoupled_weight_decay_only_on_decaying_params() {
    let mut s = ParameterStore::new();
    s.insert("w", Tensor::vector(&[2.0]), true).unwrap();
    s.insert("b", Tensor::vector(&[2.0]), false).unwrap();
    let mut state = OptimizerState::new(
        AdamConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        },
        &s,
    );
    adam_step(&mut s, &mut state, 1.0);
    assert!((s.get("w").unwrap().item() - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    assert_eq!(s.get("b").unwrap().item(), 2.0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.softmax(x);
        let out = g.value(y);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(vals in prop::collection::vec(-100.0f64..100.0, 8..64)) {
        let n = vals.len() / 8 * 8;
        let t = Tensor::new(vec![n / 8, 8], vals[..n].to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let gamma = g.constant(Tensor::full(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        let out = g.value(y);
        for r in 0..out.rows() {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
            // rows that are (near) constant normalize to ~0
            prop_assert!((var - 1.0).abs() < 1e-6 || var < 1e-6);
        }
    }

    #[test]
    fn dropout_masks_are_reproducible(seed in any::<u64>(), p in 0.05f64..0.9) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[100], 1.0));
        let a = g.dropout(x, p, true, seed).unwrap();
        let b = g.dropout(x, p, true, seed).unwrap();
        prop_assert_eq!(g.value(a), g.value(b));
    }
}
