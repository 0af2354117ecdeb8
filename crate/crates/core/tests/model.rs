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

use medbert::model::{
    embed, encoder_forward, mlm_logits, mlm_logits_at, nsp_logits, pooling_mask, sentence_embedding, BertModel,
    ForwardMode, ModelConfig, TokenBatch,
};
use medbert::numerics::{check_gradients, Graph, Tensor};

fn batch(rows: &[(&[usize], &[usize])]) -> TokenBatch {
    TokenBatch::from_sequences(rows, 0)
}

fn mini() -> BertModel {
    let mut cfg = ModelConfig::small(20, 8, 2, 2, 16);
    cfg.dropout = 0.0;
    BertModel::init(cfg, 3).unwrap()
}

#[test]
fn parameter_count_matches_closed_form() {
    for (v, h, l, a, t) in [(20, 8, 2, 2, 16), (100, 64, 2, 2, 32), (7, 4, 1, 1, 2)] {
        let cfg = ModelConfig::small(v, h, l, a, t);
        let model = BertModel::init(cfg, 0).unwrap();
        let i = 4 * h;
        let formula = v * h
            + t * h
            + 2 * h
            + 2 * h
            + l * (4 * (h * h + h) + 2 * h + h * i + i + i * h + h + 2 * h)
            + (h * h + h)
            + (h * h + h + 2 * h + v)
            + (2 * h + 2);
        assert_eq!(model.params.num_scalars(), formula);
        assert_eq!(cfg.parameter_count(), formula);
    }
}

#[test]
fn embed_is_pure_and_shaped() {
    let m = mini();
    let b = batch(&[
        (&[2, 5, 6, 7, 3, 9, 3], &[0, 0, 0, 0, 0, 1, 1]),
        (&[2, 8, 3], &[0, 0, 0]),
    ]);
    let mut g = Graph::new();
    let x = m.embed(&mut g, &b, &ForwardMode::eval()).unwrap();
    let y = m.embed(&mut g, &b, &ForwardMode::eval()).unwrap();
    assert_eq!(g.shape(x), &[2, 7, 8]);
    assert_eq!(g.value(x).data(), g.value(y).data());
}

#[test]
fn segments_change_embeddings() {
    let m = mini();
    let ids: &[usize] = &[2, 5, 6, 3];
    let mut g = Graph::new();
    let a = m
        .embed(&mut g, &batch(&[(ids, &[0, 0, 0, 0])]), &ForwardMode::eval())
        .unwrap();
    let b = m
        .embed(&mut g, &batch(&[(ids, &[1, 1, 1, 1])]), &ForwardMode::eval())
        .unwrap();
    assert_ne!(g.value(a).data(), g.value(b).data());
}

#[test]
fn embed_rejects_out_of_range_inputs() {
    let m = mini();
    let mut g = Graph::new();
    assert!(m.embed(&mut g, &batch(&[(&[25], &[0])]), &ForwardMode::eval()).is_err());
    assert!(m.embed(&mut g, &batch(&[(&[2], &[2])]), &ForwardMode::eval()).is_err());
    let long: Vec<usize> = vec![4; 17];
    let segs = vec![0; 17];
    assert!(m
        .embed(&mut g, &batch(&[(&long, &segs)]), &ForwardMode::eval())
        .is_err());
}

#[test]
fn single_token_attention_is_one() {
    let m = mini();
    let mut g = Graph::new();
    let out = m
        .encode(&mut g, &batch(&[(&[4], &[0]), (&[7], &[1])]), &ForwardMode::eval())
        .unwrap();
    for a in &out.attentions {
        assert!(g.value(*a).data().iter().all(|&w| w == 1.0));
    }
}

#[test]
fn attention_rows_sum_to_one_over_unmasked_keys() {
    let m = mini();
    let b = batch(&[(&[2, 5, 6, 7, 3], &[0; 5]), (&[2, 8, 3], &[0; 3])]);
    let mut g = Graph::new();
    let out = m.encode(&mut g, &b, &ForwardMode::eval()).unwrap();
    for a in &out.attentions {
        let v = g.value(*a);
        let t = b.seq;
        for r in 0..v.rows() {
            let row = v.row(r);
            let batch_idx = r / (m.config.heads * t);
            let mask = &b.mask[batch_idx * t..(batch_idx + 1) * t];
            assert!(row.iter().all(|&w| w >= 0.0));
            let total: f64 = row.iter().zip(mask).filter(|(_, &m)| m).map(|(w, _)| w).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(row.iter().zip(mask).filter(|(_, &m)| !m).all(|(&w, _)| w == 0.0));
        }
    }
}

#[test]
fn masked_positions_do_not_leak() {
    let m = mini();
    let ids_a: &[usize] = &[2, 5, 6, 3, 0, 0];
    let ids_b: &[usize] = &[2, 5, 6, 3, 17, 11];
    let segs: &[usize] = &[0, 0, 0, 0, 1, 1];
    let mut b1 = batch(&[(ids_a, segs)]);
    let mut b2 = batch(&[(ids_b, segs)]);
    for b in [&mut b1, &mut b2] {
        b.mask = vec![true, true, true, true, false, false];
    }
    let mut g = Graph::new();
    let o1 = m.encode(&mut g, &b1, &ForwardMode::eval()).unwrap();
    let o2 = m.encode(&mut g, &b2, &ForwardMode::eval()).unwrap();
    let (h1, h2) = (g.value(o1.hidden_states), g.value(o2.hidden_states));
    for t in 0..4 {
        for (x, y) in h1.row(t).iter().zip(h2.row(t)) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    assert!(g.value(o1.pooled).max_abs_diff(g.value(o2.pooled)) < 1e-9);
}

#[test]
fn fully_masked_row_is_an_error() {
    let m = mini();
    let mut b = batch(&[(&[2, 5, 3], &[0; 3])]);
    b.mask = vec![false; 3];
    let mut g = Graph::new();
    assert!(m.encode(&mut g, &b, &ForwardMode::eval()).is_err());
}

// Straight-line reference for one layer, one head, H = 2.
fn oracle_single_layer(m: &BertModel, ids: &[usize], segs: &[usize]) -> Vec<[f64; 2]> {
    let p = |n: &str| m.params.get(n).unwrap().data().to_vec();
    let ln = |x: [f64; 2], g: &[f64], b: &[f64]| -> [f64; 2] {
        let mean = (x[0] + x[1]) / 2.0;
        let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + 1e-12).sqrt();
        [g[0] * (x[0] - mean) * inv + b[0], g[1] * (x[1] - mean) * inv + b[1]]
    };
    let lin = |x: [f64; 2], w: &[f64], b: &[f64]| -> [f64; 2] {
        [x[0] * w[0] + x[1] * w[2] + b[0], x[0] * w[1] + x[1] * w[3] + b[1]]
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + libm_erf(x / std::f64::consts::SQRT_2));
    let (word, pos, seg) = (p("embeddings.word"), p("embeddings.position"), p("embeddings.segment"));
    let t = ids.len();
    let emb: Vec<[f64; 2]> = (0..t)
        .map(|i| {
            let x = [
                word[ids[i] * 2] + pos[i * 2] + seg[segs[i] * 2],
                word[ids[i] * 2 + 1] + pos[i * 2 + 1] + seg[segs[i] * 2 + 1],
            ];
            ln(x, &p("embeddings.ln.gamma"), &p("embeddings.ln.beta"))
        })
        .collect();
    let pre = "layer.0.attention";
    let q: Vec<_> = emb
        .iter()
        .map(|&x| lin(x, &p(&format!("{pre}.query.weight")), &p(&format!("{pre}.query.bias"))))
        .collect();
    let k: Vec<_> = emb
        .iter()
        .map(|&x| lin(x, &p(&format!("{pre}.key.weight")), &p(&format!("{pre}.key.bias"))))
        .collect();
    let v: Vec<_> = emb
        .iter()
        .map(|&x| lin(x, &p(&format!("{pre}.value.weight")), &p(&format!("{pre}.value.bias"))))
        .collect();
    let mut out = Vec::new();
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let ctx = [
            (0..t).map(|j| e[j] / z * v[j][0]).sum::<f64>(),
            (0..t).map(|j| e[j] / z * v[j][1]).sum::<f64>(),
        ];
        let a = lin(
            ctx,
            &p(&format!("{pre}.output.weight")),
            &p(&format!("{pre}.output.bias")),
        );
        let x1 = ln(
            [emb[i][0] + a[0], emb[i][1] + a[1]],
            &p(&format!("{pre}.ln.gamma")),
            &p(&format!("{pre}.ln.beta")),
        );
        let w1 = p("layer.0.ffn.in.weight");
        let b1 = p("layer.0.ffn.in.bias");
        let hmid = [
            gelu(x1[0] * w1[0] + x1[1] * w1[2] + b1[0]),
            gelu(x1[0] * w1[1] + x1[1] * w1[3] + b1[1]),
        ];
        let f = lin(hmid, &p("layer.0.ffn.out.weight"), &p("layer.0.ffn.out.bias"));
        out.push(ln(
            [x1[0] + f[0], x1[1] + f[1]],
            &p("layer.0.ffn.ln.gamma"),
            &p("layer.0.ffn.ln.beta"),
        ));
    }
    out
}

// Abramowitz-Stegun is too coarse for 1e-9; use the series/continued fraction pair.
fn libm_erf(x: f64) -> f64 {
    if x.abs() < 2.5 {
        let mut sum = 0.0;
        let mut term = x;
        let mut n = 0.0;
        loop {
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
            n += 1.0;
            term *= -x * x / n;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        let s = x.signum();
        let a = x.abs();
        // Lentz continued fraction for erfc.
        let mut f = a;
        let mut c = a;
        let mut d = 0.0;
        for i in 1..200 {
            let an = i as f64 / 2.0;
            d = a + an * d;
            d = 1.0 / d;
            c = a + an / c;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let erfc = (-a * a).exp() / (f * std::f64::consts::PI.sqrt());
        s * (1.0 - erfc)
    }
}

#[test]
fn single_layer_matches_hand_rolled_oracle() {
    let mut cfg = ModelConfig::small(10, 2, 1, 1, 8);
    cfg.intermediate = 2;
    cfg.dropout = 0.0;
    let mut m = BertModel::init(cfg, 17).unwrap();
    // Larger weights so the layer is far from the identity-ish init regime.
    for id in m.params.ids().collect::<Vec<_>>() {
        let scaled = m.params.value(id).map(|v| v * 25.0 + 0.1);
        *m.params.value_mut(id) = scaled;
    }
    let ids = [7usize, 4];
    let segs = [0usize, 1];
    let mut g = Graph::new();
    let out = m
        .encode(&mut g, &batch(&[(&ids, &segs)]), &ForwardMode::eval())
        .unwrap();
    let h = g.value(out.hidden_states);
    let want = oracle_single_layer(&m, &ids, &segs);
    for t in 0..2 {
        for j in 0..2 {
            assert!(
                (h.row(t)[j] - want[t][j]).abs() < 1e-9,
                "t={t} j={j}: {} vs {}",
                h.row(t)[j],
                want[t][j]
            );
        }
    }
}

#[test]
fn mlm_logits_are_tied_to_embeddings() {
    let mut m = mini();
    let b = batch(&[(&[2, 5, 6, 3], &[0; 4])]);
    let run = |m: &BertModel| {
        let mut g = Graph::new();
        let out = m.encode(&mut g, &b, &ForwardMode::eval()).unwrap();
        let hidden = g.constant(g.value(out.hidden_states).clone());
        let l = mlm_logits(&mut g, &m.params, hidden).unwrap();
        assert_eq!(g.shape(l), &[1, 4, 20]);
        g.value(l).clone()
    };
    let before = run(&m);
    // Perturb only the projection side: keep the same hidden states by freezing them above.
    let id = m.params.id("embeddings.word").unwrap();
    m.params.value_mut(id).row_mut(13)[0] += 0.5;
    let after = run(&m);
    for r in 0..before.rows() {
        for k in 0..20 {
            let changed = (before.row(r)[k] - after.row(r)[k]).abs() > 0.0;
            // hidden states depend on rows 2,5,6,3 only, so column 13 is the only one that moves
            assert_eq!(changed, k == 13, "row {r} col {k}");
        }
    }
}

#[test]
fn mlm_at_positions_equals_full_logits() {
    let m = mini();
    let b = batch(&[(&[2, 5, 6, 3], &[0; 4]), (&[2, 9, 3], &[0; 3])]);
    let mut g = Graph::new();
    let out = m.encode(&mut g, &b, &ForwardMode::eval()).unwrap();
    let full = mlm_logits(&mut g, &m.params, out.hidden_states).unwrap();
    let some = mlm_logits_at(&mut g, &m.params, out.hidden_states, &[1, 5]).unwrap();
    let (f, s) = (g.value(full).clone(), g.value(some));
    assert_eq!(s.row(0), f.row(1));
    assert_eq!(s.row(1), f.row(5));
}

#[test]
fn nsp_with_zero_head_is_uniform() {
    let mut m = mini();
    m.params.set("nsp.weight", Tensor::zeros(&[8, 2])).unwrap();
    let mut g = Graph::new();
    let out = m
        .encode(
            &mut g,
            &batch(&[(&[2, 5, 3], &[0; 3]), (&[2, 7, 3, 9, 3], &[0, 0, 0, 1, 1])]),
            &ForwardMode::eval(),
        )
        .unwrap();
    let logits = nsp_logits(&mut g, &m.params, out.pooled).unwrap();
    assert_eq!(g.shape(logits), &[2, 2]);
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    let p = g.softmax(logits);
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn swapping_sentences_changes_nsp_logits() {
    let m = mini();
    let mut g = Graph::new();
    let ab = batch(&[(&[2, 5, 6, 3, 9, 10, 11, 3], &[0, 0, 0, 0, 1, 1, 1, 1])]);
    let ba = batch(&[(&[2, 9, 10, 11, 3, 5, 6, 3], &[0, 0, 0, 0, 0, 1, 1, 1])]);
    let o1 = m.encode(&mut g, &ab, &ForwardMode::eval()).unwrap();
    let o2 = m.encode(&mut g, &ba, &ForwardMode::eval()).unwrap();
    let l1 = nsp_logits(&mut g, &m.params, o1.pooled).unwrap();
    let l2 = nsp_logits(&mut g, &m.params, o2.pooled).unwrap();
    assert!(g.value(l1).max_abs_diff(g.value(l2)) > 0.0);
}

#[test]
fn sentence_embedding_means() {
    let mut g = Graph::new();
    let hidden = Tensor::new(vec![2, 3, 2], vec![1., 2., 3., 5., -1., 4., 0.5, 0.5, 9., 9., 2., -2.]).unwrap();
    let h = g.constant(hidden);
    let e = sentence_embedding(&mut g, h, &[vec![true, true, true], vec![true, false, false]]).unwrap();
    let v = g.value(e);
    // independent arithmetic
    assert!((v.row(0)[0] - (1.0 + 3.0 - 1.0) / 3.0).abs() < 1e-15);
    assert!((v.row(0)[1] - (2.0 + 5.0 + 4.0) / 3.0).abs() < 1e-15);
    assert_eq!(v.row(1), &[0.5, 0.5]);
    assert!(sentence_embedding(&mut g, h, &[vec![true; 3], vec![false; 3]]).is_err());

    let m = mini();
    let b = batch(&[(&[2, 5, 6, 3], &[0; 4]), (&[2, 5, 6, 3], &[0; 4])]);
    let out = m.encode(&mut g, &b, &ForwardMode::eval()).unwrap();
    let mask = pooling_mask(&b, |id| id == 2 || id == 3);
    assert_eq!(mask[0], vec![false, true, true, false]);
    let e = sentence_embedding(&mut g, out.hidden_states, &mask).unwrap();
    assert_eq!(g.value(e).row(0), g.value(e).row(1));
}

#[test]
fn train_mode_dropout_is_seeded() {
    let mut cfg = ModelConfig::small(20, 8, 2, 2, 16);
    cfg.dropout = 0.1;
    let m = BertModel::init(cfg, 3).unwrap();
    let b = batch(&[(&[2, 5, 6, 3], &[0; 4])]);
    let run = |seed| {
        let mut g = Graph::new();
        let out = m.encode(&mut g, &b, &ForwardMode::train(seed)).unwrap();
        g.value(out.hidden_states).clone()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn end_to_end_mlm_nsp_gradients_match_finite_differences() {
    let mut cfg = ModelConfig::small(13, 8, 2, 2, 6);
    cfg.dropout = 0.1;
    let mut m = BertModel::init(cfg, 21).unwrap();
    let b = batch(&[
        (&[2, 5, 4, 3, 9, 3], &[0, 0, 0, 0, 1, 1]),
        (&[2, 11, 7, 12, 3, 0], &[0, 0, 0, 0, 0, 0]),
    ]);
    let mut b = b;
    b.mask[11] = false;
    let mask_rows = b.mask_rows();
    let report = check_gradients(&mut m.params, 1e-5, |g, p| {
        let mode = ForwardMode::train(99);
        let x = embed(g, p, &cfg, &b, &mode).map_err(to_num)?;
        let out = encoder_forward(g, p, &cfg, x, &mask_rows, &mode).map_err(to_num)?;
        let logits = mlm_logits(g, p, out.hidden_states).map_err(to_num)?;
        let mut targets = vec![None; 12];
        targets[1] = Some(5);
        targets[2] = Some(6);
        targets[8] = Some(11);
        let mlm = g.cross_entropy(logits, &targets)?;
        let nsp = nsp_logits(g, p, out.pooled).map_err(to_num)?;
        let nsp = g.cross_entropy(nsp, &[Some(0), Some(1)])?;
        g.add(mlm, nsp)
    })
    .unwrap();
    assert!(
        report.passes(1e-4),
        "max rel err {}: {:?}",
        report.max_relative_error(),
        report.entries
    );
}

fn to_num(e: medbert::model::ModelError) -> medbert::numerics::NumericsError {
    medbert::numerics::NumericsError::InvalidArgument(e.to_string())
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = mini();
    m.save(&path).unwrap();
    let loaded = BertModel::load(&path).unwrap();
    assert_eq!(loaded.config, m.config);
    let bytes = std::fs::read(&path).unwrap();
    loaded.save(&path).unwrap();
    assert_eq!(bytes, std::fs::read(&path).unwrap());
}
