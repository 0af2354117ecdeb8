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

//! Sentence similarity from mean-pooled embeddings: cosine mapped onto a 0..4 scale, scored
//! by Pearson correlation against gold ratings.

use medbert::finetune::{finetune, predict, FinetuneConfig, FinetuneExample, Predictions, TaskSpec};
use medbert::metrics::pearson;
use medbert::model::{BertModel, ModelConfig};
use medbert::tokenizer::{train_bpe, BpeOptions};

const PAIRS: &[(&str, &str, f64)] = &[
    ("renal failure was observed", "kidney failure was observed", 3.5),
    ("renal failure was observed", "renal failure was observed", 4.0),
    ("the tumor grew rapidly", "the tumour expanded quickly", 3.0),
    ("the tumor grew rapidly", "patients received aspirin daily", 0.0),
    ("aspirin reduced the fever", "the fever was reduced by aspirin", 3.5),
    ("aspirin reduced the fever", "the tumor grew rapidly", 0.5),
    ("insulin levels were elevated", "insulin was elevated", 3.0),
    ("insulin levels were elevated", "kidney failure was observed", 0.5),
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus: Vec<String> = PAIRS
        .iter()
        .flat_map(|(a, b, _)| [a.to_string(), b.to_string()])
        .collect();
    let vocab = train_bpe(&corpus, 150, 1, BpeOptions::default())?;
    let examples: Vec<FinetuneExample> = PAIRS
        .iter()
        .map(|&(a, b, score)| FinetuneExample::Pair {
            a: a.into(),
            b: b.into(),
            score,
        })
        .collect();

    let encoder = BertModel::init(ModelConfig::small(vocab.len(), 32, 1, 2, 32), 0)?;
    let cfg = FinetuneConfig {
        lr: 1e-3,
        epochs: 30,
        max_seq: 32,
        ..FinetuneConfig::default()
    };
    let run = finetune(encoder, TaskSpec::Similarity, &examples, &[], &vocab, &cfg)?;
    for r in run.trace.iter().step_by(10) {
        println!(
            "epoch {:2}  pearson {:.3}",
            r.epoch,
            r.metrics.get("pearson").unwrap_or(f64::NAN)
        );
    }

    let Predictions::Scores(scores) = predict(&run.model, &vocab, &examples, cfg.max_seq)?.predictions else {
        unreachable!()
    };
    for ((a, b, gold), s) in PAIRS.iter().zip(&scores) {
        println!("{gold:.1} {s:.2}  {a} | {b}");
    }
    let gold: Vec<f64> = PAIRS.iter().map(|p| p.2).collect();
    println!("pearson {:.4}", pearson(&gold, &scores)?);
    Ok(())
}
