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

//! Token classification on the 10-sentence disease NER fixture: subword alignment, a BIO
//! head over a small randomly initialized encoder, and entity-level F1 per epoch.

use std::path::Path;

use medbert::datasets::load_conll;
use medbert::finetune::{decode_bio, finetune, predict, token_examples, FinetuneConfig, FinetuneExample, Predictions};
use medbert::model::{BertModel, ModelConfig};
use medbert::tokenizer::{train_bpe, BpeOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let conll = load_conll(&fixtures.join("ner_10.conll"))?;
    let corpus: Vec<String> = conll.sentences().map(|s| s.words.join(" ")).collect();
    let vocab = train_bpe(&corpus, 200, 1, BpeOptions::default())?;

    let (task, examples) = token_examples(&conll);
    let encoder = BertModel::init(ModelConfig::small(vocab.len(), 64, 2, 2, 64), 0)?;
    let cfg = FinetuneConfig {
        lr: 3e-3,
        epochs: 40,
        max_seq: 64,
        ..FinetuneConfig::default()
    };
    let run = finetune(encoder, task.clone(), &examples, &[], &vocab, &cfg)?;
    for r in run.trace.iter().step_by(5) {
        let loss = r.train_loss.map_or("-".into(), |l| format!("{l:.4}"));
        println!(
            "epoch {:2}  loss {loss:>7}  f1 {:.3}",
            r.epoch,
            r.metrics.get("f1").unwrap_or(0.0)
        );
    }

    let preds = predict(&run.model, &vocab, &examples[..1], cfg.max_seq)?;
    if let (Predictions::Tags(tags), FinetuneExample::Tokens { words, .. }) = (&preds.predictions, &examples[0]) {
        let names: Vec<&str> = tags[0].iter().map(|&t| task.labels()[t].as_str()).collect();
        for span in decode_bio(&names) {
            println!("{}: {}", span.ty, words[span.start..=span.end].join(" "));
        }
    }
    Ok(())
}
