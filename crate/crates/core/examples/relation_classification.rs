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

//! Gene-disease relation classification over `@GENE$` / `@DISEASE$` masked sentences.

use std::path::Path;

use medbert::datasets::{load_labeled_text, LabeledData, LabeledKind, RelationFamily};
use medbert::finetune::{finetune, labeled_examples, FinetuneConfig};
use medbert::model::{BertModel, ModelConfig};
use medbert::tokenizer::{train_bpe, BpeOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let data = load_labeled_text(
        &fixtures.join("relation_20.tsv"),
        LabeledKind::Relation(RelationFamily::GeneDisease),
    )?;
    let LabeledData::Relation { examples: rows, .. } = &data else {
        unreachable!()
    };
    let corpus: Vec<String> = rows.iter().map(|e| e.sentence.clone()).collect();
    let vocab = train_bpe(&corpus, 200, 1, BpeOptions::default())?;

    let (task, examples) = labeled_examples(&data)?;
    println!("{} examples, labels {:?}", examples.len(), task.labels());
    let encoder = BertModel::init(ModelConfig::small(vocab.len(), 64, 2, 2, 64), 0)?;
    let cfg = FinetuneConfig {
        lr: 1e-3,
        epochs: 40,
        max_seq: 64,
        ..FinetuneConfig::default()
    };
    let run = finetune(encoder, task, &examples, &[], &vocab, &cfg)?;
    for r in run.trace.iter().step_by(5) {
        println!(
            "epoch {:2}  accuracy {:.3}  macro_f1 {:.3}",
            r.epoch,
            r.metrics.get("accuracy").unwrap_or(0.0),
            r.metrics.get("macro_f1").unwrap_or(0.0)
        );
    }
    Ok(())
}
