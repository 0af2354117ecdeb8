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

//! Carries a base model's embeddings over to a domain vocabulary: shared tokens are copied,
//! new tokens start from the mean of their base pieces, the rest are freshly initialized.

use medbert::model::{BertModel, ModelConfig};
use medbert::tokenizer::{align_vocabulary, alignment_plan, train_bpe, BpeOptions, RowSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let general = vec!["the patient was seen in the clinic and the report was filed".to_string(); 3];
    let domain = vec!["the patient had nephropathy and hepatic steatosis in the clinic".to_string(); 3];
    let base_vocab = train_bpe(&general, 80, 1, BpeOptions::default())?;
    let new_vocab = train_bpe(&domain, 90, 1, BpeOptions::default())?;

    let base = BertModel::init(ModelConfig::small(base_vocab.len(), 16, 1, 2, 32), 1)?;
    let aligned = align_vocabulary(&new_vocab, &base_vocab, base.params.get("embeddings.word")?, 7)?;
    println!("aligned table {:?}", aligned.shape());

    let (mut copied, mut mean, mut fresh) = (0, 0, 0);
    for (id, src) in alignment_plan(&new_vocab, &base_vocab).iter().enumerate() {
        let token = new_vocab.token(id).unwrap_or("?");
        match src {
            RowSource::Copy(_) => copied += 1,
            RowSource::Mean(pieces) => {
                mean += 1;
                let names: Vec<&str> = pieces.iter().map(|&p| base_vocab.token(p).unwrap_or("?")).collect();
                println!("  {token:<14} mean of {names:?}");
            }
            RowSource::Fresh => fresh += 1,
        }
    }
    println!("copied {copied}, mean {mean}, fresh {fresh}");
    Ok(())
}
