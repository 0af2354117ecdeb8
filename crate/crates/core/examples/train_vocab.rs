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

//! Learns a WordPiece-style BPE vocabulary from the NER fixture text, then encodes and
//! decodes a sentence with it.
//!
//! ```text
//! cargo run --example train_vocab -- 300
//! ```

use std::path::Path;

use medbert::datasets::load_conll;
use medbert::tokenizer::{decode, encode, train_bpe, BpeOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target: usize = std::env::args().nth(1).map_or(Ok(300), |s| s.parse())?;
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let conll = load_conll(&fixtures.join("ner_disease_50.conll"))?;
    let corpus: Vec<String> = conll.sentences().map(|s| s.words.join(" ")).collect();

    let vocab = train_bpe(&corpus, target, 2, BpeOptions::default())?;
    println!("{} tokens, {} merges", vocab.len(), vocab.merges().len());
    for (l, r) in vocab.merges().iter().take(8) {
        println!("  merge {l} + {r}");
    }

    let text = "Patients with early onset hypertensive disease";
    let t = encode(text, &vocab);
    let pieces: Vec<&str> = t.ids.iter().map(|&i| vocab.token(i).unwrap_or("?")).collect();
    println!("{text:?} -> {pieces:?}");
    println!("decoded: {:?}", decode(&t.ids, &vocab));
    Ok(())
}
