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

//! The whole command pipeline in a scratch directory: train a vocabulary, pretrain, fine-tune
//! on a dataset manifest, then re-score the written predictions. Each step leaves a
//! `manifest.txt` with its config, input digests, outputs and metrics.

use std::path::Path;

use medbert::pipeline::{run, Command, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let dir = tempfile::tempdir()?;
    let work = dir.path();

    let conll = medbert::datasets::load_conll(&fixtures.join("ner_disease_50.conll"))?;
    let mut corpus = String::new();
    for (i, s) in conll.sentences().enumerate() {
        if i > 0 && i % 5 == 0 {
            corpus.push('\n');
        }
        corpus.push_str(&s.words.join(" "));
        corpus.push('\n');
    }
    std::fs::write(work.join("corpus.txt"), corpus)?;
    std::fs::write(
        work.join("datasets.tsv"),
        format!("ncbi\tner\t{}\n", fixtures.join("ner_disease_50.conll").display()),
    )?;

    let p = |name: &str| work.join(name).display().to_string();
    let mut cfg = PipelineConfig::parse(&format!(
        "seed = 7\n\
         vocab.corpus = {corpus}\n\
         vocab.size = 400\n\
         vocab.path = {vocab}\n\
         vocab.merges = {merges}\n\
         model.hidden = 32\n\
         model.layers = 1\n\
         model.max_seq = 48\n\
         pretrain.corpus = {corpus}\n\
         pretrain.total_steps = 60\n\
         pretrain.warmup_steps = 6\n\
         pretrain.batch_size = 8\n\
         pretrain.lr = 1e-3\n\
         finetune.manifest = {manifest}\n\
         finetune.dataset = ncbi\n\
         finetune.checkpoint = {ckpt}\n\
         finetune.lr = 3e-3\n\
         finetune.epochs = 30\n",
        corpus = p("corpus.txt"),
        vocab = p("vocab/vocab.txt"),
        merges = p("vocab/merges.txt"),
        manifest = p("datasets.tsv"),
        ckpt = p("pretrain/model.ckpt"),
    ))?;

    for (command, out) in [
        (Command::TrainVocab, "vocab"),
        (Command::Pretrain, "pretrain"),
        (Command::Finetune, "finetune"),
    ] {
        cfg.set("out", &p(out))?;
        let manifest = run(command, &cfg)?;
        println!("{} ({} ms)", command.name(), manifest.wall_clock_ms);
        for (k, v) in &manifest.metrics {
            println!("  {k:<24} {v:.4}");
        }
    }

    cfg.set("out", &p("evaluate"))?;
    cfg.set("evaluate.predictions", &p("finetune/ncbi.test_predictions.tsv"))?;
    cfg.set("evaluate.task", "ner")?;
    let manifest = run(Command::Evaluate, &cfg)?;
    println!("evaluate: f1 {:.4}", manifest.metric("f1").unwrap_or(f64::NAN));
    Ok(())
}
