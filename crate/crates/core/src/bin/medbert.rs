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

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medbert::pipeline::{compare_manifest_files, run, Command, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "medbert",
    version,
    about = "Domain vocabulary, pretraining and biomedical fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Learn a BPE vocabulary from a line-per-sentence corpus.
    TrainVocab(RunArgs),
    /// Transfer a base checkpoint's embeddings onto a new vocabulary.
    AlignVocab(RunArgs),
    /// MLM + NSP pretraining.
    Pretrain(RunArgs),
    /// Fine-tune a checkpoint on one manifest dataset.
    Finetune(RunArgs),
    /// Score a prediction file.
    Evaluate(RunArgs),
    /// Run a fine-tuned model over a dataset file.
    Predict(RunArgs),
    /// Tabulate metrics from two or more run manifests.
    CompareRuns {
        #[arg(required = true, num_args = 2..)]
        manifests: Vec<PathBuf>,
        /// Keep only this metric (e.g. `score`, `f1`).
        #[arg(long)]
        metric: Option<String>,
        #[arg(long, default_value_t = 4)]
        decimals: usize,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// KEY=VALUE override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(o) = &self.out {
            cfg.set("out", &o.display().to_string())?;
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let (command, args) = match cli.command {
        Sub::TrainVocab(a) => (Command::TrainVocab, a),
        Sub::AlignVocab(a) => (Command::AlignVocab, a),
        Sub::Pretrain(a) => (Command::Pretrain, a),
        Sub::Finetune(a) => (Command::Finetune, a),
        Sub::Evaluate(a) => (Command::Evaluate, a),
        Sub::Predict(a) => (Command::Predict, a),
        Sub::CompareRuns {
            manifests,
            metric,
            decimals,
            out,
        } => {
            let table = compare_manifest_files(&manifests, metric.as_deref())?.render(decimals);
            if let Some(path) = out {
                std::fs::write(&path, &table)
                    .map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))?;
            }
            print!("{table}");
            return Ok(());
        }
    };
    let manifest = run(command, &args.config()?)?;
    for (k, v) in &manifest.metrics {
        println!("{k}\t{v:.6}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
