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

//! Command runners behind the `medbert` binary: flat configuration, run manifests with
//! input digests, and run comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::{load_conll, load_labeled_text, load_manifest, split_dataset, SplitPolicy, TaskKind};
use crate::finetune::{
    finetune, hyperparameters_for, labeled_examples, predict, prediction_file_labels, render_metric_trace,
    render_predictions, score_prediction_file, token_examples, FinetuneConfig, FinetuneExample, TaskModel, TaskSpec,
    PREDICTION_LABELS_HEADER,
};
use crate::kv::KvDoc;
use crate::metrics::MetricReport;
use crate::model::{BertModel, ModelConfig};
use crate::numerics::load_tensors;
use crate::pretraining::{pretrain, read_corpus, render_loss_trace, tokenize_corpus, MaskingPolicy, PretrainOptions};
use crate::tokenizer::{align_vector, align_vocabulary, train_bpe, BpeOptions, Vocabulary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Runtime(e.to_string().replace('\n', " "))
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string().replace('\n', " "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Int,
    Float,
    Bool,
    Str,
    Path,
}

/// Every accepted key with its type and default (empty means unset).
const KEYS: &[(&str, Ty, &str)] = &[
    ("seed", Ty::Int, ""),
    ("out", Ty::Str, "runs/out"),
    ("vocab.corpus", Ty::Path, ""),
    ("vocab.size", Ty::Int, ""),
    ("vocab.min_pair_freq", Ty::Int, "2"),
    ("vocab.lowercase", Ty::Bool, "false"),
    ("vocab.path", Ty::Path, ""),
    ("vocab.merges", Ty::Path, ""),
    ("align.base_vocab", Ty::Path, ""),
    ("align.base_checkpoint", Ty::Path, ""),
    ("model.hidden", Ty::Int, "64"),
    ("model.layers", Ty::Int, "2"),
    ("model.heads", Ty::Int, "2"),
    ("model.intermediate", Ty::Int, ""),
    ("model.max_seq", Ty::Int, "128"),
    ("model.dropout", Ty::Float, "0.1"),
    ("mask.p_select", Ty::Float, "0.15"),
    ("mask.p_mask", Ty::Float, "0.8"),
    ("mask.p_random", Ty::Float, "0.1"),
    ("mask.p_keep", Ty::Float, "0.1"),
    ("pretrain.corpus", Ty::Path, ""),
    ("pretrain.init", Ty::Path, ""),
    ("pretrain.lr", Ty::Float, "3e-4"),
    ("pretrain.warmup_steps", Ty::Int, "2000"),
    ("pretrain.total_steps", Ty::Int, "10000"),
    ("pretrain.batch_size", Ty::Int, "32"),
    ("pretrain.weight_decay", Ty::Float, "0.01"),
    ("pretrain.checkpoint_every", Ty::Int, "0"),
    ("finetune.manifest", Ty::Path, ""),
    ("finetune.dataset", Ty::Str, ""),
    ("finetune.checkpoint", Ty::Path, ""),
    ("finetune.lr", Ty::Float, ""),
    ("finetune.batch_size", Ty::Int, ""),
    ("finetune.epochs", Ty::Int, ""),
    ("finetune.max_seq", Ty::Int, ""),
    ("finetune.weight_decay", Ty::Float, "0.01"),
    ("finetune.train_similarity", Ty::Bool, "true"),
    ("finetune.split", Ty::Str, "auto"),
    ("evaluate.predictions", Ty::Path, ""),
    ("evaluate.task", Ty::Str, ""),
    ("evaluate.labels", Ty::Str, ""),
    ("predict.checkpoint", Ty::Path, ""),
    ("predict.input", Ty::Path, ""),
    ("predict.kind", Ty::Str, ""),
];

/// Flat `key = value` configuration. Unknown keys are rejected; unset keys take defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    doc: KvDoc,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { doc: KvDoc::new() }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let doc = KvDoc::parse(text).map_err(config_err)?;
        let mut cfg = PipelineConfig::default();
        for (k, v) in doc.iter() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key after checking that it exists and that the value has the right type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let (_, ty, _) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| config_err(format!("unknown key {key:?}")))?;
        let ok = match ty {
            Ty::Int => value.parse::<u64>().is_ok(),
            Ty::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
            Ty::Bool => matches!(value, "true" | "false"),
            Ty::Str | Ty::Path => true,
        };
        if !ok {
            return Err(config_err(format!("{key}: cannot parse {value:?} as {ty:?}")));
        }
        self.doc.set(key, value);
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), PipelineError> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {spec:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn render(&self) -> String {
        self.doc.render()
    }

    /// Explicitly set value, else the default; `None` when both are empty.
    pub fn get(&self, key: &str) -> Option<&str> {
        let default = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, _, d)| *d)
            .unwrap_or("");
        let v = self.doc.get(key).unwrap_or(default);
        (!v.is_empty()).then_some(v)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.doc.iter()
    }

    fn require(&self, key: &str) -> Result<&str, PipelineError> {
        self.get(key).ok_or_else(|| config_err(format!("{key} is required")))
    }

    fn int(&self, key: &str) -> Result<Option<u64>, PipelineError> {
        self.get(key).map(|v| v.parse().map_err(config_err)).transpose()
    }

    fn float(&self, key: &str) -> Result<Option<f64>, PipelineError> {
        self.get(key).map(|v| v.parse().map_err(config_err)).transpose()
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key) == Some("true")
    }

    fn existing_path(&self, key: &str) -> Result<PathBuf, PipelineError> {
        let p = PathBuf::from(self.require(key)?);
        if !p.exists() {
            return Err(config_err(format!("{key}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn optional_path(&self, key: &str) -> Result<Option<PathBuf>, PipelineError> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.existing_path(key).map(Some),
        }
    }

    fn seed(&self) -> Result<u64, PipelineError> {
        self.int("seed")?
            .ok_or_else(|| config_err("seed is required (--seed or `seed = N`)"))
    }

    fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("."))
    }

    fn policy(&self, seed: u64) -> Result<MaskingPolicy, PipelineError> {
        let p = MaskingPolicy {
            p_select: self.float("mask.p_select")?.unwrap_or(0.15),
            p_mask: self.float("mask.p_mask")?.unwrap_or(0.8),
            p_random: self.float("mask.p_random")?.unwrap_or(0.1),
            p_keep: self.float("mask.p_keep")?.unwrap_or(0.1),
            seed,
        };
        p.validate().map_err(config_err)?;
        Ok(p)
    }

    fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, PipelineError> {
        let hidden = self.int("model.hidden")?.unwrap_or(64) as usize;
        let mut cfg = ModelConfig::small(
            vocab_size,
            hidden,
            self.int("model.layers")?.unwrap_or(2) as usize,
            self.int("model.heads")?.unwrap_or(2) as usize,
            self.int("model.max_seq")?.unwrap_or(128) as usize,
        );
        cfg.intermediate = self.int("model.intermediate")?.map_or(4 * hidden, |v| v as usize);
        cfg.dropout = self.float("model.dropout")?.unwrap_or(0.1);
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    fn vocabulary(&self) -> Result<Vocabulary, PipelineError> {
        let path = self.existing_path("vocab.path")?;
        let merges = self.optional_path("vocab.merges")?;
        Vocabulary::load(&path, merges.as_deref())
            .map(|v| v.with_lowercase(self.flag("vocab.lowercase")))
            .map_err(runtime)
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    /// `(name, path, sha256 hex)`
    pub inputs: Vec<(String, PathBuf, String)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub wall_clock_ms: u128,
    pub metrics: Vec<(String, f64)>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn render(&self) -> String {
        let mut d = KvDoc::new();
        d.set("command", self.command.clone());
        if let Some(s) = self.seed {
            d.set("seed", s.to_string());
        }
        for (k, v) in &self.config {
            d.set(format!("config.{k}"), v.clone());
        }
        for (name, path, digest) in &self.inputs {
            d.set(format!("input.{name}"), path.display().to_string());
            d.set(format!("digest.{name}"), digest.clone());
        }
        for (name, path) in &self.outputs {
            d.set(format!("output.{name}"), path.display().to_string());
        }
        d.set("wall_clock_ms", self.wall_clock_ms.to_string());
        for (k, v) in &self.metrics {
            d.set(format!("metric.{k}"), format!("{v:.6}"));
        }
        d.render()
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let d = KvDoc::parse(text).map_err(runtime)?;
        let mut m = RunManifest {
            command: d
                .get("command")
                .ok_or_else(|| runtime("manifest has no command"))?
                .to_string(),
            ..RunManifest::default()
        };
        let num = |k: &str, v: &str| {
            v.parse::<f64>()
                .map_err(|_| runtime(format!("manifest {k}: not a number")))
        };
        for (k, v) in d.iter() {
            if k == "seed" {
                m.seed = Some(v.parse().map_err(|_| runtime("manifest seed: not an integer"))?);
            } else if k == "wall_clock_ms" {
                m.wall_clock_ms = v
                    .parse()
                    .map_err(|_| runtime("manifest wall_clock_ms: not an integer"))?;
            } else if let Some(key) = k.strip_prefix("config.") {
                m.config.push((key.to_string(), v.to_string()));
            } else if let Some(name) = k.strip_prefix("input.") {
                let digest = d.get(&format!("digest.{name}")).unwrap_or("").to_string();
                m.inputs.push((name.to_string(), PathBuf::from(v), digest));
            } else if let Some(name) = k.strip_prefix("output.") {
                m.outputs.push((name.to_string(), PathBuf::from(v)));
            } else if let Some(key) = k.strip_prefix("metric.") {
                m.metrics.push((key.to_string(), num(k, v)?));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path).map_err(runtime)?)
    }
}

/// Aligned metrics for several runs; the first run is the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub keys: Vec<String>,
    /// `cells[key][run]`
    pub cells: Vec<Vec<Option<f64>>>,
    /// Mean over the keys every run reports; `None` when no key is common to all runs.
    pub means: Vec<Option<f64>>,
    pub shared_keys: usize,
}

impl Comparison {
    /// Run minus baseline for one key.
    pub fn delta(&self, key: usize, run: usize) -> Option<f64> {
        Some(self.cells[key][run]? - self.cells[key][0]?)
    }

    /// Difference of the mean rows.
    pub fn mean_delta(&self, run: usize) -> Option<f64> {
        Some(self.means[run]? - self.means[0]?)
    }

    /// Tab-separated table; absent cells print as `-`, the last row is `Total (Mean)`.
    pub fn render(&self, decimals: usize) -> String {
        let mut out = String::from("metric");
        for r in &self.runs {
            let _ = write!(out, "\t{r}");
        }
        for r in &self.runs[1..] {
            let _ = write!(out, "\tdelta:{r}");
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.decimals$}"));
        for (k, key) in self.keys.iter().enumerate() {
            out.push_str(key);
            for r in 0..self.runs.len() {
                let _ = write!(out, "\t{}", cell(self.cells[k][r]));
            }
            for r in 1..self.runs.len() {
                let _ = write!(out, "\t{}", cell(self.delta(k, r)));
            }
            out.push('\n');
        }
        out.push_str("Total (Mean)");
        for m in &self.means {
            let _ = write!(out, "\t{}", cell(*m));
        }
        for r in 1..self.runs.len() {
            let _ = write!(out, "\t{}", cell(self.mean_delta(r)));
        }
        out.push('\n');
        out
    }
}

/// Compares metric summaries of at least two runs.
pub fn compare_runs(runs: &[(String, Vec<(String, f64)>)]) -> Result<Comparison, PipelineError> {
    if runs.len() < 2 {
        return Err(runtime("compare-runs needs at least 2 manifests"));
    }
    let mut keys: Vec<String> = Vec::new();
    for (_, metrics) in runs {
        for (k, _) in metrics {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    let lookup = |run: usize, key: &str| runs[run].1.iter().find(|(k, _)| k == key).map(|&(_, v)| v);
    let cells: Vec<Vec<Option<f64>>> = keys
        .iter()
        .map(|k| (0..runs.len()).map(|r| lookup(r, k)).collect())
        .collect();
    let shared: Vec<usize> = (0..keys.len())
        .filter(|&k| cells[k].iter().all(Option::is_some))
        .collect();
    let overlapping = cells.iter().any(|row| row.iter().filter(|c| c.is_some()).count() >= 2);
    if !overlapping {
        return Err(runtime("metric keys do not overlap across runs"));
    }
    let means = (0..runs.len())
        .map(|r| {
            (!shared.is_empty())
                .then(|| shared.iter().map(|&k| cells[k][r].unwrap()).sum::<f64>() / shared.len() as f64)
        })
        .collect();
    Ok(Comparison {
        runs: runs.iter().map(|(n, _)| n.clone()).collect(),
        keys,
        cells,
        means,
        shared_keys: shared.len(),
    })
}

/// Subcommands of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainVocab,
    AlignVocab,
    Pretrain,
    Finetune,
    Evaluate,
    Predict,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainVocab => "train-vocab",
            Command::AlignVocab => "align-vocab",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Predict => "predict",
        }
    }
}

struct Recorder {
    manifest: RunManifest,
    out: PathBuf,
    started: Instant,
}

impl Recorder {
    fn new(command: Command, cfg: &PipelineConfig, seed: Option<u64>) -> Result<Self, PipelineError> {
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).map_err(runtime)?;
        Ok(Recorder {
            manifest: RunManifest {
                command: command.name().to_string(),
                seed,
                config: cfg.entries().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                ..RunManifest::default()
            },
            out,
            started: Instant::now(),
        })
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<(), PipelineError> {
        let digest = sha256_file(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        self.manifest
            .inputs
            .push((name.to_string(), path.to_path_buf(), digest));
        Ok(())
    }

    fn output(&mut self, name: &str, file: &str) -> PathBuf {
        let path = self.out.join(file);
        self.manifest.outputs.push((name.to_string(), path.clone()));
        path
    }

    fn write(&mut self, name: &str, file: &str, contents: &str) -> Result<PathBuf, PipelineError> {
        let path = self.output(name, file);
        std::fs::write(&path, contents).map_err(runtime)?;
        Ok(path)
    }

    fn metrics(&mut self, prefix: &str, report: &MetricReport) {
        for (k, v) in &report.values {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            self.manifest.metrics.push((key, *v));
        }
    }

    fn finish(mut self) -> Result<RunManifest, PipelineError> {
        self.manifest.wall_clock_ms = self.started.elapsed().as_millis();
        std::fs::write(self.out.join(MANIFEST_FILE), self.manifest.render()).map_err(runtime)?;
        Ok(self.manifest)
    }
}

/// Runs one subcommand, writing its artifacts and `manifest.txt` into the output directory.
pub fn run(command: Command, cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    match command {
        Command::TrainVocab => run_train_vocab(cfg),
        Command::AlignVocab => run_align_vocab(cfg),
        Command::Pretrain => run_pretrain(cfg),
        Command::Finetune => run_finetune(cfg),
        Command::Evaluate => run_evaluate(cfg),
        Command::Predict => run_predict(cfg),
    }
}

fn run_train_vocab(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let corpus_path = cfg.existing_path("vocab.corpus")?;
    let size = cfg
        .int("vocab.size")?
        .ok_or_else(|| config_err("vocab.size is required for train-vocab"))? as usize;
    let min_freq = cfg.int("vocab.min_pair_freq")?.unwrap_or(2);
    let mut rec = Recorder::new(Command::TrainVocab, cfg, cfg.int("seed")?)?;
    rec.input("corpus", &corpus_path)?;
    let text = std::fs::read_to_string(&corpus_path).map_err(runtime)?;
    let lines: Vec<String> = text.lines().map(String::from).collect();
    let opts = BpeOptions {
        lowercase: cfg.flag("vocab.lowercase"),
    };
    let vocab = train_bpe(&lines, size, min_freq, opts).map_err(runtime)?;
    let vpath = rec.output("vocab", "vocab.txt");
    let mpath = rec.output("merges", "merges.txt");
    vocab.save(&vpath, Some(&mpath)).map_err(runtime)?;
    rec.manifest.metrics.push(("vocab_size".into(), vocab.len() as f64));
    rec.manifest
        .metrics
        .push(("merges".into(), vocab.merges().len() as f64));
    rec.finish()
}

fn run_align_vocab(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let new_vocab = cfg.vocabulary()?;
    let base_vocab_path = cfg.existing_path("align.base_vocab")?;
    let base_ckpt = cfg.existing_path("align.base_checkpoint")?;
    let seed = cfg.seed()?;
    let mut rec = Recorder::new(Command::AlignVocab, cfg, Some(seed))?;
    rec.input("vocab", &cfg.existing_path("vocab.path")?)?;
    rec.input("base_vocab", &base_vocab_path)?;
    rec.input("base_checkpoint", &base_ckpt)?;
    let base_vocab = Vocabulary::load(&base_vocab_path, None).map_err(runtime)?;
    let base = BertModel::load(&base_ckpt).map_err(runtime)?;
    let word = base.params.get("embeddings.word").map_err(runtime)?;
    let aligned = align_vocabulary(&new_vocab, &base_vocab, word, seed).map_err(runtime)?;
    let bias = align_vector(
        &new_vocab,
        &base_vocab,
        base.params.get("mlm.bias").map_err(runtime)?.data(),
    )
    .map_err(runtime)?;
    let mut config = base.config;
    config.vocab_size = new_vocab.len();
    let mut model = BertModel::init(config, seed).map_err(runtime)?;
    for id in base.params.ids() {
        let name = base.params.name(id);
        if name != "embeddings.word" && name != "mlm.bias" {
            model.params.set(name, base.params.value(id).clone()).map_err(runtime)?;
        }
    }
    model.params.set("embeddings.word", aligned).map_err(runtime)?;
    model
        .params
        .set("mlm.bias", crate::numerics::Tensor::vector(&bias))
        .map_err(runtime)?;
    let path = rec.output("checkpoint", "aligned.ckpt");
    model.save(&path).map_err(runtime)?;
    rec.output("config", "aligned.ckpt.config");
    let plan = crate::tokenizer::alignment_plan(&new_vocab, &base_vocab);
    let count = |f: fn(&crate::tokenizer::RowSource) -> bool| plan.iter().filter(|r| f(r)).count() as f64;
    rec.manifest.metrics.push((
        "rows_copied".into(),
        count(|r| matches!(r, crate::tokenizer::RowSource::Copy(_))),
    ));
    rec.manifest.metrics.push((
        "rows_mean".into(),
        count(|r| matches!(r, crate::tokenizer::RowSource::Mean(_))),
    ));
    rec.manifest.metrics.push((
        "rows_fresh".into(),
        count(|r| matches!(r, crate::tokenizer::RowSource::Fresh)),
    ));
    rec.finish()
}

fn run_pretrain(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let seed = cfg.seed()?;
    let vocab = cfg.vocabulary()?;
    let corpus_path = cfg.existing_path("pretrain.corpus")?;
    let init = cfg.optional_path("pretrain.init")?;
    let model_cfg = cfg.model_config(vocab.len())?;
    let opts = PretrainOptions {
        policy: cfg.policy(seed)?,
        base_lr: cfg.float("pretrain.lr")?.unwrap_or(3e-4),
        warmup_steps: cfg.int("pretrain.warmup_steps")?.unwrap_or(2000),
        total_steps: cfg.int("pretrain.total_steps")?.unwrap_or(10_000),
        batch_size: cfg.int("pretrain.batch_size")?.unwrap_or(32) as usize,
        weight_decay: cfg.float("pretrain.weight_decay")?.unwrap_or(0.01),
        seed,
        checkpoint_every: cfg.int("pretrain.checkpoint_every")?.unwrap_or(0),
        checkpoint_dir: Some(cfg.out_dir().join("checkpoints")),
    };
    let mut rec = Recorder::new(Command::Pretrain, cfg, Some(seed))?;
    rec.input("vocab", &cfg.existing_path("vocab.path")?)?;
    rec.input("corpus", &corpus_path)?;
    let model = match &init {
        Some(path) => {
            rec.input("init", path)?;
            let m = BertModel::load(path).map_err(runtime)?;
            if m.config.vocab_size != vocab.len() {
                return Err(config_err("pretrain.init vocab_size does not match the vocabulary"));
            }
            m
        }
        None => BertModel::init(model_cfg, seed).map_err(runtime)?,
    };
    let docs = read_corpus(&corpus_path).map_err(runtime)?;
    let corpus = tokenize_corpus(&docs, &vocab);
    let result = pretrain(model, &corpus, &vocab, &opts).map_err(runtime)?;
    let ckpt = rec.output("checkpoint", "model.ckpt");
    result.model.save(&ckpt).map_err(runtime)?;
    rec.output("config", "model.ckpt.config");
    rec.write("loss_trace", "loss_trace.tsv", &render_loss_trace(&result.trace))?;
    for (i, p) in result.checkpoints.iter().enumerate() {
        rec.manifest.outputs.push((format!("checkpoint.{i}"), p.clone()));
    }
    if let Some(last) = result.trace.last() {
        rec.manifest.metrics.push(("final_mlm_loss".into(), last.mlm));
        rec.manifest.metrics.push(("final_nsp_loss".into(), last.nsp));
    }
    rec.manifest.metrics.push(("steps".into(), result.trace.len() as f64));
    rec.finish()
}

fn load_task_data(kind: TaskKind, path: &Path) -> Result<(TaskSpec, Vec<FinetuneExample>), PipelineError> {
    match kind.labeled_kind() {
        None => Ok(token_examples(&load_conll(path).map_err(runtime)?)),
        Some(lk) => labeled_examples(&load_labeled_text(path, lk).map_err(runtime)?).map_err(runtime),
    }
}

/// Metric reported as `<dataset>.score`, the per-dataset number a model comparison averages.
pub fn headline_metric(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Ner | TaskKind::Pico => "f1",
        TaskKind::Relation(_) | TaskKind::MultiLabel => "micro_f1",
        TaskKind::Qa => "accuracy",
        TaskKind::Similarity => "pearson",
    }
}

fn run_finetune(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let seed = cfg.seed()?;
    let vocab = cfg.vocabulary()?;
    let manifest_path = cfg.existing_path("finetune.manifest")?;
    let ckpt = cfg.existing_path("finetune.checkpoint")?;
    let wanted = cfg.require("finetune.dataset")?;
    let entries = load_manifest(&manifest_path).map_err(config_err)?;
    let selected: Vec<_> = if wanted == "*" {
        entries.iter().collect()
    } else {
        wanted
            .split(',')
            .map(|name| {
                let name = name.trim();
                entries
                    .iter()
                    .find(|e| e.name == name)
                    .ok_or_else(|| config_err(format!("dataset {name:?} is not in the manifest")))
            })
            .collect::<Result<_, _>>()?
    };
    if selected.is_empty() {
        return Err(config_err("finetune.dataset selects no datasets"));
    }
    for e in &selected {
        if !e.path.exists() {
            return Err(config_err(format!("dataset path {} does not exist", e.path.display())));
        }
    }
    let split_policy = cfg.get("finetune.split").unwrap_or("auto");
    if !matches!(split_policy, "auto" | "large" | "medium" | "small") {
        return Err(config_err(format!("finetune.split: unknown policy {split_policy:?}")));
    }
    let encoder = BertModel::load(&ckpt).map_err(runtime)?;
    let mut configs = Vec::new();
    for e in &selected {
        let defaults = hyperparameters_for(&e.name, e.kind);
        let fcfg = FinetuneConfig {
            batch_size: cfg
                .int("finetune.batch_size")?
                .map_or(defaults.batch_size, |v| v as usize),
            lr: cfg.float("finetune.lr")?.unwrap_or(defaults.lr),
            epochs: cfg.int("finetune.epochs")?.map_or(defaults.epochs, |v| v as usize),
            max_seq: cfg
                .int("finetune.max_seq")?
                .map_or(encoder.config.max_seq, |v| v as usize),
            seed,
            weight_decay: cfg.float("finetune.weight_decay")?.unwrap_or(0.01),
            train_similarity: cfg.flag("finetune.train_similarity"),
        };
        fcfg.validate().map_err(config_err)?;
        configs.push(fcfg);
    }

    let mut rec = Recorder::new(Command::Finetune, cfg, Some(seed))?;
    rec.input("vocab", &cfg.existing_path("vocab.path")?)?;
    rec.input("manifest", &manifest_path)?;
    rec.input("checkpoint", &ckpt)?;
    for (entry, fcfg) in selected.iter().zip(&configs) {
        let name = &entry.name;
        rec.input(&format!("dataset.{name}"), &entry.path)?;
        let (task, examples) = load_task_data(entry.kind, &entry.path)?;
        let policy = match split_policy {
            "large" => SplitPolicy::Large,
            "medium" => SplitPolicy::Medium,
            "small" => SplitPolicy::Small,
            _ => SplitPolicy::for_size(examples.len()),
        };
        let split = split_dataset(examples, policy, seed).map_err(runtime)?;
        let result = finetune(
            encoder.clone(),
            task.clone(),
            &split.train,
            &split.validation,
            &vocab,
            fcfg,
        )
        .map_err(runtime)?;
        let ckpt_out = rec.output(&format!("{name}.checkpoint"), &format!("{name}.task.ckpt"));
        result.model.save(&ckpt_out).map_err(runtime)?;
        rec.output(&format!("{name}.config"), &format!("{name}.task.ckpt.config"));
        rec.output(&format!("{name}.task"), &format!("{name}.task.ckpt.task"));
        rec.write(
            &format!("{name}.metric_trace"),
            &format!("{name}.metric_trace.tsv"),
            &render_metric_trace(&result.trace),
        )?;
        let preds = predict(&result.model, &vocab, &split.test, fcfg.max_seq).map_err(runtime)?;
        let text = render_predictions(&task, &split.test, &preds.predictions).map_err(runtime)?;
        rec.write(
            &format!("{name}.predictions"),
            &format!("{name}.test_predictions.tsv"),
            &text,
        )?;
        let report = score_prediction_file(&task, &text).map_err(runtime)?;
        rec.write(
            &format!("{name}.report"),
            &format!("{name}.test_report.txt"),
            &report.render(),
        )?;
        rec.metrics(name, &report);
        if let Some(v) = report.get(headline_metric(entry.kind)) {
            rec.manifest.metrics.push((format!("{name}.score"), v));
        }
    }
    rec.finish()
}

fn task_from_name(kind: &str, labels: Vec<String>) -> Result<TaskSpec, PipelineError> {
    Ok(match kind {
        "token" | "ner" | "pico" => TaskSpec::TokenClassification(labels),
        "sequence" | "relation" => TaskSpec::SequenceClassification(labels),
        "qa" => TaskSpec::QaClassification(labels),
        "multilabel" => TaskSpec::MultiLabel(labels),
        "similarity" => TaskSpec::Similarity,
        other => return Err(config_err(format!("unknown task {other:?}"))),
    })
}

/// Labels seen in the gold and predicted columns of a prediction file.
fn labels_in_prediction_file(kind: &str, text: &str) -> Vec<String> {
    let mut set = BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if line.starts_with(PREDICTION_LABELS_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            continue;
        }
        for col in [f[1], f[2]] {
            if kind == "multilabel" {
                set.extend(col.split(',').filter(|s| !s.is_empty()).map(String::from));
            } else {
                set.insert(col.to_string());
            }
        }
    }
    set.into_iter().collect()
}

fn run_evaluate(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let path = cfg.existing_path("evaluate.predictions")?;
    let kind = cfg.require("evaluate.task")?.to_string();
    let text = std::fs::read_to_string(&path).map_err(runtime)?;
    let labels = match cfg.get("evaluate.labels") {
        Some(l) => l
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => prediction_file_labels(&text).unwrap_or_else(|| labels_in_prediction_file(&kind, &text)),
    };
    let task = task_from_name(&kind, labels)?;
    task.validate().map_err(config_err)?;
    let mut rec = Recorder::new(Command::Evaluate, cfg, cfg.int("seed")?)?;
    rec.input("predictions", &path)?;
    let report = score_prediction_file(&task, &text).map_err(runtime)?;
    rec.write("report", "report.txt", &report.render())?;
    rec.metrics("", &report);
    rec.finish()
}

fn run_predict(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let vocab = cfg.vocabulary()?;
    let ckpt = cfg.existing_path("predict.checkpoint")?;
    let input = cfg.existing_path("predict.input")?;
    let kind_name = cfg.require("predict.kind")?;
    let kind = TaskKind::parse(kind_name).ok_or_else(|| config_err(format!("unknown predict.kind {kind_name:?}")))?;
    let mut rec = Recorder::new(Command::Predict, cfg, cfg.int("seed")?)?;
    rec.input("vocab", &cfg.existing_path("vocab.path")?)?;
    rec.input("checkpoint", &ckpt)?;
    rec.input("input", &input)?;
    let tm = TaskModel::load(&ckpt).map_err(runtime)?;
    let (_, examples) = load_task_data(kind, &input)?;
    // Re-resolve gold labels against the model's own label ids.
    let examples = remap_labels(&tm.task, kind, &input, examples)?;
    let max_seq = tm.encoder.config.max_seq;
    let preds = predict(&tm, &vocab, &examples, max_seq).map_err(runtime)?;
    let text = render_predictions(&tm.task, &examples, &preds.predictions).map_err(runtime)?;
    rec.write("predictions", "predictions.tsv", &text)?;
    let report = score_prediction_file(&tm.task, &text).map_err(runtime)?;
    rec.write("report", "report.txt", &report.render())?;
    rec.metrics("", &report);
    rec.manifest.metrics.push(("truncated".into(), preds.truncated as f64));
    rec.finish()
}

fn remap_labels(
    task: &TaskSpec,
    kind: TaskKind,
    path: &Path,
    examples: Vec<FinetuneExample>,
) -> Result<Vec<FinetuneExample>, PipelineError> {
    let (file_task, _) = load_task_data(kind, path)?;
    let file_labels = file_task.labels();
    let map = |id: usize| task.label_id(&file_labels[id]).map_err(runtime);
    examples
        .into_iter()
        .map(|e| {
            Ok(match e {
                FinetuneExample::Tokens { words, tags } => FinetuneExample::Tokens {
                    words,
                    tags: tags.into_iter().map(map).collect::<Result<_, _>>()?,
                },
                FinetuneExample::Sequence { a, b, label } => FinetuneExample::Sequence {
                    a,
                    b,
                    label: map(label)?,
                },
                FinetuneExample::MultiLabel { text, labels } => {
                    let mut ind = vec![false; task.head_width()];
                    for (i, on) in labels.into_iter().enumerate() {
                        if on {
                            ind[map(i)?] = true;
                        }
                    }
                    FinetuneExample::MultiLabel { text, labels: ind }
                }
                pair @ FinetuneExample::Pair { .. } => pair,
            })
        })
        .collect()
}

/// Loads manifests and compares their metric summaries; run names are the file paths.
/// With `metric`, only keys equal to it or ending in `.<metric>` are kept.
pub fn compare_manifest_files(paths: &[PathBuf], metric: Option<&str>) -> Result<Comparison, PipelineError> {
    let keep = |k: &str| metric.is_none_or(|m| k == m || k.ends_with(&format!(".{m}")));
    let runs = paths
        .iter()
        .map(|p| {
            let mut metrics = RunManifest::load(p)?.metrics;
            metrics.retain(|(k, _)| keep(k));
            Ok((p.display().to_string(), metrics))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    compare_runs(&runs)
}

/// Reads a checkpoint's tensor names and shapes, for inspection.
pub fn describe_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>)>, PipelineError> {
    Ok(load_tensors(path)
        .map_err(runtime)?
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_and_mistyped_keys() {
        assert!(PipelineConfig::parse("colour = blue\n").is_err());
        assert!(PipelineConfig::parse("model.hidden = many\n").is_err());
        let mut c = PipelineConfig::parse("seed = 3\nmodel.hidden = 32\n").unwrap();
        c.apply_override("model.layers=4").unwrap();
        assert_eq!(c.get("model.layers"), Some("4"));
        assert_eq!(c.get("model.heads"), Some("2"));
        assert!(c.apply_override("nonsense").is_err());
        assert_eq!(PipelineConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn comparison_mechanics() {
        let a = ("a".to_string(), vec![("x".to_string(), 1.0), ("y".to_string(), 3.0)]);
        let b = ("b".to_string(), vec![("x".to_string(), 2.0), ("y".to_string(), 5.0)]);
        let c = compare_runs(&[a.clone(), b]).unwrap();
        assert_eq!(c.means, vec![Some(2.0), Some(3.5)]);
        assert_eq!(c.mean_delta(1), Some(1.5));
        assert_eq!(c.delta(1, 1), Some(2.0));
        let disjoint = ("d".to_string(), vec![("z".to_string(), 1.0)]);
        assert!(compare_runs(&[a, disjoint]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = RunManifest {
            command: "evaluate".into(),
            seed: Some(4),
            config: vec![("seed".into(), "4".into())],
            inputs: vec![("predictions".into(), PathBuf::from("p.tsv"), "ab".into())],
            outputs: vec![("report".into(), PathBuf::from("r.txt"))],
            wall_clock_ms: 12,
            metrics: vec![("f1".into(), 0.5)],
        };
        assert_eq!(RunManifest::parse(&m.render()).unwrap(), m);
    }
}
