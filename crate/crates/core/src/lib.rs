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

//! Desk-scale domain-adaptive BERT pipeline.
//!
//! The crate covers the whole path from raw biomedical text to task metrics:
//!
//! * [`tokenizer`]: learn a BPE vocabulary, encode with `##` continuation
//!   pieces, and transfer embeddings from a base vocabulary.
//! * [`numerics`]: `f64` tensors, a reverse-mode tape, Adam with warmup,
//!   finite-difference gradient checks and checkpoint files.
//! * [`model`]: the BERT-style encoder with MLM, NSP and sentence-embedding
//!   outputs.
//! * [`pretraining`]: sentence-pair construction, the masking policy and the
//!   MLM+NSP training loop.
//! * [`datasets`]: CoNLL and TSV loaders for the downstream task families and
//!   split policies.
//! * [`finetune`]: task heads, label alignment, training and prediction.
//! * [`metrics`]: entity F1, micro/macro F1, accuracy, Pearson and cosine.
//! * [`pipeline`]: config files, run manifests and the commands behind the
//!   `medbert` binary.
//!
//! Runnable walkthroughs of each stage live in the crate's `examples/`
//! directory.

pub mod datasets;
pub mod finetune;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pretraining;
pub mod seeds;
pub mod tokenizer;
