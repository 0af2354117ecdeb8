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

//! Tensors, reverse-mode differentiation, Adam and gradient checking.

mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_into, load_tensors, save_store};
pub use gradcheck::{check_gradients, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{adam_step, lr_schedule, AdamConfig, OptimizerState};
pub use params::{Initializer, ParamId, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("parameter {0:?} registered twice")]
    DuplicateParameter(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("backward called on a value with no recorded computation")]
    NoGraph,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
