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

//! BERT-style encoder with MLM, NSP and sentence-embedding outputs.

mod config;
mod encoder;

use thiserror::Error;

pub use config::{ModelConfig, MAX_SEQ_LIMIT};
pub use encoder::{
    config_path, embed, encoder_forward, mlm_logits, mlm_logits_at, nsp_logits, pooling_mask, sentence_embedding,
    BertModel, EncoderOutput, ForwardMode, TokenBatch, INIT_STD,
};

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
