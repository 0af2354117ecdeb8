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

use std::path::Path;

use super::ModelError;
use crate::kv::KvDoc;

/// Encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_seq: usize,
    pub dropout: f64,
    pub type_vocab: usize,
}

pub const MAX_SEQ_LIMIT: usize = 512;

impl ModelConfig {
    /// Small configuration with intermediate size `4·hidden` and dropout 0.1.
    pub fn small(vocab_size: usize, hidden: usize, layers: usize, heads: usize, max_seq: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden,
            layers,
            heads,
            intermediate: 4 * hidden,
            max_seq,
            dropout: 0.1,
            type_vocab: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.intermediate == 0 {
            return bad("vocab_size, hidden, layers, heads and intermediate must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if !(2..=MAX_SEQ_LIMIT).contains(&self.max_seq) {
            return bad(format!("max_seq {} outside 2..={MAX_SEQ_LIMIT}", self.max_seq));
        }
        if self.type_vocab != 2 {
            return bad(format!("type_vocab must be 2, got {}", self.type_vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Scalar parameter count of encoder, pooler, MLM and NSP heads.
    pub fn parameter_count(&self) -> usize {
        let (v, h, i, t) = (self.vocab_size, self.hidden, self.intermediate, self.max_seq);
        let embeddings = v * h + t * h + self.type_vocab * h + 2 * h;
        let layer = 4 * (h * h + h) + 2 * h + (h * i + i) + (i * h + h) + 2 * h;
        let pooler = h * h + h;
        let mlm = h * h + h + 2 * h + v;
        let nsp = 2 * h + 2;
        embeddings + self.layers * layer + pooler + mlm + nsp
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("vocab_size", self.vocab_size.to_string());
        d.set("hidden", self.hidden.to_string());
        d.set("layers", self.layers.to_string());
        d.set("heads", self.heads.to_string());
        d.set("intermediate", self.intermediate.to_string());
        d.set("max_seq", self.max_seq.to_string());
        d.set("dropout", self.dropout.to_string());
        d.set("type_vocab", self.type_vocab.to_string());
        d
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, ModelError> {
        const KEYS: [&str; 8] = [
            "vocab_size",
            "hidden",
            "layers",
            "heads",
            "intermediate",
            "max_seq",
            "dropout",
            "type_vocab",
        ];
        if let Some(k) = doc.keys().find(|k| !KEYS.contains(k)) {
            return Err(ModelError::InvalidConfig(format!("unknown model config key {k:?}")));
        }
        let get = |k: &str| -> Result<&str, ModelError> {
            doc.get(k)
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing model config key {k:?}")))
        };
        let int = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("{k} must be a non-negative integer")))
        };
        let cfg = ModelConfig {
            vocab_size: int("vocab_size")?,
            hidden: int("hidden")?,
            layers: int("layers")?,
            heads: int("heads")?,
            intermediate: int("intermediate")?,
            max_seq: int("max_seq")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| ModelError::InvalidConfig("dropout must be a number".into()))?,
            type_vocab: int("type_vocab")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_kv().render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let doc = KvDoc::parse(&text).map_err(|e| ModelError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_kv(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = ModelConfig::small(50, 8, 2, 2, 16);
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { heads: 3, ..ok }.validate().is_err());
        assert!(ModelConfig { max_seq: 513, ..ok }.validate().is_err());
        assert!(ModelConfig { max_seq: 1, ..ok }.validate().is_err());
        assert!(ModelConfig { layers: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig {
            dropout: 0.25,
            ..ModelConfig::small(123, 16, 3, 4, 64)
        };
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut doc = c.to_kv();
        doc.set("colour", "blue");
        assert!(ModelConfig::from_kv(&doc).is_err());
    }
}
