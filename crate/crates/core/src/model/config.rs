use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl ModelConfig {
    /// 2 layers, 4 heads, width 64, byte vocabulary plus four specials.
    pub fn micro() -> Self {
        Self { vocab_size: 260, context_length: 256, n_layers: 2, n_heads: 4, hidden_dim: 64, mlp_dim: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::model::tokenizer::FIRST_CONTROL_ID {
            return Err(invalid(format!(
                "vocab_size {} leaves no room for the byte and special ids",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("context_length", self.context_length),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden_dim", self.hidden_dim),
            ("mlp_dim", self.mlp_dim),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(invalid(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        Ok(())
    }
}
