use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder. Defaults are a 2-block, 64-wide toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_input_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            num_blocks: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_input_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.num_blocks,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_input_len < 2 {
            return Err(Error::InvalidConfig("max_input_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}
