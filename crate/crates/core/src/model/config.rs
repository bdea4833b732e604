use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy dual encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Transformer layers per encoder.
    pub layers: usize,
    pub d_vision: usize,
    pub d_text: usize,
    /// Vision tokens per image, including the class token at position 0.
    pub p_vision: usize,
    /// Text tokens per prompt; the last one is the summary token.
    pub p_text: usize,
    pub heads: usize,
    pub hidden_mult: usize,
    /// Shared embedding width after the projection heads.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_vision: 64,
            d_text: 64,
            p_vision: 17,
            p_text: 8,
            heads: 4,
            hidden_mult: 4,
            embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn summary_token(&self) -> usize {
        self.p_text - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.layers,
            self.d_vision,
            self.d_text,
            self.p_vision,
            self.p_text,
            self.heads,
            self.hidden_mult,
            self.embed_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("zero-sized field in {self:?}")));
        }
        if self.d_vision % self.heads != 0 || self.d_text % self.heads != 0 {
            return Err(Error::Config(format!(
                "widths {}/{} not divisible by {} heads",
                self.d_vision, self.d_text, self.heads
            )));
        }
        if self.p_vision < 2 {
            return Err(Error::Config(
                "need a class token plus at least one patch".into(),
            ));
        }
        if self.p_text < 6 {
            return Err(Error::Config(
                "prompts need 4 template tokens, a class token and a summary token".into(),
            ));
        }
        Ok(())
    }
}
