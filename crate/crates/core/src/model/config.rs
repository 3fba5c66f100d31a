use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;

/// Shape of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub width: usize,
    pub ffn: usize,
    pub heads: usize,
}

impl StackConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.width == 0 || self.ffn == 0 || self.heads == 0 {
            return Err(Error::invalid(format!("{name}: width, ffn and heads must be positive")));
        }
        if self.width % self.heads != 0 || (self.width / self.heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "{name}: width {} must split into {} heads of even size",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels per continuous token.
    pub token_dim: usize,
    /// Tokens per patch.
    pub patch_size: usize,
    /// Historical patches shown to the diffusion decoder.
    pub history: usize,
    pub text_vocab: usize,
    pub encoder: StackConfig,
    pub lm: StackConfig,
    pub locdit: StackConfig,
    /// Sinusoidal features fed to the time embedding.
    pub time_features: usize,
    pub stop_threshold: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 8,
            patch_size: 4,
            history: 1,
            text_vocab: 10,
            encoder: StackConfig {
                layers: 2,
                width: 32,
                ffn: 64,
                heads: 2,
            },
            lm: StackConfig {
                layers: 4,
                width: 128,
                ffn: 192,
                heads: 4,
            },
            locdit: StackConfig {
                layers: 2,
                width: 64,
                ffn: 192,
                heads: 2,
            },
            time_features: 32,
            stop_threshold: 0.5,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.patch_size == 0 || self.text_vocab == 0 {
            return Err(Error::invalid("token_dim, patch_size and text_vocab must be positive"));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::invalid("time_features must be a positive even number"));
        }
        if !(0.0..=1.0).contains(&self.stop_threshold) {
            return Err(Error::invalid("stop_threshold must lie in [0, 1]"));
        }
        self.encoder.validate("encoder")?;
        self.lm.validate("lm")?;
        self.locdit.validate("locdit")?;
        Ok(())
    }

    /// Tokens in one diffusion-decoder segment: condition, history, target.
    pub fn locdit_len(&self) -> usize {
        1 + self.history * self.patch_size + self.patch_size
    }
}

#[cfg(test)]
pub(crate) fn tiny() -> ModelConfig {
    let s = StackConfig {
        layers: 1,
        width: 8,
        ffn: 12,
        heads: 2,
    };
    ModelConfig {
        token_dim: 3,
        patch_size: 2,
        text_vocab: 5,
        encoder: s,
        lm: s,
        locdit: s,
        time_features: 4,
        ..ModelConfig::default()
    }
}
