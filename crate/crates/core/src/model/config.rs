use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Precision;
use crate::pit::HeadMode;

/// How attention and MLP branches combine in a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStyle {
    Sequential,
    #[default]
    Parallel,
}

impl BlockStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockStyle::Sequential => "sequential",
            BlockStyle::Parallel => "parallel",
        }
    }
}

impl fmt::Display for BlockStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" => Ok(BlockStyle::Sequential),
            "parallel" => Ok(BlockStyle::Parallel),
            _ => Err(Error::Config(format!("unknown block style {s:?} (expected sequential or parallel)"))),
        }
    }
}

pub const ROPE_BASE: f64 = 10000.0;
pub const NORM_EPS: f64 = 1e-5;

/// `round_up(8/3·d, multiple)`.
pub fn default_d_ff(d_model: usize, multiple: usize) -> usize {
    let raw = (8 * d_model).div_ceil(3);
    let m = multiple.max(1);
    raw.div_ceil(m) * m
}

/// Shape of a [`ToyTransformer`](super::ToyTransformer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub head_dim: usize,
    /// Query heads. Normally `d_model / head_dim`.
    pub n_heads: usize,
    /// Key/value heads; `n_heads` must be a multiple.
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub context: usize,
    pub block_style: BlockStyle,
    pub head_mode: HeadMode,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    /// Standard shape: `n_heads = d/head_dim`, `n_kv = n_heads/gqa_ratio`,
    /// `d_ff` rounded up from `8/3·d` to a multiple of 64.
    pub fn new(n_layers: usize, d_model: usize, head_dim: usize, gqa_ratio: usize, vocab: usize, context: usize) -> Result<Self> {
        if head_dim == 0 || d_model % head_dim != 0 {
            return Err(Error::Config(format!("d_model {d_model} is not a multiple of head_dim {head_dim}")));
        }
        let n_heads = d_model / head_dim;
        if gqa_ratio == 0 || n_heads % gqa_ratio != 0 {
            return Err(Error::Config(format!("{n_heads} heads not divisible by gqa_ratio {gqa_ratio}")));
        }
        let cfg = Self {
            n_layers,
            d_model,
            head_dim,
            n_heads,
            n_kv_heads: n_heads / gqa_ratio,
            d_ff: default_d_ff(d_model, 64),
            vocab,
            context,
            block_style: BlockStyle::Parallel,
            head_mode: HeadMode::Pit,
            precision: Precision::F32,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_head_mode(mut self, mode: HeadMode) -> Self {
        self.head_mode = mode;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn with_block_style(mut self, style: BlockStyle) -> Self {
        self.block_style = style;
        self
    }

    /// Width of the concatenated query heads.
    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// `d_kv = n_kv·head_dim`.
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn gqa_ratio(&self) -> usize {
        self.n_heads / self.n_kv_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.vocab == 0 || self.context == 0 {
            return fail("d_model, vocab and context must be positive".into());
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return fail(format!("head_dim {} must be positive and even", self.head_dim));
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!("{} query heads not divisible into {} kv heads", self.n_heads, self.n_kv_heads));
        }
        if self.d_ff < self.d_model {
            return fail(format!("d_ff {} smaller than d_model {}", self.d_ff, self.d_model));
        }
        if self.vocab <= self.d_model {
            return fail(format!("vocab {} must exceed d_model {}", self.vocab, self.d_model));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d_ff_rounding() {
        assert_eq!(default_d_ff(768, 256), 2048);
        assert_eq!(default_d_ff(1024, 256), 2816);
        assert_eq!(default_d_ff(1280, 256), 3584);
        assert_eq!(default_d_ff(16, 64), 64);
        assert_eq!(default_d_ff(64, 64), 192);
    }

    #[test]
    fn shape_rules() {
        let c = ModelConfig::new(2, 64, 16, 4, 256, 64).unwrap();
        assert_eq!((c.n_heads, c.n_kv_heads, c.kv_width()), (4, 1, 16));
        assert!(ModelConfig::new(2, 60, 16, 1, 256, 8).is_err());
        assert!(ModelConfig::new(2, 64, 16, 3, 256, 8).is_err());
        assert!(ModelConfig::new(2, 64, 16, 4, 64, 8).is_err());
    }
}
