use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ToyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderDecoder,
    PrefixLmDecoder,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::EncoderDecoder, Arch::PrefixLmDecoder];
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::EncoderDecoder => "encdec",
            Arch::PrefixLmDecoder => "prefixdec",
        })
    }
}

impl FromStr for Arch {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "encdec" | "encoder_decoder" => Ok(Arch::EncoderDecoder),
            "prefixdec" | "prefix_lm_decoder" => Ok(Arch::PrefixLmDecoder),
            other => Err(ToyError::Config(format!("unknown arch {other:?} (expected encdec or prefixdec)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the gated feed-forward block.
    pub d_ff: usize,
    /// Longest sequence a forward pass accepts, per stack.
    pub max_len: usize,
    pub arch: Arch,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: 259,
            d_model: 64,
            layers: 2,
            heads: 2,
            d_ff: 128,
            max_len: 1024,
            arch: Arch::EncoderDecoder,
            num_buckets: 32,
            max_distance: 128,
            seed: 7,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 4,
        }
    }
}

impl ToyConfig {
    pub fn check(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.layers == 0 {
            return bad("d_model, heads, d_ff and layers must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ToyError::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.num_buckets < 4 || !self.num_buckets.is_multiple_of(2) {
            return bad("num_buckets must be even and at least 4");
        }
        if self.max_distance < self.num_buckets / 2 {
            return bad("max_distance must be at least num_buckets / 2");
        }
        if self.max_len == 0 || self.batch_size == 0 {
            return bad("max_len and batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}
