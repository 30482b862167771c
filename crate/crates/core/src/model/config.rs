use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::butterfly;
use crate::error::{Error, Result};
use crate::moe::{MoEConfig, DEFAULT_LAMBDA_BALANCE};
use crate::tasks::Task;

/// Which feed-forward sublayer each transformer block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    StandardMoe,
    ButterflyMoe,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::StandardMoe => "standard_moe",
            Variant::ButterflyMoe => "butterfly_moe",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Dense, Variant::StandardMoe, Variant::ButterflyMoe]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (expected dense, standard_moe or butterfly_moe)")))
    }
}

/// Model shape, optimiser and run settings.
///
/// `seq_len` is the context length seen by the model: a task sample with
/// input length `seq_len / 2` packs to `seq_len + 1` tokens, the last of
/// which is only ever a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub k: usize,
    pub layers_in: usize,
    pub layers_out: usize,
    pub variant: Variant,
    /// Hidden width of the dense baseline; 0 matches the butterfly sublayer's
    /// parameter count.
    pub dense_hidden: usize,
    pub lambda_balance: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub batch: usize,
    pub epochs: usize,
    pub task: Task,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 32,
            seq_len: 16,
            d_model: 64,
            d_ff: 128,
            n_blocks: 2,
            n_heads: 2,
            n_experts: 8,
            k: 2,
            layers_in: 6,
            layers_out: 7,
            variant: Variant::ButterflyMoe,
            dense_hidden: 0,
            lambda_balance: DEFAULT_LAMBDA_BALANCE,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch: 64,
            epochs: 20,
            task: Task::Copy,
            train_samples: 4096,
            eval_samples: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |name: &str, d: usize| {
            butterfly::log2_exact(d)
                .map(|_| ())
                .ok_or_else(|| Error::config(format!("{name} = {d} is not a power of two")))
        };
        pow2("d_model", self.d_model)?;
        pow2("d_ff", self.d_ff)?;
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.seq_len < 2 || !self.seq_len.is_multiple_of(2) {
            return Err(Error::config(format!("seq_len must be even and at least 2, got {}", self.seq_len)));
        }
        if self.n_blocks == 0 || self.batch == 0 {
            return Err(Error::config("n_blocks and batch must be positive"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must hold the separator and at least one numeric token"));
        }
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay), ("grad_clip", self.grad_clip)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.variant != Variant::Dense {
            self.moe().validate()?;
        }
        Ok(())
    }

    /// Input length of one task sample.
    pub fn task_len(&self) -> usize {
        self.seq_len / 2
    }

    pub fn moe(&self) -> MoEConfig {
        MoEConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_experts: self.n_experts,
            k: self.k,
            layers_in: self.layers_in,
            layers_out: self.layers_out,
            lambda_balance: self.lambda_balance,
        }
    }

    /// Parameters of one butterfly feed-forward sublayer: gate, substrate,
    /// rotation angles and the shared down-projection.
    pub fn butterfly_ffn_params(&self) -> usize {
        let moe = self.moe();
        self.d_model * self.n_experts + 2 * self.d_ff * self.d_model + self.n_experts * moe.angles_per_expert()
    }

    /// Hidden width of the dense baseline.
    pub fn resolved_dense_hidden(&self) -> usize {
        if self.dense_hidden > 0 {
            self.dense_hidden
        } else {
            ((self.butterfly_ffn_params() as f64 / (2 * self.d_model) as f64).round() as usize).max(1)
        }
    }
}
