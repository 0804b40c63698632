//! Run configuration. Defaults follow the reference training setup:
//! `d_v = d_c = 96`, `d_t = 512`, batch 128, `λ = 1`, lr `1e-5`, 20 epochs,
//! 40-token text.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    /// Width of the raw visual encoder hidden states.
    pub d_c: usize,
    /// Width of projected visual features.
    pub d_v: usize,
    /// Width of text hidden states.
    pub d_t: usize,
    /// Common width of the cross-modal unit; `None` means `d_c`.
    pub cmfi_dim: Option<usize>,
    /// Weight of the three per-unit losses.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Divides S_V, S_T and S_C before the softmax.
    pub temperature: f64,
    /// Recorded for the exporter; the engine never truncates text itself.
    pub max_text_len: usize,
    pub layer_norm_eps: f64,
    /// Number of affine layers in the visual global MLP (tanh between).
    pub mlp_depth: usize,
    /// Share head weights between mention and entity images.
    pub tie_heads: bool,
    /// L2-normalise both operands of the VFI and CMFI final dots.
    pub normalize_scores: bool,
    /// Global-norm gradient clip, off when `None`.
    pub grad_clip: Option<f64>,
    /// Upper bound on mention-candidate pairs scored per evaluation graph.
    pub eval_pair_budget: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            d_c: 96,
            d_v: 96,
            d_t: 512,
            cmfi_dim: None,
            lambda: 1.0,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            temperature: 1.0,
            max_text_len: 40,
            layer_norm_eps: 1e-5,
            mlp_depth: 2,
            tie_heads: true,
            normalize_scores: false,
            grad_clip: None,
            eval_pair_budget: 8192,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

impl HyperConfig {
    pub fn cmfi_width(&self) -> usize {
        self.cmfi_dim.unwrap_or(self.d_c)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.to_string()));
        if self.d_c == 0 || self.d_v == 0 || self.d_t == 0 || self.cmfi_width() == 0 {
            return bad("dimensions must be positive");
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for in-batch negatives");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be > 0");
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be > 0");
        }
        if self.lr.is_nan() || self.lr < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer hyperparameters out of range");
        }
        if self.mlp_depth == 0 {
            return bad("mlp_depth must be >= 1");
        }
        if self.eval_pair_budget == 0 {
            return bad("eval_pair_budget must be >= 1");
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad("grad_clip must be > 0");
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
