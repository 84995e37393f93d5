//! Hyperparameters of the model, the pretraining objective and downstream runs.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What stands in for tokens that are not observed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    /// Mixture of prototypes weighted by the patient's assignment.
    Prototype,
    /// Zero tokens.
    Zero,
}

/// Which fused tokens a patient representation averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Tokens of observed modalities only.
    Observed,
    /// Every token, imputed ones included.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding widths of the inputs, `I, R, T`.
    pub input_dims: [usize; 3],
    pub t_q: usize,
    pub d: usize,
    pub n_heads: usize,
    /// FFN hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    /// Output width of the projection heads.
    pub proj_dim: usize,
    pub k_c: usize,
    /// Temperature of the prototype assignment.
    pub tau: f64,
    pub refine_depth: usize,
    /// Backbone blocks, alternating plain and mixture-of-experts.
    pub depth: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub segment_embedding: bool,
    /// Stand-in for naturally missing modalities.
    pub missing_fill: Fill,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [32, 64, 48],
            t_q: 8,
            d: 64,
            n_heads: 4,
            ffn_mult: 2,
            proj_dim: 32,
            k_c: 128,
            tau: 0.07,
            refine_depth: 1,
            depth: 2,
            n_experts: 4,
            top_k: 2,
            segment_embedding: true,
            missing_fill: Fill::Prototype,
            pooling: Pooling::Observed,
        }
    }
}

fn invalid(msg: String) -> Error {
    Error::InvalidConfig(msg)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.iter().any(|&d| d == 0) {
            return Err(invalid(format!("input widths must be positive: {:?}", self.input_dims)));
        }
        if self.t_q == 0 || self.d == 0 || self.proj_dim == 0 || self.ffn_mult == 0 {
            return Err(invalid(String::from("t_q, d, proj_dim and ffn_mult must be positive")));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(invalid(format!("d={} is not divisible by n_heads={}", self.d, self.n_heads)));
        }
        if self.k_c == 0 {
            return Err(invalid(String::from("k_c must be at least 1")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.depth % 2 != 0 {
            return Err(invalid(format!("depth must be even (plain + expert pairs), got {}", self.depth)));
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(invalid(format!("need 1 <= top_k={} <= n_experts={}", self.top_k, self.n_experts)));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_mod: f64,
    pub p_tok: f64,
    pub k_s: usize,
    pub alpha: f64,
    /// Replacement for dropped tokens.
    pub fill: Fill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_mod: 0.2, p_tok: 0.3, k_s: 8, alpha: 50.0, fill: Fill::Prototype }
    }
}

impl AugmentConfig {
    pub fn validate(&self, k_c: usize) -> Result<()> {
        for (name, p) in [("p_mod", self.p_mod), ("p_tok", self.p_tok)] {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid(format!("{} must lie in [0, 1), got {}", name, p)));
            }
        }
        if self.k_s == 0 || self.k_s > k_c {
            return Err(invalid(format!("k_s={} must lie in [1, k_c={}]", self.k_s, k_c)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the alignment term; the fusion term gets `1 - lambda`.
    pub lambda: f64,
    pub lambda_router: f64,
    pub align_temp: f64,
    pub fusion_temp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.5, lambda_router: 0.01, align_temp: 0.1, fusion_temp: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.lambda_router >= 0.0 && self.lambda_router.is_finite()) {
            return Err(invalid(format!("lambda_router must be nonnegative, got {}", self.lambda_router)));
        }
        if !(self.align_temp > 0.0 && self.fusion_temp > 0.0) {
            return Err(invalid(String::from("contrastive temperatures must be positive")));
        }
        Ok(())
    }
}
