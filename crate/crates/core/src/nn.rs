//! Layers built from the tape primitives.

use alloc::format;
use alloc::vec;

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::error::Result;
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Affine map with the weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weights from N(0, 1/fan_in), bias zero.
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = 1.0 / math::sqrt(fan_in as f64);
        let w = ps.add_normal(&format!("{}.w", name), &[fan_in, fan_out], std, rng);
        let b = bias.then(|| ps.add(&format!("{}.b", name), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = self.b.map(|b| tape.param(ps, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = ps.add(&format!("{}.gamma", name), Tensor::filled(&[dim], 1.0));
        let beta = ps.add(&format!("{}.beta", name), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        let up = Linear::new(ps, &format!("{}.up", name), dim, hidden, true, rng);
        let down = Linear::new(ps, &format!("{}.down", name), hidden, out, true, rng);
        Self { up, down }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, ps, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, ps, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, n_heads: usize, rng: &mut Rng) -> Self {
        Self {
            wq: Linear::new(ps, &format!("{}.q", name), dim, dim, true, rng),
            // a key bias shifts every score of a query equally, so softmax cancels it
            wk: Linear::new(ps, &format!("{}.k", name), dim, dim, false, rng),
            wv: Linear::new(ps, &format!("{}.v", name), dim, dim, true, rng),
            wo: Linear::new(ps, &format!("{}.o", name), dim, dim, true, rng),
            n_heads,
        }
    }

    /// Attention from already-projected queries to raw key/value inputs.
    pub fn attend_projected(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        q: Var,
        kv: Var,
        layout: &AttentionLayout,
    ) -> Result<Var> {
        let k = self.wk.forward(tape, ps, kv)?;
        let v = self.wv.forward(tape, ps, kv)?;
        let a = tape.attention(q, k, v, layout)?;
        self.wo.forward(tape, ps, a)
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, xq: Var, xkv: Var, layout: &AttentionLayout) -> Result<Var> {
        let q = self.wq.forward(tape, ps, xq)?;
        self.attend_projected(tape, ps, q, xkv, layout)
    }
}

/// Pre-norm self-attention block: `x + Attn(LN x)`, then `+ FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, n_heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{}.ln1", name), dim),
            attn: MultiHeadAttention::new(ps, &format!("{}.attn", name), dim, n_heads, rng),
            ln2: LayerNorm::new(ps, &format!("{}.ln2", name), dim),
            ffn: Ffn::new(ps, &format!("{}.ffn", name), dim, hidden, dim, rng),
        }
    }

    /// Self-attention sublayer only.
    pub fn attn_sublayer(&self, tape: &mut Tape, ps: &ParamStore, x: Var, layout: &AttentionLayout) -> Result<Var> {
        let h = self.ln1.forward(tape, ps, x)?;
        let a = self.attn.forward(tape, ps, h, h, layout)?;
        tape.add(x, a)
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var, layout: &AttentionLayout) -> Result<Var> {
        let x = self.attn_sublayer(tape, ps, x, layout)?;
        let h = self.ln2.forward(tape, ps, x)?;
        let f = self.ffn.forward(tape, ps, h)?;
        tape.add(x, f)
    }
}

/// Mean over rows of a `[n, c]` tensor, as a `[1, c]` tensor.
pub fn mean_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    tape.group_mean(x, n)
}

/// Zero tensor of the given shape as a constant.
pub fn zeros(tape: &mut Tape, shape: &[usize]) -> Var {
    tape.constant(Tensor::zeros(shape))
}

/// Constant `[n]` vector.
pub fn vector(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::new(vec![v.len()], v.to_vec()).expect("vector length"))
}
