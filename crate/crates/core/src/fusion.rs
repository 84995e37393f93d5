//! Fixed-order concatenation of modality blocks and the shared backbone of
//! alternating plain and mixture-of-experts transformer blocks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::cohort::Modality;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ffn, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{Provenance, TokenBlock};

/// One patient's `[3 T_q, D]` sequence in `I, R, T` block order.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub tokens: Tensor,
    pub modality_of_token: Vec<Modality>,
    pub reliability: Vec<bool>,
}

impl FusedSequence {
    /// Rows belonging to `m`.
    pub fn block(&self, m: Modality) -> Tensor {
        let rows: Vec<usize> = (0..self.modality_of_token.len()).filter(|&i| self.modality_of_token[i] == m).collect();
        let c = self.tokens.cols();
        let data = rows.iter().flat_map(|&r| self.tokens.row(r).iter().copied()).collect();
        Tensor::new(vec![rows.len(), c], data).expect("block shape")
    }
}

/// Concatenates the three blocks; a token is reliable when it was observed and
/// `keep` (if given) retains it.
pub fn fuse_concat(blocks: &[TokenBlock], keep: Option<&[bool]>) -> Result<FusedSequence> {
    if blocks.len() != 3 || blocks.iter().zip(Modality::ALL).any(|(b, m)| b.modality != m) {
        return Err(Error::ShapeMismatch {
            op: "fuse_concat",
            detail: String::from("need exactly the I, R, T blocks in order"),
        });
    }
    let (t_q, d) = (blocks[0].tokens.rows(), blocks[0].tokens.cols());
    if blocks.iter().any(|b| b.tokens.shape() != [t_q, d]) {
        return Err(Error::ShapeMismatch { op: "fuse_concat", detail: String::from("blocks differ in shape") });
    }
    if keep.is_some_and(|k| k.len() != 3 * t_q) {
        return Err(Error::ShapeMismatch { op: "fuse_concat", detail: format!("keep mask must have {} entries", 3 * t_q) });
    }
    let mut data = Vec::with_capacity(3 * t_q * d);
    let mut labels = Vec::with_capacity(3 * t_q);
    let mut reliability = Vec::with_capacity(3 * t_q);
    for b in blocks {
        data.extend_from_slice(b.tokens.data());
        for t in 0..t_q {
            let pos = labels.len();
            labels.push(b.modality);
            let kept = keep.map_or(true, |k| k[pos]);
            reliability.push(b.provenance[t] == Provenance::Observed && kept);
        }
    }
    Ok(FusedSequence { tokens: Tensor::new(vec![3 * t_q, d], data)?, modality_of_token: labels, reliability })
}

/// Per-expert top-1 token fraction and mean gate probability.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterStats {
    pub fraction: Vec<f64>,
    pub mean_prob: Vec<f64>,
}

impl RouterStats {
    /// `gate_probs` is `[tokens, E]`. Top-1 ties go to the lower expert.
    pub fn from_probs(gate_probs: &Tensor) -> Self {
        let (n, e) = (gate_probs.rows(), gate_probs.cols());
        let mut fraction = vec![0.0; e];
        let mut mean_prob = vec![0.0; e];
        for i in 0..n {
            let row = gate_probs.row(i);
            let mut best = 0;
            for j in 1..e {
                if row[j] > row[best] {
                    best = j;
                }
            }
            fraction[best] += 1.0;
            mean_prob.iter_mut().zip(row).for_each(|(m, p)| *m += p);
        }
        fraction.iter_mut().for_each(|f| *f /= n as f64);
        mean_prob.iter_mut().for_each(|m| *m /= n as f64);
        Self { fraction, mean_prob }
    }
}

/// Load-balance penalty `E * sum_e f_e p_e`.
pub fn router_loss(stats: &RouterStats) -> f64 {
    stats.fraction.len() as f64 * stats.fraction.iter().zip(&stats.mean_prob).map(|(f, p)| f * p).sum::<f64>()
}

/// Sparse mixture-of-experts block with a modality-aware gate.
#[derive(Clone, Debug)]
pub struct MoeBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub gate: Linear,
    /// Learned `b_m`, one row per modality.
    pub modality_emb: ParamId,
    pub experts: Vec<Ffn>,
    pub top_k: usize,
}

/// Output of the expert layer on a batch of tokens.
pub struct MoeOutput {
    pub out: Var,
    pub probs: Var,
    pub stats: RouterStats,
    /// Differentiable `E * sum_e f_e p_e`, with `f` held constant.
    pub router_loss: Var,
}

impl MoeBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        Self {
            ln1: LayerNorm::new(ps, &format!("{}.ln1", name), d),
            attn: MultiHeadAttention::new(ps, &format!("{}.attn", name), d, cfg.n_heads, rng),
            ln2: LayerNorm::new(ps, &format!("{}.ln2", name), d),
            gate: Linear::new(ps, &format!("{}.gate", name), d, cfg.n_experts, false, rng),
            modality_emb: ps.add_normal(&format!("{}.modality_emb", name), &[3, d], 0.02, rng),
            experts: (0..cfg.n_experts)
                .map(|e| Ffn::new(ps, &format!("{}.expert{}", name, e), d, cfg.ffn_hidden(), d, rng))
                .collect(),
            top_k: cfg.top_k,
        }
    }

    /// Routes each row of `h` given its modality index.
    pub fn moe(&self, tape: &mut Tape, ps: &ParamStore, h: Var, modality_rows: &[usize]) -> Result<MoeOutput> {
        let n = tape.value(h).rows();
        let e_n = self.experts.len();
        let b = tape.param(ps, self.modality_emb);
        let bm = tape.gather_rows(b, modality_rows)?;
        let gate_in = tape.add(h, bm)?;
        let r = self.gate.forward(tape, ps, gate_in)?;
        let p = tape.softmax(r, 1)?;
        let w = tape.top_k_renorm(p, self.top_k)?;
        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| tape.value(w).data()[i * e_n + e] > 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let flat: Vec<usize> = rows.iter().map(|&i| i * e_n + e).collect();
            let xe = tape.gather_rows(h, &rows)?;
            let ye = expert.forward(tape, ps, xe)?;
            let we = tape.gather_flat(w, &flat)?;
            let ye = tape.row_scale(ye, we)?;
            let full = tape.scatter_rows(ye, &rows, n)?;
            out = Some(match out {
                Some(o) => tape.add(o, full)?,
                None => full,
            });
        }
        let out = match out {
            Some(o) => o,
            None => tape.constant(Tensor::zeros(tape.shape(h))),
        };
        let stats = RouterStats::from_probs(tape.value(p));
        let pm = tape.group_mean(p, n)?;
        let fe: Vec<f64> = stats.fraction.iter().map(|f| f * e_n as f64).collect();
        let fe = tape.constant(Tensor::new(vec![1, e_n], fe)?);
        let prod = tape.mul(pm, fe)?;
        let router_loss = tape.sum(prod)?;
        Ok(MoeOutput { out, probs: p, stats, router_loss })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        x: Var,
        layout: &AttentionLayout,
        modality_rows: &[usize],
    ) -> Result<(Var, MoeOutput)> {
        let h = self.ln1.forward(tape, ps, x)?;
        let a = self.attn.forward(tape, ps, h, h, layout)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, ps, x)?;
        let m = self.moe(tape, ps, h, modality_rows)?;
        let y = tape.add(x, m.out)?;
        Ok((y, m))
    }
}

#[derive(Clone, Debug)]
pub enum BackboneBlock {
    Plain(TransformerBlock),
    Moe(MoeBlock),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub segment: Option<ParamId>,
    pub blocks: Vec<BackboneBlock>,
    pub t_q: usize,
    pub n_heads: usize,
}

/// Contextualized tokens plus per-expert-block routing results.
pub struct BackboneOutput {
    pub out: Var,
    pub router_losses: Vec<Var>,
    pub stats: Vec<RouterStats>,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = format!("backbone.{}", i);
                if i % 2 == 0 {
                    BackboneBlock::Plain(TransformerBlock::new(ps, &name, cfg.d, cfg.n_heads, cfg.ffn_hidden(), rng))
                } else {
                    BackboneBlock::Moe(MoeBlock::new(ps, &name, cfg, rng))
                }
            })
            .collect();
        let segment = (cfg.segment_embedding && cfg.depth > 0)
            .then(|| ps.add_normal("backbone.segment", &[3, cfg.d], 0.02, rng));
        Self { segment, blocks, t_q: cfg.t_q, n_heads: cfg.n_heads }
    }

    /// Modality index of every row of a stack of `n` fused sequences.
    pub fn modality_rows(&self, n: usize) -> Vec<usize> {
        (0..n * 3 * self.t_q).map(|r| (r % (3 * self.t_q)) / self.t_q).collect()
    }

    /// `x` stacks whole fused sequences, `[n * 3 T_q, D]`.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<BackboneOutput> {
        let rows = tape.value(x).rows();
        let seq = 3 * self.t_q;
        if rows % seq != 0 {
            return Err(Error::ShapeMismatch { op: "backbone", detail: format!("{} rows is not a multiple of {}", rows, seq) });
        }
        let mut out = BackboneOutput { out: x, router_losses: Vec::new(), stats: Vec::new() };
        if self.blocks.is_empty() {
            return Ok(out);
        }
        let n = rows / seq;
        let labels = self.modality_rows(n);
        let mut x = x;
        if let Some(s) = self.segment {
            let s = tape.param(ps, s);
            let sm = tape.gather_rows(s, &labels)?;
            x = tape.add(x, sm)?;
        }
        let layout = AttentionLayout::uniform(n, seq, seq, self.n_heads);
        for b in &self.blocks {
            x = match b {
                BackboneBlock::Plain(t) => t.forward(tape, ps, x, &layout)?,
                BackboneBlock::Moe(m) => {
                    let (y, r) = m.forward(tape, ps, x, &layout, &labels)?;
                    out.router_losses.push(r.router_loss);
                    out.stats.push(r.stats);
                    y
                }
            };
        }
        out.out = x;
        Ok(out)
    }
}
