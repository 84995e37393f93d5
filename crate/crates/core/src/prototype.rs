//! Shared prototype bank: soft assignment, patient consensus, imputation, and
//! the per-modality refinement blocks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::cohort::Modality;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::TransformerBlock;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{Provenance, TokenBlock};

/// `K_c` token sequences stored flat as `[K_c, T_q * D]`.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub protos: ParamId,
    pub k_c: usize,
    pub t_q: usize,
    pub d: usize,
    pub tau: f64,
}

impl PrototypeBank {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        // unit scale, like the layer-normalised tokens they stand in for
        let protos = ps.add_normal("bank.protos", &[cfg.k_c, cfg.t_q * cfg.d], 1.0, rng);
        Self { protos, k_c: cfg.k_c, t_q: cfg.t_q, d: cfg.d, tau: cfg.tau }
    }

    /// Unit-norm mean-pooled prototypes, `[K_c, D]`.
    pub fn pooled(&self, tape: &mut Tape, ps: &ParamStore) -> Result<Var> {
        let c = tape.param(ps, self.protos);
        let c = tape.reshape(c, &[self.k_c * self.t_q, self.d])?;
        let m = tape.group_mean(c, self.t_q)?;
        tape.l2_normalize_rows(m, "pooled prototype")
    }

    /// Softmax over cosine similarities between pooled tokens and pooled
    /// prototypes, `[n * T_q, D] -> [n, K_c]`.
    pub fn assign(&self, tape: &mut Tape, z: Var, pooled: Var) -> Result<Var> {
        let zm = tape.group_mean(z, self.t_q)?;
        let zn = tape.l2_normalize_rows(zm, "pooled tokens")?;
        let sim = tape.matmul_t(zn, pooled, false, true)?;
        let logits = tape.scale(sim, 1.0 / self.tau)?;
        tape.softmax(logits, 1)
    }

    /// Token-wise mixtures `sum_k q_k C_k`, `[n, K_c] -> [n * T_q, D]`.
    pub fn mix(&self, tape: &mut Tape, ps: &ParamStore, weights: Var) -> Result<Var> {
        let c = tape.param(ps, self.protos);
        let u = tape.matmul(weights, c)?;
        let n = tape.value(weights).rows();
        tape.reshape(u, &[n * self.t_q, self.d])
    }

    /// Prototype `k` as a `[T_q, D]` tensor.
    pub fn prototype(&self, ps: &ParamStore, k: usize) -> Tensor {
        let row = ps.get(self.protos).row(k).to_vec();
        Tensor::new(vec![self.t_q, self.d], row).expect("prototype shape")
    }
}

/// Mean of per-modality assignments over each patient's observed modalities.
///
/// `parts[j] = (q, rows)` gives assignments `q` for the patients listed in `rows`.
pub fn consensus(tape: &mut Tape, parts: &[(Var, &[usize])], n: usize) -> Result<Var> {
    let mut counts = vec![0.0; n];
    let mut total: Option<Var> = None;
    for &(q, rows) in parts {
        rows.iter().for_each(|&r| counts[r] += 1.0);
        let s = tape.scatter_rows(q, rows, n)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or(Error::NoObservedModality)?;
    if counts.iter().any(|&c| c == 0.0) {
        return Err(Error::NoObservedModality);
    }
    let inv: Vec<f64> = counts.iter().map(|c| 1.0 / c).collect();
    let inv = tape.constant(Tensor::new(vec![n], inv)?);
    tape.row_scale(total, inv)
}

/// Soft assignment of one observed token block.
pub fn soft_assign(bank: &PrototypeBank, ps: &ParamStore, z: &TokenBlock) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.tokens.clone());
    let pooled = bank.pooled(&mut tape, ps)?;
    let q = bank.assign(&mut tape, zv, pooled)?;
    Ok(tape.value(q).data().to_vec())
}

/// Arithmetic mean of assignment vectors.
pub fn consensus_of(assignments: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = assignments.first().ok_or(Error::NoObservedModality)?;
    let mut out = vec![0.0; first.len()];
    for q in assignments {
        if q.len() != out.len() {
            return Err(Error::DimMismatch(format!("assignment lengths {} and {}", q.len(), out.len())));
        }
        out.iter_mut().zip(q).for_each(|(o, v)| *o += v);
    }
    let n = assignments.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Prototype mixture under `consensus`, flagged as imputed.
pub fn impute_missing(bank: &PrototypeBank, ps: &ParamStore, consensus: &[f64], modality: Modality) -> Result<TokenBlock> {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, consensus.len()], consensus.to_vec())?);
    let u = bank.mix(&mut tape, ps, q)?;
    Ok(TokenBlock {
        tokens: tape.value(u).clone(),
        modality,
        provenance: vec![Provenance::Imputed; bank.t_q],
    })
}

/// Per-modality transformer over a patient's `T_q` tokens.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub blocks: Vec<TransformerBlock>,
    pub t_q: usize,
    pub n_heads: usize,
}

impl Refiner {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, modality: Modality, rng: &mut Rng) -> Self {
        let blocks = (0..cfg.refine_depth)
            .map(|i| {
                let name = format!("refine.{}.{}", modality.name(), i);
                TransformerBlock::new(ps, &name, cfg.d, cfg.n_heads, cfg.ffn_hidden(), rng)
            })
            .collect();
        Self { blocks, t_q: cfg.t_q, n_heads: cfg.n_heads }
    }

    pub fn forward_batch(&self, tape: &mut Tape, ps: &ParamStore, u: Var) -> Result<Var> {
        let n = tape.value(u).rows() / self.t_q;
        let layout = AttentionLayout::uniform(n, self.t_q, self.t_q, self.n_heads);
        let mut x = u;
        for b in &self.blocks {
            x = b.forward(tape, ps, x, &layout)?;
        }
        Ok(x)
    }

    /// Refines one block; provenance is carried through.
    pub fn refine(&self, ps: &ParamStore, u: &TokenBlock) -> Result<TokenBlock> {
        let mut tape = Tape::new();
        let x = tape.constant(u.tokens.clone());
        let y = self.forward_batch(&mut tape, ps, x)?;
        Ok(TokenBlock { tokens: tape.value(y).clone(), modality: u.modality, provenance: u.provenance.clone() })
    }
}
