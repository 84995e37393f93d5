//! Query-based cross-attention tokenizers: a variable number of embedding rows
//! in, exactly `T_q` tokens of width `D` out.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::cohort::{Embedding, Modality};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ffn, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    Imputed,
}

/// `T_q x D` tokens of one modality of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    pub tokens: Tensor,
    pub modality: Modality,
    pub provenance: Vec<Provenance>,
}

impl TokenBlock {
    pub fn is_observed(&self) -> bool {
        self.provenance.iter().all(|&p| p == Provenance::Observed)
    }
}

#[derive(Clone, Debug)]
pub struct ModalityTokenizer {
    pub modality: Modality,
    pub input_dim: usize,
    pub t_q: usize,
    pub proj: Linear,
    pub ln_kv: LayerNorm,
    pub queries: ParamId,
    pub ln_q: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl ModalityTokenizer {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, modality: Modality, rng: &mut Rng) -> Self {
        let name = format!("tok.{}", modality.name());
        let d = cfg.d;
        let input_dim = cfg.input_dims[modality.index()];
        Self {
            modality,
            input_dim,
            t_q: cfg.t_q,
            proj: Linear::new(ps, &format!("{}.proj", name), input_dim, d, true, rng),
            ln_kv: LayerNorm::new(ps, &format!("{}.ln_kv", name), d),
            queries: ps.add_normal(&format!("{}.queries", name), &[cfg.t_q, d], 0.02, rng),
            ln_q: LayerNorm::new(ps, &format!("{}.ln_q", name), d),
            attn: MultiHeadAttention::new(ps, &format!("{}.attn", name), d, cfg.n_heads, rng),
            ln_ffn: LayerNorm::new(ps, &format!("{}.ln_ffn", name), d),
            ffn: Ffn::new(ps, &format!("{}.ffn", name), d, cfg.ffn_hidden(), d, rng),
        }
    }

    /// Cross-attention output for a batch, before the residual and FFN.
    /// Also returns the query residual stream tiled per patient.
    pub fn cross_attend(&self, tape: &mut Tape, ps: &ParamStore, embs: &[&Embedding]) -> Result<(Var, Var)> {
        if embs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rows = 0;
        let mut data = Vec::new();
        let mut valid = Vec::new();
        let mut kv_offsets = Vec::with_capacity(embs.len() + 1);
        kv_offsets.push(0);
        for e in embs {
            if e.dim() != self.input_dim {
                return Err(Error::DimMismatch(format!(
                    "{} tokenizer expects width {}, got {}",
                    self.modality.name(),
                    self.input_dim,
                    e.dim()
                )));
            }
            rows += e.len();
            data.extend_from_slice(e.matrix.data());
            valid.extend_from_slice(&e.valid);
            kv_offsets.push(rows);
        }
        let n = embs.len();
        let e = tape.constant(Tensor::new(alloc::vec![rows, self.input_dim], data)?);
        let kv = self.proj.forward(tape, ps, e)?;
        let kv = self.ln_kv.forward(tape, ps, kv)?;
        let q = tape.param(ps, self.queries);
        let qn = self.ln_q.forward(tape, ps, q)?;
        let qp = self.attn.wq.forward(tape, ps, qn)?;
        let qp = tape.repeat_rows(qp, n)?;
        let layout = AttentionLayout {
            q_offsets: (0..=n).map(|i| i * self.t_q).collect(),
            kv_offsets,
            key_valid: Some(valid),
            n_heads: self.attn.n_heads,
        };
        let a = self.attn.attend_projected(tape, ps, qp, kv, &layout)?;
        let q_res = tape.repeat_rows(q, n)?;
        Ok((a, q_res))
    }

    /// Tokens for a batch of embeddings, `[n * T_q, D]` in patient order.
    pub fn forward_batch(&self, tape: &mut Tape, ps: &ParamStore, embs: &[&Embedding]) -> Result<Var> {
        let (a, q_res) = self.cross_attend(tape, ps, embs)?;
        let x = tape.add(q_res, a)?;
        let h = self.ln_ffn.forward(tape, ps, x)?;
        let f = self.ffn.forward(tape, ps, h)?;
        tape.add(x, f)
    }

    /// Tokenizes one embedding matrix.
    pub fn tokenize(&self, ps: &ParamStore, emb: &Embedding) -> Result<TokenBlock> {
        let mut tape = Tape::new();
        let z = self.forward_batch(&mut tape, ps, &[emb])?;
        tape.check_finite()?;
        Ok(TokenBlock {
            tokens: tape.value(z).clone(),
            modality: self.modality,
            provenance: alloc::vec![Provenance::Observed; self.t_q],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from};
    use alloc::vec;

    fn setup(input_dim: usize) -> (ParamStore, ModalityTokenizer) {
        let cfg = ModelConfig { input_dims: [input_dim; 3], t_q: 4, d: 8, n_heads: 2, ..ModelConfig::default() };
        let mut ps = ParamStore::new();
        let tok = ModalityTokenizer::new(&mut ps, &cfg, Modality::Image, &mut rng_from(1));
        (ps, tok)
    }

    fn emb(rng: &mut Rng, l: usize, d: usize) -> Embedding {
        let mut t = Tensor::zeros(&[l, d]);
        t.data_mut().iter_mut().for_each(|v| *v = normal(rng));
        Embedding::new(t).unwrap()
    }

    #[test]
    fn single_row_input_gives_identical_attention_rows() {
        let (ps, tok) = setup(5);
        let e = emb(&mut rng_from(2), 1, 5);
        let mut tape = Tape::new();
        let (a, _) = tok.cross_attend(&mut tape, &ps, &[&e]).unwrap();
        let out = tape.value(a);
        for i in 1..4 {
            assert_eq!(out.row(i), out.row(0));
        }
    }

    #[test]
    fn output_shape_is_fixed() {
        let (ps, tok) = setup(3);
        for l in [1, 7, 500] {
            let b = tok.tokenize(&ps, &emb(&mut rng_from(l as u64), l, 3)).unwrap();
            assert_eq!(b.tokens.shape(), &[4, 8]);
            assert!(b.is_observed());
        }
    }

    #[test]
    fn padding_rows_are_ignored() {
        let (ps, tok) = setup(3);
        let mut rng = rng_from(3);
        let e = emb(&mut rng, 6, 3);
        let mut padded = e.matrix.data().to_vec();
        padded.splice(6..6, [0.0; 6]);
        padded.extend_from_slice(&[0.0; 3]);
        let p = Embedding::new(Tensor::new(vec![9, 3], padded).unwrap()).unwrap();
        assert_eq!(p.num_valid(), 6);
        let a = tok.tokenize(&ps, &e).unwrap();
        let b = tok.tokenize(&ps, &p).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) < 1e-13);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let (ps, tok) = setup(3);
        let e = emb(&mut rng_from(0), 2, 4);
        assert!(matches!(tok.tokenize(&ps, &e), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn batched_equals_one_at_a_time() {
        let (ps, tok) = setup(3);
        let mut rng = rng_from(4);
        let es: Vec<Embedding> = [3, 1, 9].iter().map(|&l| emb(&mut rng, l, 3)).collect();
        let refs: Vec<&Embedding> = es.iter().collect();
        let mut tape = Tape::new();
        let z = tok.forward_batch(&mut tape, &ps, &refs).unwrap();
        for (i, e) in es.iter().enumerate() {
            let single = tok.tokenize(&ps, e).unwrap();
            let rows = &tape.value(z).data()[i * 32..(i + 1) * 32];
            for (a, b) in rows.iter().zip(single.tokens.data()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }
}
