//! The encoder: tokenize observed modalities, complete missing ones from the
//! prototype bank, refine, concatenate and contextualize.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::cohort::{Availability, Modality, PatientRecord};
use crate::config::{Fill, ModelConfig, Pooling};
use crate::error::{Error, Result};
use crate::fusion::{Backbone, BackboneOutput};
use crate::params::ParamStore;
use crate::prototype::{consensus, PrototypeBank, Refiner};
use crate::rng::{derived_rng, Rng};
use crate::tensor::Tensor;
use crate::tokenizer::{ModalityTokenizer, Provenance, TokenBlock};

/// Patients handled per graph when only values are needed.
pub const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct PrimeModel {
    pub cfg: ModelConfig,
    pub tokenizers: Vec<ModalityTokenizer>,
    pub bank: PrototypeBank,
    pub refiners: Vec<Refiner>,
    pub backbone: Backbone,
}

/// Tokenizer outputs of a batch.
pub struct ObservedTokens {
    pub n: usize,
    /// Patients holding each modality, in batch order.
    pub rows: [Vec<usize>; 3],
    pub tokens: [Option<Var>; 3],
}

/// A batch after completion and refinement.
pub struct Completed {
    pub n: usize,
    /// Availability actually used per patient.
    pub avail: Vec<Availability>,
    /// Refined blocks per modality, `[n * T_q, D]` each in patient order.
    pub refined: [Var; 3],
    /// Fused sequences, `[n * 3 T_q, D]`, blocks in `I, R, T` order.
    pub fused: Var,
    /// Consensus assignments, `[n, K_c]`.
    pub q_bar: Var,
}

impl PrimeModel {
    /// Registers every encoder parameter under a fixed name order.
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng: Rng = derived_rng(seed, &[0x1417]);
        let tokenizers = Modality::ALL.iter().map(|&m| ModalityTokenizer::new(ps, cfg, m, &mut rng)).collect();
        let bank = PrototypeBank::new(ps, cfg, &mut rng);
        let refiners = Modality::ALL.iter().map(|&m| Refiner::new(ps, cfg, m, &mut rng)).collect();
        let backbone = Backbone::new(ps, cfg, &mut rng);
        Ok(Self { cfg: cfg.clone(), tokenizers, bank, refiners, backbone })
    }

    /// Observed set used for each patient: its own availability, narrowed by
    /// `restrict` when given.
    pub fn effective_availability(patients: &[&PatientRecord], restrict: Option<&[Availability]>) -> Result<Vec<Availability>> {
        if let Some(r) = restrict {
            if r.len() != patients.len() {
                return Err(Error::DimMismatch(alloc::format!("{} availabilities for {} patients", r.len(), patients.len())));
            }
        }
        patients
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let a = restrict.map_or(p.availability(), |r| p.availability().intersect(r[i]));
                if a.is_empty() {
                    Err(Error::NoObservedModality)
                } else {
                    Ok(a)
                }
            })
            .collect()
    }

    /// Tokens of every observed modality of a batch, `[rows * T_q, D]` per
    /// modality with `rows` listing the patients that have it.
    pub fn tokenize(&self, tape: &mut Tape, ps: &ParamStore, patients: &[&PatientRecord], avail: &[Availability]) -> Result<ObservedTokens> {
        let mut out = ObservedTokens { n: patients.len(), rows: Default::default(), tokens: [None; 3] };
        for m in Modality::ALL {
            let rows: Vec<usize> = (0..patients.len()).filter(|&i| avail[i].has(m)).collect();
            if rows.is_empty() {
                continue;
            }
            let embs = rows
                .iter()
                .map(|&i| patients[i].embedding(m).ok_or(Error::NoObservedModality))
                .collect::<Result<Vec<_>>>()?;
            out.tokens[m.index()] = Some(self.tokenizers[m.index()].forward_batch(tape, ps, &embs)?);
            out.rows[m.index()] = rows;
        }
        Ok(out)
    }

    /// Completion and refinement of a batch on `tape`.
    pub fn complete(&self, tape: &mut Tape, ps: &ParamStore, patients: &[&PatientRecord], avail: &[Availability]) -> Result<Completed> {
        if patients.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let obs = self.tokenize(tape, ps, patients, avail)?;
        self.complete_tokens(tape, ps, &obs, avail)
    }

    /// Assignment, consensus, imputation, refinement and fusion from tokens.
    pub fn complete_tokens(&self, tape: &mut Tape, ps: &ParamStore, obs: &ObservedTokens, avail: &[Availability]) -> Result<Completed> {
        let n = obs.n;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let (t_q, d) = (self.cfg.t_q, self.cfg.d);
        let pooled = self.bank.pooled(tape, ps)?;
        let mut parts = Vec::new();
        for m in Modality::ALL {
            if let Some(z) = obs.tokens[m.index()] {
                let q = self.bank.assign(tape, z, pooled)?;
                parts.push((q, obs.rows[m.index()].as_slice()));
            }
        }
        let q_bar = consensus(tape, &parts, n)?;

        let expand = |rows: &[usize]| -> Vec<usize> { rows.iter().flat_map(|&i| (i * t_q)..(i * t_q + t_q)).collect() };
        let mut refined = Vec::with_capacity(3);
        for m in Modality::ALL {
            let observed = &obs.rows[m.index()];
            let missing: Vec<usize> = (0..n).filter(|&i| !avail[i].has(m)).collect();
            let mut block: Option<Var> = None;
            if let Some(z) = obs.tokens[m.index()] {
                block = Some(if missing.is_empty() { z } else { tape.scatter_rows(z, &expand(observed), n * t_q)? });
            }
            if !missing.is_empty() && self.cfg.missing_fill == Fill::Prototype {
                let qm = tape.gather_rows(q_bar, &missing)?;
                let u = self.bank.mix(tape, ps, qm)?;
                let u = if observed.is_empty() { u } else { tape.scatter_rows(u, &expand(&missing), n * t_q)? };
                block = Some(match block {
                    Some(b) => tape.add(b, u)?,
                    None => u,
                });
            }
            let block = match block {
                Some(b) => b,
                None => tape.constant(Tensor::zeros(&[n * t_q, d])),
            };
            refined.push(self.refiners[m.index()].forward_batch(tape, ps, block)?);
        }
        let stacked = tape.concat_rows(&refined)?;
        let order: Vec<usize> = (0..n)
            .flat_map(|i| (0..3).flat_map(move |m| (0..t_q).map(move |t| m * n * t_q + i * t_q + t)))
            .collect();
        let fused = tape.gather_rows(stacked, &order)?;
        Ok(Completed { n, avail: avail.to_vec(), refined: [refined[0], refined[1], refined[2]], fused, q_bar })
    }

    /// Tokenizes every available modality of each patient once, as values.
    pub fn token_cache(&self, ps: &ParamStore, patients: &[&PatientRecord]) -> Result<Vec<[Option<Tensor>; 3]>> {
        let mut out = Vec::with_capacity(patients.len());
        for chunk in patients.chunks(INFERENCE_CHUNK) {
            let avail: Vec<Availability> = chunk.iter().map(|p| p.availability()).collect();
            let mut tape = Tape::new();
            let obs = self.tokenize(&mut tape, ps, chunk, &avail)?;
            tape.check_finite()?;
            let t_q = self.cfg.t_q;
            let mut cached: Vec<[Option<Tensor>; 3]> = vec![Default::default(); chunk.len()];
            for m in Modality::ALL {
                if let Some(z) = obs.tokens[m.index()] {
                    let z = tape.value(z);
                    for (j, &i) in obs.rows[m.index()].iter().enumerate() {
                        let data = z.data()[j * t_q * z.cols()..(j + 1) * t_q * z.cols()].to_vec();
                        cached[i][m.index()] = Some(Tensor::new(vec![t_q, z.cols()], data)?);
                    }
                }
            }
            out.extend(cached);
        }
        Ok(out)
    }

    /// Representations from cached tokens under per-patient availability,
    /// which must be covered by the cache.
    pub fn represent_cached(&self, ps: &ParamStore, cache: &[[Option<Tensor>; 3]], avail: &[Availability]) -> Result<Tensor> {
        if cache.len() != avail.len() {
            return Err(Error::DimMismatch(alloc::format!("{} cached patients, {} availabilities", cache.len(), avail.len())));
        }
        let mut data = Vec::with_capacity(cache.len() * self.cfg.d);
        for (chunk, a) in cache.chunks(INFERENCE_CHUNK).zip(avail.chunks(INFERENCE_CHUNK)) {
            let mut tape = Tape::new();
            let mut obs = ObservedTokens { n: chunk.len(), rows: Default::default(), tokens: [None; 3] };
            for m in Modality::ALL {
                let rows: Vec<usize> = (0..chunk.len()).filter(|&i| a[i].has(m)).collect();
                if rows.is_empty() {
                    continue;
                }
                let mut stacked = Vec::new();
                for &i in &rows {
                    let t = chunk[i][m.index()].as_ref().ok_or(Error::NoObservedModality)?;
                    stacked.extend_from_slice(t.data());
                }
                let t = Tensor::new(vec![rows.len() * self.cfg.t_q, self.cfg.d], stacked)?;
                obs.tokens[m.index()] = Some(tape.constant(t));
                obs.rows[m.index()] = rows;
            }
            let c = self.complete_tokens(&mut tape, ps, &obs, a)?;
            let (h, _) = self.encode(&mut tape, ps, &c)?;
            tape.check_finite()?;
            data.extend_from_slice(tape.value(h).data());
        }
        Tensor::new(vec![cache.len(), self.cfg.d], data)
    }

    /// Pooling weights over fused tokens for the configured pooling rule.
    pub fn pool_weights(&self, avail: &[Availability]) -> Vec<f64> {
        let t_q = self.cfg.t_q;
        avail
            .iter()
            .flat_map(|a| {
                (0..3 * t_q).map(move |r| match self.cfg.pooling {
                    Pooling::All => 1.0,
                    Pooling::Observed => f64::from(u8::from(a.has(Modality::ALL[r / t_q]))),
                })
            })
            .collect()
    }

    /// Backbone over unaugmented fused sequences, pooled to `[n, D]`.
    pub fn encode(&self, tape: &mut Tape, ps: &ParamStore, c: &Completed) -> Result<(Var, BackboneOutput)> {
        let o = self.backbone.forward(tape, ps, c.fused)?;
        let seq = 3 * self.cfg.t_q;
        let offsets: Vec<usize> = (0..=c.n).map(|i| i * seq).collect();
        let pooled = tape.group_weighted_mean(o.out, &offsets, &self.pool_weights(&c.avail))?;
        Ok((pooled, o))
    }

    /// Patient representations `[n, D]` without gradients.
    pub fn represent(&self, ps: &ParamStore, patients: &[&PatientRecord], restrict: Option<&[Availability]>) -> Result<Tensor> {
        let avail = Self::effective_availability(patients, restrict)?;
        let mut data = Vec::with_capacity(patients.len() * self.cfg.d);
        for (chunk, a) in patients.chunks(INFERENCE_CHUNK).zip(avail.chunks(INFERENCE_CHUNK)) {
            let mut tape = Tape::new();
            let c = self.complete(&mut tape, ps, chunk, a)?;
            let (h, _) = self.encode(&mut tape, ps, &c)?;
            tape.check_finite()?;
            data.extend_from_slice(tape.value(h).data());
        }
        Tensor::new(vec![patients.len(), self.cfg.d], data)
    }

    /// The three refined blocks of one patient with provenance flags.
    pub fn complete_patient(&self, ps: &ParamStore, patient: &PatientRecord, restrict: Option<Availability>) -> Result<[TokenBlock; 3]> {
        let r = restrict.map(|a| vec![a]);
        let avail = Self::effective_availability(&[patient], r.as_deref())?;
        let mut tape = Tape::new();
        let c = self.complete(&mut tape, ps, &[patient], &avail)?;
        tape.check_finite()?;
        Ok(core::array::from_fn(|k| {
            let m = Modality::ALL[k];
            let p = if avail[0].has(m) { Provenance::Observed } else { Provenance::Imputed };
            TokenBlock { tokens: tape.value(c.refined[k]).clone(), modality: m, provenance: vec![p; self.cfg.t_q] }
        }))
    }
}
