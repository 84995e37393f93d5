//! Self-supervised pretraining loop. Reads embeddings and sites only; outcome
//! fields of the records are never touched.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cohort::{stratified_split, Cohort, PatientRecord};
use crate::config::{AugmentConfig, LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::PrimeModel;
use crate::objectives::{total_loss, LossParts, ProjectionHeads, ViewSampler};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::{derive_seed, derived_rng, permutation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, val_fraction: 0.2, optimizer: AdamWConfig { clip_norm: 1.0, ..AdamWConfig::new(1e-3, 0.1) } }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidConfig(alloc::string::String::from("pretraining needs epochs >= 1 and batch_size >= 2")));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(alloc::format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidConfig(alloc::string::String::from("learning rate must be positive")));
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    pub val: LossParts,
    /// Lowest validation total so far.
    pub best_val: f64,
}

pub struct Pretrained {
    pub model: PrimeModel,
    pub heads: ProjectionHeads,
    /// Parameters at the best validation epoch.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn accumulate(acc: &mut LossParts, p: LossParts, w: f64) {
    acc.align += w * p.align;
    acc.fusion += w * p.fusion;
    acc.router += w * p.router;
    acc.total += w * p.total;
}

/// Mean losses over `idx` in fixed batches, without updates.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_losses(
    ps: &ParamStore,
    model: &PrimeModel,
    heads: &ProjectionHeads,
    cohort: &Cohort,
    idx: &[usize],
    batch_size: usize,
    sampler: &ViewSampler,
    aug: &AugmentConfig,
    loss: &LossConfig,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for chunk in idx.chunks(batch_size) {
        let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| &cohort.patients[i]).collect();
        let keys: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        let mut tape = Tape::new();
        let f = total_loss(&mut tape, ps, model, heads, &batch, &keys, sampler, aug, loss)?;
        accumulate(&mut acc, f.parts, chunk.len() as f64 / idx.len() as f64);
    }
    Ok(acc)
}

/// Pretrains on every patient of `cohort` with an 80/20 split inside each site.
pub fn pretrain(
    cohort: &Cohort,
    model_cfg: &ModelConfig,
    aug: &AugmentConfig,
    loss: &LossConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    cfg.validate()?;
    aug.validate(model_cfg.k_c)?;
    loss.validate()?;
    let sites: Vec<u32> = cohort.patients.iter().map(|p| p.site).collect();
    let (train, val) = stratified_split(&sites, cfg.val_fraction, derive_seed(seed, &[0x7a11]));
    if train.len() < 2 || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, model_cfg, seed)?;
    let heads = ProjectionHeads::new(&mut ps, model_cfg, seed);
    let mut opt = AdamW::new(cfg.optimizer.clone(), &ps);
    let val_sampler = ViewSampler::Fresh { seed: derive_seed(seed, &[0x7a12]), epoch: 0 };
    let view_seed = derive_seed(seed, &[0x7a13]);

    let mut best = (f64::INFINITY, 0, ps.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut derived_rng(seed, &[0x7a14, epoch as u64]), train.len());
        let sampler = ViewSampler::Fresh { seed: view_seed, epoch: epoch as u64 };
        let mut train_parts = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            // a lone trailing patient has no negatives
            if chunk.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = chunk.iter().map(|&j| train[j]).collect();
            let batch: Vec<&PatientRecord> = idx.iter().map(|&i| &cohort.patients[i]).collect();
            let keys: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let mut tape = Tape::new();
            let f = total_loss(&mut tape, &ps, &model, &heads, &batch, &keys, &sampler, aug, loss)?;
            if !f.parts.total.is_finite() {
                tape.check_finite()?;
                return Err(Error::NonFiniteLoss(alloc::format!("epoch {} total loss {}", epoch, f.parts.total)));
            }
            let grads = tape.backward(f.total)?;
            opt.step(&mut ps, &tape, &grads);
            accumulate(&mut train_parts, f.parts, idx.len() as f64 / train.len() as f64);
        }
        if !ps.all_finite() {
            return Err(Error::NonFiniteLoss(alloc::format!("parameters became non-finite in epoch {}", epoch)));
        }
        let val_parts = evaluate_losses(&ps, &model, &heads, cohort, &val, cfg.batch_size, &val_sampler, aug, loss)?;
        if val_parts.total < best.0 {
            best = (val_parts.total, epoch, ps.clone());
        }
        log.push(EpochLog { epoch, train: train_parts, val: val_parts, best_val: best.0 });
    }
    Ok(Pretrained { model, heads, params: best.2, best_epoch: best.1, log })
}
