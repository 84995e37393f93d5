//! Finite-difference audit of every trainable module on a tiny model.
//!
//! The pretraining loss is checked with its augmentation views frozen, so the
//! only source of error is the gradient code itself. Task heads are checked
//! through their own losses.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Tape, Var};
use crate::cohort::PatientRecord;
use crate::config::{AugmentConfig, LossConfig, ModelConfig};
use crate::downstream::{discretize_time_merged, target, Target, Task, TaskHead};
use crate::error::{Error, Result};
use crate::model::PrimeModel;
use crate::objectives::{total_loss, ProjectionHeads, ViewSampler};
use crate::params::{ParamId, ParamStore};
use crate::rng::{derived_rng, normal};
use crate::synth::{generate_synthetic_cohort, SynthConfig};
use crate::tensor::Tensor;

/// Parameter-name prefixes of the audited modules, in report order.
pub const MODULES: [(&str, &str); 5] =
    [("tokenizer", "tok."), ("prototype-bank", "bank."), ("refinement", "refine."), ("fusion-moe", "backbone."), ("projection", "proj.")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCheck {
    pub module: String,
    pub max_rel_err: f64,
    /// Parameter with the largest error.
    pub worst_param: String,
    pub n_scalars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub eps: f64,
    pub checks: Vec<ModuleCheck>,
    /// Every pretraining parameter at once through the composed loss.
    pub composed: ModuleCheck,
}

impl GradSuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(self.composed.max_rel_err, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteConfig {
    pub seed: u64,
    pub eps: f64,
    pub n_patients: usize,
    /// Parameter overwritten with NaN before checking; for fault injection.
    #[serde(default)]
    pub inject_nan: Option<String>,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self { seed: 0, eps: 1e-6, n_patients: 4, inject_nan: None }
    }
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { input_dims: [6, 5, 4], t_q: 2, d: 8, n_heads: 2, k_c: 5, proj_dim: 4, n_experts: 3, top_k: 2, ..ModelConfig::default() }
}

fn check_ids(
    ps: &ParamStore,
    module: &str,
    ids: &[ParamId],
    eps: f64,
    mut f: impl FnMut(&mut Tape) -> Result<Var>,
) -> Result<ModuleCheck> {
    let mut tensors: Vec<Tensor> = ids.iter().map(|&i| ps.get(i).clone()).collect();
    let report = grad_check(&mut tensors, eps, |tape, vars| {
        for (&id, &v) in ids.iter().zip(vars) {
            tape.bind(id, v);
        }
        f(tape)
    })?;
    let (worst, err) = report
        .per_tensor
        .iter()
        .enumerate()
        .fold((0, 0.0), |best, (i, &e)| if e > best.1 { (i, e) } else { best });
    Ok(ModuleCheck {
        module: module.to_string(),
        max_rel_err: err,
        worst_param: ids.get(worst).map_or_else(String::new, |&i| ps.name(i).to_string()),
        n_scalars: tensors.iter().map(Tensor::numel).sum(),
    })
}

/// Runs the audit. A NaN anywhere surfaces as [`Error::NonFiniteLoss`].
pub fn run_suite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    if cfg.n_patients < 2 {
        return Err(Error::InvalidConfig(String::from("the gradient audit needs at least two patients")));
    }
    let mc = tiny_model_config();
    let cohort = generate_synthetic_cohort(&SynthConfig {
        seed: cfg.seed,
        n_patients: cfg.n_patients,
        lengths: [4, 1, 3],
        dims: mc.input_dims,
        missing_rates: [0.3; 3],
        ..SynthConfig::default()
    })?;
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, &mc, cfg.seed)?;
    let heads = ProjectionHeads::new(&mut ps, &mc, cfg.seed);
    let patients: Vec<&PatientRecord> = cohort.patients.iter().collect();
    let keys: Vec<u64> = (0..patients.len() as u64).collect();
    let aug = AugmentConfig { k_s: 3, ..AugmentConfig::default() };
    let loss = LossConfig::default();

    let mut head_ps = ParamStore::new();
    let times: Vec<f64> = patients.iter().map(|p| p.survival.time_months).collect();
    let events = vec![true; times.len()];
    let bins = discretize_time_merged(&times, &events, 3)?;
    let survival_head = TaskHead::new(&mut head_ps, Task::Os, mc.d, bins.n_bins());
    let mut rng = derived_rng(cfg.seed, &[0x9c]);
    head_ps.ids().collect::<Vec<_>>().into_iter().for_each(|id| {
        head_ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.5 * normal(&mut rng));
    });
    let h = {
        let mut t = Tensor::zeros(&[patients.len(), mc.d]);
        t.data_mut().iter_mut().for_each(|v| *v = normal(&mut rng));
        t
    };

    if let Some(name) = &cfg.inject_nan {
        let id = ps.id(name).or_else(|| head_ps.id(name)).ok_or_else(|| Error::InvalidConfig(alloc::format!("no parameter named {}", name)))?;
        let target_ps = if ps.id(name).is_some() { &mut ps } else { &mut head_ps };
        target_ps.get_mut(id).data_mut()[0] = f64::NAN;
    }

    let sampler = {
        let mut tape = Tape::new();
        let f = total_loss(&mut tape, &ps, &model, &heads, &patients, &keys, &ViewSampler::Fresh { seed: cfg.seed, epoch: 0 }, &aug, &loss)?;
        if !f.parts.total.is_finite() {
            return Err(Error::NonFiniteLoss(alloc::format!("pretraining loss evaluated to {}", f.parts.total)));
        }
        ViewSampler::Frozen(f.views)
    };
    let composed_loss = |tape: &mut Tape| total_loss(tape, &ps, &model, &heads, &patients, &keys, &sampler, &aug, &loss).map(|f| f.total);

    let all: Vec<ParamId> = ps.ids().collect();
    let composed = check_ids(&ps, "composed", &all, cfg.eps, composed_loss)?;
    let mut checks = Vec::new();
    for (module, prefix) in MODULES {
        let ids: Vec<ParamId> = all.iter().copied().filter(|&i| ps.name(i).starts_with(prefix)).collect();
        checks.push(check_ids(&ps, module, &ids, cfg.eps, composed_loss)?);
    }

    let head_ids: Vec<ParamId> = head_ps.ids().collect();
    let surv_targets: Vec<Target> = patients.iter().filter_map(|p| target(Task::Os, p, &bins)).collect();
    checks.push(check_ids(&head_ps, "downstream/survival", &head_ids, cfg.eps, |tape| {
        let x = tape.constant(h.clone());
        let l = survival_head.logits(tape, &head_ps, x)?;
        survival_head.loss(tape, l, &surv_targets)
    })?);
    let mut bin_ps = ParamStore::new();
    let binary_head = TaskHead::new(&mut bin_ps, Task::Mortality3y, mc.d, 1);
    bin_ps.ids().collect::<Vec<_>>().into_iter().for_each(|id| {
        bin_ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.5 * normal(&mut rng));
    });
    let labels: Vec<Target> = (0..patients.len()).map(|i| Target::Binary(i % 2 == 0)).collect();
    let bin_ids: Vec<ParamId> = bin_ps.ids().collect();
    checks.push(check_ids(&bin_ps, "downstream/binary", &bin_ids, cfg.eps, |tape| {
        let x = tape.constant(h.clone());
        let l = binary_head.logits(tape, &bin_ps, x)?;
        binary_head.loss(tape, l, &labels)
    })?);
    Ok(GradSuiteReport { eps: cfg.eps, checks, composed })
}
