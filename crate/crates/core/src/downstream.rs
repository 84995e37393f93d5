//! Task heads, discrete-time survival targets and downstream adaptation by
//! linear probing or full fine-tuning.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::sample_modalities;
use crate::autodiff::{Tape, Var};
use crate::cohort::{Availability, Modality, PatientRecord};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::{auroc, c_index, SurvivalSample};
use crate::model::PrimeModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, derived_rng, permutation};
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Overall survival, discrete-time hazards.
    Os,
    #[serde(rename = "mortality_3y")]
    Mortality3y,
    #[serde(rename = "recurrence_3y")]
    Recurrence3y,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Os, Task::Mortality3y, Task::Recurrence3y];

    pub fn name(self) -> &'static str {
        match self {
            Task::Os => "os",
            Task::Mortality3y => "mortality_3y",
            Task::Recurrence3y => "recurrence_3y",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Os => "c_index",
            _ => "auroc",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Test-time modality conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Full,
    LeaveOut(Modality),
    Only(Modality),
}

impl Condition {
    pub const ALL: [Condition; 7] = [
        Condition::Full,
        Condition::LeaveOut(Modality::Image),
        Condition::LeaveOut(Modality::Rna),
        Condition::LeaveOut(Modality::Text),
        Condition::Only(Modality::Image),
        Condition::Only(Modality::Rna),
        Condition::Only(Modality::Text),
    ];

    pub fn availability(self) -> Availability {
        match self {
            Condition::Full => Availability::FULL,
            Condition::LeaveOut(m) => Availability::FULL.without(m),
            Condition::Only(m) => Availability::only(m),
        }
    }

    pub fn name(self) -> String {
        match self {
            Condition::Full => String::from("Full"),
            Condition::LeaveOut(m) => alloc::format!("L{}", m.code()),
            Condition::Only(m) => alloc::format!("O{}", m.code()),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Interval edges over follow-up time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBins {
    /// Interior edges, strictly increasing; `edges.len() + 1` bins.
    pub edges: Vec<f64>,
}

impl TimeBins {
    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Bin holding `t`; a time equal to an edge falls in the lower bin.
    pub fn index(&self, t: f64) -> usize {
        self.edges.iter().filter(|&&e| t > e).count()
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = math::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn candidate_edges(times: &[f64], events: &[bool], k_time: usize) -> Result<(Vec<f64>, usize)> {
    if k_time == 0 || times.len() != events.len() {
        return Err(Error::InvalidConfig(alloc::format!("k_time={} with {} times, {} flags", k_time, times.len(), events.len())));
    }
    let mut ev: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
    ev.sort_by(f64::total_cmp);
    let mut distinct = ev.clone();
    distinct.dedup();
    if k_time == 1 {
        return Ok((Vec::new(), distinct.len()));
    }
    if ev.is_empty() {
        return Err(Error::DegenerateBins { wanted: k_time, found: 0 });
    }
    let edges = (1..k_time).map(|j| quantile(&ev, j as f64 / k_time as f64)).collect();
    Ok((edges, distinct.len()))
}

/// Edges at quantiles of the event times. Fails unless all `k_time` bins are
/// distinct.
pub fn discretize_time(times: &[f64], events: &[bool], k_time: usize) -> Result<TimeBins> {
    let (edges, distinct) = candidate_edges(times, events, k_time)?;
    if k_time > 1 && (distinct < k_time || edges.windows(2).any(|w| w[1] <= w[0])) {
        return Err(Error::DegenerateBins { wanted: k_time, found: distinct });
    }
    Ok(TimeBins { edges })
}

/// As [`discretize_time`], but uses at most one bin per distinct event time
/// and merges coincident edges instead of failing.
pub fn discretize_time_merged(times: &[f64], events: &[bool], k_time: usize) -> Result<TimeBins> {
    let (_, distinct) = candidate_edges(times, events, 1)?;
    let k = k_time.min(distinct.max(1));
    let (mut edges, _) = candidate_edges(times, events, k)?;
    edges.dedup();
    Ok(TimeBins { edges })
}

/// Negated expected survival mass `-sum_j S_j` from interval hazard logits.
pub fn risk_score(logits: &[f64]) -> f64 {
    let mut s = 1.0;
    let mut total = 0.0;
    for &l in logits {
        s *= math::exp(math::log_sigmoid(-l));
        total += s;
    }
    -total
}

/// Supervision for one patient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Survival { time: f64, event: bool, bin: usize },
    Binary(bool),
}

/// Target of `p` for `task`, absent when the label is undefined.
pub fn target(task: Task, p: &PatientRecord, bins: &TimeBins) -> Option<Target> {
    match task {
        Task::Os => Some(Target::Survival {
            time: p.survival.time_months,
            event: !p.survival.censored,
            bin: bins.index(p.survival.time_months),
        }),
        Task::Mortality3y => p.label_3y_mortality().map(Target::Binary),
        Task::Recurrence3y => p.label_3y_recurrence().map(Target::Binary),
    }
}

/// Task metric of `scores` (higher = riskier / more likely positive).
pub fn task_metric(scores: &[f64], targets: &[Target]) -> Result<f64> {
    match targets.first() {
        Some(Target::Survival { .. }) => {
            let s: Vec<SurvivalSample> = targets
                .iter()
                .zip(scores)
                .map(|(t, &risk)| match *t {
                    Target::Survival { time, event, .. } => SurvivalSample { time, event, risk },
                    Target::Binary(_) => SurvivalSample { time: 0.0, event: false, risk },
                })
                .collect();
            c_index(&s)
        }
        Some(Target::Binary(_)) => {
            let labels: Vec<bool> = targets.iter().map(|t| matches!(t, Target::Binary(true))).collect();
            auroc(scores, &labels)
        }
        None => Err(Error::EmptyBatch),
    }
}

/// Linear head `D -> K_time` hazard logits or `D -> 1` logit, zero-initialized.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task: Task,
    pub w: ParamId,
    pub b: ParamId,
}

impl TaskHead {
    pub fn new(ps: &mut ParamStore, task: Task, d: usize, n_bins: usize) -> Self {
        let out = if task == Task::Os { n_bins } else { 1 };
        let w = ps.add("head.w", Tensor::zeros(&[d, out]));
        let b = ps.add("head.b", Tensor::zeros(&[out]));
        Self { task, w, b }
    }

    pub fn logits(&self, tape: &mut Tape, ps: &ParamStore, h: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        tape.linear(h, w, Some(b))
    }

    pub fn loss(&self, tape: &mut Tape, logits: Var, targets: &[Target]) -> Result<Var> {
        match self.task {
            Task::Os => {
                let mut bins = Vec::with_capacity(targets.len());
                let mut censored = Vec::with_capacity(targets.len());
                for t in targets {
                    let Target::Survival { event, bin, .. } = *t else {
                        return Err(Error::DimMismatch(String::from("survival head given a binary target")));
                    };
                    bins.push(bin);
                    censored.push(!event);
                }
                tape.survival_nll(logits, &bins, &censored)
            }
            _ => {
                let y = targets
                    .iter()
                    .map(|t| match t {
                        Target::Binary(b) => Ok(f64::from(u8::from(*b))),
                        _ => Err(Error::DimMismatch(String::from("binary head given a survival target"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.bce_with_logits(logits, &y)
            }
        }
    }

    /// Per-row score: risk for survival, logit for binary tasks.
    pub fn scores(&self, logits: &Tensor) -> Vec<f64> {
        (0..logits.rows())
            .map(|i| if self.task == Task::Os { risk_score(logits.row(i)) } else { logits.row(i)[0] })
            .collect()
    }

    pub fn score_features(&self, ps: &ParamStore, h: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let l = self.logits(&mut tape, ps, x)?;
        Ok(self.scores(tape.value(l)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullFineTune,
    LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub k_time: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_ft: f64,
    pub lr_lp: f64,
    pub weight_decay: f64,
    /// Per-modality drop probability during downstream training; 0 disables.
    pub train_missing_p: f64,
    /// Standardize probe features with train-split statistics.
    pub standardize: bool,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self { k_time: 8, epochs: 50, batch_size: 16, lr_ft: 5e-4, lr_lp: 1e-4, weight_decay: 0.1, train_missing_p: 0.0, standardize: true }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_time == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(String::from("k_time, epochs and batch_size must be positive")));
        }
        if !(self.lr_ft > 0.0 && self.lr_lp > 0.0) {
            return Err(Error::InvalidConfig(String::from("learning rates must be positive")));
        }
        if !(0.0..1.0).contains(&self.train_missing_p) {
            return Err(Error::InvalidConfig(alloc::format!("train_missing_p must lie in [0, 1), got {}", self.train_missing_p)));
        }
        Ok(())
    }

    fn optimizer(&self, mode: Mode) -> AdamWConfig {
        AdamWConfig::new(if mode == Mode::LinearProbe { self.lr_lp } else { self.lr_ft }, self.weight_decay)
    }
}

/// Fits the bins on training event times and builds targets; patients
/// without a defined label are dropped from each split.
pub struct TaskSplit {
    pub bins: TimeBins,
    pub train: Vec<(usize, Target)>,
    pub val: Vec<(usize, Target)>,
    pub test: Vec<(usize, Target)>,
}

pub fn task_split(task: Task, patients: &[&PatientRecord], train: &[usize], val: &[usize], test: &[usize], k_time: usize) -> Result<TaskSplit> {
    let bins = if task == Task::Os {
        let times: Vec<f64> = train.iter().map(|&i| patients[i].survival.time_months).collect();
        let events: Vec<bool> = train.iter().map(|&i| !patients[i].survival.censored).collect();
        discretize_time_merged(&times, &events, k_time)?
    } else {
        TimeBins { edges: Vec::new() }
    };
    let pick = |idx: &[usize]| idx.iter().filter_map(|&i| target(task, patients[i], &bins).map(|t| (i, t))).collect::<Vec<_>>();
    let (tr, va, te) = (pick(train), pick(val), pick(test));
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(TaskSplit { bins, train: tr, val: va, test: te })
}

/// Representations of every patient under each of the seven subsets,
/// indexed by [`Availability::subset_index`]. A patient lacking all of a
/// subset's modalities keeps its own availability.
pub struct FeatureBank {
    pub by_subset: Vec<Tensor>,
}

impl FeatureBank {
    pub fn build(model: &PrimeModel, ps: &ParamStore, patients: &[&PatientRecord]) -> Result<Self> {
        let cache = model.token_cache(ps, patients)?;
        let by_subset = Availability::nonempty_subsets()
            .iter()
            .map(|&s| {
                let avail: Vec<Availability> = patients
                    .iter()
                    .map(|p| {
                        let a = p.availability().intersect(s);
                        if a.is_empty() {
                            p.availability()
                        } else {
                            a
                        }
                    })
                    .collect();
                model.represent_cached(ps, &cache, &avail)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { by_subset })
    }

    pub fn features(&self, subset: Availability) -> &Tensor {
        &self.by_subset[subset.subset_index().expect("nonempty subset")]
    }

    pub fn dim(&self) -> usize {
        self.by_subset[0].cols()
    }
}

/// Train-split mean and standard deviation per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], scale: vec![1.0; d] }
    }

    pub fn fit(x: &Tensor, rows: &[usize]) -> Self {
        let d = x.cols();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for &r in rows {
            var.iter_mut().zip(x.row(r)).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let scale = var.iter().map(|&v| if v > 1e-12 { 1.0 / math::sqrt(v) } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply_rows(&self, x: &Tensor, rows: &[usize]) -> Tensor {
        let d = x.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend(x.row(r).iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s));
        }
        Tensor::new(vec![rows.len(), d], out).expect("standardized rows")
    }
}

/// Best checkpoint of a downstream run.
pub struct Adapted {
    /// Encoder plus head parameters at the best validation epoch.
    pub params: ParamStore,
    pub head: TaskHead,
    pub standardizer: Standardizer,
    pub best_epoch: usize,
    pub val_metric: f64,
    /// `(epoch, mean train loss, validation metric)`.
    pub history: Vec<(usize, f64, f64)>,
}

impl Adapted {
    /// Scores from precomputed representations.
    pub fn score_features(&self, h: &Tensor, rows: &[usize]) -> Result<Vec<f64>> {
        let x = self.standardizer.apply_rows(h, rows);
        self.head.score_features(&self.params, &x)
    }

    /// Scores through the encoder, with optional availability narrowing.
    pub fn score_patients(&self, model: &PrimeModel, patients: &[&PatientRecord], restrict: Option<&[Availability]>) -> Result<Vec<f64>> {
        let h = model.represent(&self.params, patients, restrict)?;
        let rows: Vec<usize> = (0..patients.len()).collect();
        self.score_features(&h, &rows)
    }
}

fn split_targets(v: &[(usize, Target)]) -> (Vec<usize>, Vec<Target>) {
    v.iter().copied().unzip()
}

fn better(metric: Result<f64>, best: f64) -> Result<Option<f64>> {
    match metric {
        Ok(m) if m > best => Ok(Some(m)),
        Ok(_) => Ok(None),
        Err(Error::NoComparablePairs) | Err(Error::SingleClass) => Ok(None),
        Err(e) => Err(e),
    }
}

fn drop_modalities(cfg: &DownstreamConfig, avail: Availability, seed: u64, epoch: usize, key: usize) -> Availability {
    if cfg.train_missing_p == 0.0 {
        return avail;
    }
    sample_modalities(avail, cfg.train_missing_p, &mut derived_rng(seed, &[0xd409, epoch as u64, key as u64]))
}

/// Linear probe on cached representations. `encoder` is left untouched,
/// which is checked by hash.
pub fn linear_probe(
    encoder: &ParamStore,
    bank: &FeatureBank,
    patients: &[&PatientRecord],
    split: &TaskSplit,
    task: Task,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<Adapted> {
    cfg.validate()?;
    let mut ps = encoder.clone();
    let head = TaskHead::new(&mut ps, task, bank.dim(), split.bins.n_bins());
    ps.freeze_except(&[HEAD_PREFIX]);
    let frozen_hash = ps.hash_where(|n| !n.starts_with(HEAD_PREFIX));
    let (train_rows, train_t) = split_targets(&split.train);
    let (val_rows, val_t) = split_targets(&split.val);
    let full = bank.features(Availability::FULL);
    let standardizer = if cfg.standardize { Standardizer::fit(full, &train_rows) } else { Standardizer::identity(bank.dim()) };
    let val_x = standardizer.apply_rows(full, &val_rows);

    let mut opt = AdamW::new(cfg.optimizer(Mode::LinearProbe), &ps);
    let mut best = (f64::NEG_INFINITY, 0, ps.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut derived_rng(seed, &[0xd410, epoch as u64]), train_rows.len());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * bank.dim());
            let mut targets = Vec::with_capacity(chunk.len());
            for &j in chunk {
                let i = train_rows[j];
                let a = drop_modalities(cfg, patients[i].availability(), seed, epoch, i);
                let row = standardizer.apply_rows(bank.features(a), &[i]);
                data.extend_from_slice(row.data());
                targets.push(train_t[j]);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![chunk.len(), bank.dim()], data)?);
            let logits = head.logits(&mut tape, &ps, x)?;
            let loss = head.loss(&mut tape, logits, &targets)?;
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss(alloc::format!("{} probe loss {} in epoch {}", task, l, epoch)));
            }
            epoch_loss += l * chunk.len() as f64 / train_rows.len() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut ps, &tape, &grads);
        }
        let scores = head.score_features(&ps, &val_x)?;
        let metric = task_metric(&scores, &val_t);
        history.push((epoch, epoch_loss, *metric.as_ref().unwrap_or(&f64::NAN)));
        if let Some(m) = better(metric, best.0)? {
            best = (m, epoch, ps.clone());
        }
    }
    if best.0 == f64::NEG_INFINITY {
        best = (f64::NAN, cfg.epochs - 1, ps);
    }
    if best.2.hash_where(|n| !n.starts_with(HEAD_PREFIX)) != frozen_hash {
        return Err(Error::FreezeViolated);
    }
    Ok(Adapted { params: best.2, head, standardizer, best_epoch: best.1, val_metric: best.0, history })
}

/// Fine-tunes every encoder parameter together with the head.
pub fn fine_tune(
    model: &PrimeModel,
    encoder: &ParamStore,
    patients: &[&PatientRecord],
    split: &TaskSplit,
    task: Task,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<Adapted> {
    cfg.validate()?;
    let mut ps = encoder.clone();
    let head = TaskHead::new(&mut ps, task, model.cfg.d, split.bins.n_bins());
    let (train_rows, train_t) = split_targets(&split.train);
    let (val_rows, val_t) = split_targets(&split.val);
    let val_patients: Vec<&PatientRecord> = val_rows.iter().map(|&i| patients[i]).collect();
    let standardizer = Standardizer::identity(model.cfg.d);
    let mut opt = AdamW::new(cfg.optimizer(Mode::FullFineTune), &ps);
    let mut best = (f64::NEG_INFINITY, 0, ps.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let order_seed = derive_seed(seed, &[0xd411]);
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut derived_rng(order_seed, &[epoch as u64]), train_rows.len());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&j| patients[train_rows[j]]).collect();
            let avail: Vec<Availability> = chunk
                .iter()
                .map(|&j| drop_modalities(cfg, patients[train_rows[j]].availability(), seed, epoch, train_rows[j]))
                .collect();
            let targets: Vec<Target> = chunk.iter().map(|&j| train_t[j]).collect();
            let mut tape = Tape::new();
            let c = model.complete(&mut tape, &ps, &batch, &avail)?;
            let (h, _) = model.encode(&mut tape, &ps, &c)?;
            let logits = head.logits(&mut tape, &ps, h)?;
            let loss = head.loss(&mut tape, logits, &targets)?;
            let l = tape.value(loss).item();
            if !l.is_finite() {
                tape.check_finite()?;
                return Err(Error::NonFiniteLoss(alloc::format!("{} fine-tuning loss {} in epoch {}", task, l, epoch)));
            }
            epoch_loss += l * chunk.len() as f64 / train_rows.len() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut ps, &tape, &grads);
        }
        let h = model.represent(&ps, &val_patients, None)?;
        let scores = head.score_features(&ps, &h)?;
        let metric = task_metric(&scores, &val_t);
        history.push((epoch, epoch_loss, *metric.as_ref().unwrap_or(&f64::NAN)));
        if let Some(m) = better(metric, best.0)? {
            best = (m, epoch, ps.clone());
        }
    }
    if best.0 == f64::NEG_INFINITY {
        best = (f64::NAN, cfg.epochs - 1, ps);
    }
    Ok(Adapted { params: best.2, head, standardizer, best_epoch: best.1, val_metric: best.0, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bin_holds_everyone() {
        let b = discretize_time(&[3.0, 1.0, 9.0], &[true, false, true], 1).unwrap();
        assert_eq!(b.n_bins(), 1);
        assert!([3.0, 1.0, 9.0].iter().all(|&t| b.index(t) == 0));
    }

    #[test]
    fn median_edge_for_four_events() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let b = discretize_time(&t, &[true; 4], 2).unwrap();
        assert_eq!(b.edges, vec![2.5]);
        assert_eq!(t.map(|x| b.index(x)), [0, 0, 1, 1]);
    }

    #[test]
    fn event_bins_are_balanced() {
        for n in 5..40 {
            for k in 2..5 {
                let t: Vec<f64> = (1..=n).map(f64::from).collect();
                let b = discretize_time(&t, &vec![true; t.len()], k).unwrap();
                let mut counts = vec![0; b.n_bins()];
                t.iter().for_each(|&x| counts[b.index(x)] += 1);
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "n={} k={} {:?}", n, k, counts);
            }
        }
    }

    #[test]
    fn too_few_event_times() {
        let t = [1.0, 1.0, 2.0, 5.0];
        let e = [true, true, true, false];
        assert!(matches!(discretize_time(&t, &e, 3), Err(Error::DegenerateBins { wanted: 3, found: 2 })));
        let merged = discretize_time_merged(&t, &e, 3).unwrap();
        assert!(merged.n_bins() <= 2);
        assert!(merged.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn risk_extremes_and_monotonicity() {
        assert!((risk_score(&[-800.0; 4]) + 4.0).abs() < 1e-12);
        assert!(risk_score(&[800.0; 4]).abs() < 1e-12);
        let base = [0.3, -1.0, 0.5, 2.0];
        for j in 0..4 {
            let mut prev = risk_score(&base);
            for step in 1..20 {
                let mut l = base;
                l[j] += step as f64 * 0.25;
                let r = risk_score(&l);
                assert!(r >= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn conditions_round_trip() {
        let names: Vec<String> = Condition::ALL.iter().map(|c| c.name()).collect();
        assert_eq!(names, ["Full", "LI", "LR", "LT", "OI", "OR", "OT"]);
        for c in Condition::ALL {
            assert_eq!(Condition::parse(&c.name()), Some(c));
        }
        assert_eq!(Condition::Only(Modality::Rna).availability(), Availability([false, true, false]));
    }
}
