//! Cross-validated downstream evaluation shared by the command line and the
//! acceptance checks.

use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::cohort::{make_folds, Cohort, PatientRecord};
use crate::downstream::{fine_tune, linear_probe, task_metric, task_split, Adapted, Condition, DownstreamConfig, FeatureBank, Mode, Target, Task};
use crate::error::{Error, Result};
use crate::math;
use crate::model::PrimeModel;
use crate::params::ParamStore;
use crate::rng::{derive_seed, derived_rng, permutation};

/// Patients used for downstream tasks: those with all three modalities.
pub fn downstream_indices(cohort: &Cohort) -> Vec<usize> {
    cohort.trimodal_indices()
}

#[derive(Clone, Debug)]
pub struct CvSpec {
    pub task: Task,
    pub mode: Mode,
    pub conditions: Vec<Condition>,
    /// Share of each fold's training patients kept.
    pub label_fraction: f64,
    pub n_folds: usize,
    pub downstream: DownstreamConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Index into the cohort.
    pub patient: usize,
    pub fold: usize,
    pub condition: Condition,
    pub score: f64,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub best_epoch: usize,
    pub val_metric: f64,
    /// Test metric per requested condition, in request order.
    pub test: Vec<(Condition, f64)>,
    pub predictions: Vec<Prediction>,
    /// SHA-256 of the training indices actually used.
    pub train_hash: [u8; 32],
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub task: Task,
    pub folds: Vec<FoldOutcome>,
}

impl CvOutcome {
    /// Per-fold test metrics under `c`.
    pub fn metrics(&self, c: Condition) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.test.iter().find(|(k, _)| *k == c).map(|&(_, m)| m)).collect()
    }

    /// Mean and sample standard deviation over folds.
    pub fn mean_std(&self, c: Condition) -> (f64, f64) {
        let m = self.metrics(c);
        (math::mean(&m), math::std_dev(&m))
    }
}

/// Kept training indices: a prefix of a permutation that depends only on the
/// fold seed, so every compared method sees the same patients.
pub fn subsample(train: &[usize], fraction: f64, fold_seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return train.to_vec();
    }
    let keep = ((train.len() as f64 * fraction) + 0.5) as usize;
    let perm = permutation(&mut derived_rng(fold_seed, &[0x5ab5]), train.len());
    let mut out: Vec<usize> = perm[..keep.max(1)].iter().map(|&j| train[j]).collect();
    out.sort_unstable();
    out
}

pub fn index_hash(idx: &[usize]) -> [u8; 32] {
    let mut h = Sha256::new();
    for &i in idx {
        h.update((i as u64).to_le_bytes());
    }
    h.finalize().into()
}

/// Trains and evaluates one task over `n_folds` folds of `indices`.
/// `bank` must hold features of exactly `indices`, in order, when probing.
pub fn run_cv(
    model: &PrimeModel,
    encoder: &ParamStore,
    cohort: &Cohort,
    indices: &[usize],
    bank: Option<&FeatureBank>,
    spec: &CvSpec,
) -> Result<CvOutcome> {
    let patients: Vec<&PatientRecord> = indices.iter().map(|&i| &cohort.patients[i]).collect();
    let folds = make_folds(patients.len(), spec.n_folds, spec.seed)?;
    let built;
    let bank = match (spec.mode, bank) {
        (Mode::LinearProbe, Some(b)) => Some(b),
        (Mode::LinearProbe, None) => {
            built = FeatureBank::build(model, encoder, &patients)?;
            Some(&built)
        }
        (Mode::FullFineTune, _) => None,
    };
    let mut out = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let fold_seed = derive_seed(spec.seed, &[0xf0, k as u64]);
        let train = subsample(&fold.train, spec.label_fraction, fold_seed);
        let split = task_split(spec.task, &patients, &train, &fold.val, &fold.test, spec.downstream.k_time)?;
        let adapted: Adapted = match bank {
            Some(b) => linear_probe(encoder, b, &patients, &split, spec.task, &spec.downstream, fold_seed)?,
            None => fine_tune(model, encoder, &patients, &split, spec.task, &spec.downstream, fold_seed)?,
        };
        let (test_rows, test_t): (Vec<usize>, Vec<Target>) = split.test.iter().copied().unzip();
        let mut test = Vec::with_capacity(spec.conditions.len());
        let mut predictions = Vec::new();
        for &c in &spec.conditions {
            let scores = match bank {
                Some(b) => adapted.score_features(b.features(c.availability()), &test_rows)?,
                None => {
                    let ps: Vec<&PatientRecord> = test_rows.iter().map(|&i| patients[i]).collect();
                    let restrict = alloc::vec![c.availability(); ps.len()];
                    adapted.score_patients(model, &ps, Some(&restrict))?
                }
            };
            let metric = match task_metric(&scores, &test_t) {
                Ok(m) => m,
                Err(Error::NoComparablePairs) | Err(Error::SingleClass) => f64::NAN,
                Err(e) => return Err(e),
            };
            test.push((c, metric));
            predictions.extend(test_rows.iter().zip(&scores).zip(&test_t).map(|((&r, &score), &target)| Prediction {
                patient: indices[r],
                fold: k,
                condition: c,
                score,
                target,
            }));
        }
        out.push(FoldOutcome {
            fold: k,
            best_epoch: adapted.best_epoch,
            val_metric: adapted.val_metric,
            test,
            predictions,
            train_hash: index_hash(&train),
        });
    }
    Ok(CvOutcome { task: spec.task, folds: out })
}
