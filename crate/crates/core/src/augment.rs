//! Structured-missingness augmentation: modality and token dropout, with
//! dropped tokens refilled from a Dirichlet-perturbed prototype mixture.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::cohort::{Availability, Modality};
use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

const MODALITY_RESAMPLES: usize = 10;

/// One sampled view of a patient's fused sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    /// Per token in `I, R, T` order: observed and retained.
    pub keep: Vec<bool>,
    /// Per token: dropped from an observed modality, so refilled.
    pub replaced: Vec<bool>,
    /// Mixture weights for the refill, present when anything was dropped.
    pub weights: Option<Vec<f64>>,
}

impl ViewSample {
    /// The view that changes nothing.
    pub fn identity(avail: Availability, t_q: usize) -> Self {
        let keep: Vec<bool> = Modality::ALL.iter().flat_map(|&m| core::iter::repeat(avail.has(m)).take(t_q)).collect();
        Self { replaced: vec![false; keep.len()], keep, weights: None }
    }

    pub fn kept_tokens(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keeps the `k` largest entries (lower index wins ties) and renormalizes.
pub fn top_k_sparsify(q: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out = vec![0.0; q.len()];
    let mut s = 0.0;
    for &i in idx.iter().take(k) {
        out[i] = q[i];
        s += q[i];
    }
    if s > 0.0 {
        out.iter_mut().for_each(|v| *v /= s);
    } else {
        let share = 1.0 / k.min(q.len()) as f64;
        idx.iter().take(k).for_each(|&i| out[i] = share);
    }
    out
}

/// Draw from `Dirichlet(alpha * q_hat)` through normalized Gamma variates.
/// Components with zero mean stay exactly zero.
pub fn sample_dirichlet(q_hat: &[f64], alpha: f64, rng: &mut Rng) -> Vec<f64> {
    let mut g: Vec<f64> = q_hat
        .iter()
        .map(|&q| match Gamma::new(alpha * q, 1.0) {
            Ok(d) if q > 0.0 => d.sample(rng),
            _ => 0.0,
        })
        .collect();
    let s: f64 = g.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        // every draw underflowed; fall back to the mean
        return q_hat.to_vec();
    }
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Modality dropout with the repair rule: resample up to ten times, then keep
/// one observed modality chosen uniformly.
pub fn sample_modalities(avail: Availability, p_mod: f64, rng: &mut Rng) -> Availability {
    let observed: Vec<Modality> = avail.observed().collect();
    for _ in 0..MODALITY_RESAMPLES {
        let mut kept = avail;
        for &m in &observed {
            if rng.gen::<f64>() < p_mod {
                kept = kept.without(m);
            }
        }
        if !kept.is_empty() {
            return kept;
        }
    }
    Availability::only(observed[rng.gen_range(0..observed.len())])
}

/// Samples one augmented view. `q_bar` is the patient's consensus assignment.
pub fn sample_view(avail: Availability, q_bar: &[f64], t_q: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<ViewSample> {
    if avail.is_empty() {
        return Err(Error::NoObservedModality);
    }
    let kept_mods = sample_modalities(avail, cfg.p_mod, rng);
    let mut keep = vec![false; 3 * t_q];
    let mut candidates = Vec::new();
    for m in kept_mods.observed() {
        for t in 0..t_q {
            let pos = m.index() * t_q + t;
            candidates.push(pos);
            keep[pos] = rng.gen::<f64>() >= cfg.p_tok;
        }
    }
    if !keep.iter().any(|&k| k) {
        keep[candidates[rng.gen_range(0..candidates.len())]] = true;
    }
    let replaced: Vec<bool> = (0..3 * t_q).map(|i| avail.has(Modality::ALL[i / t_q]) && !keep[i]).collect();
    let weights = if replaced.iter().any(|&r| r) {
        let q_hat = top_k_sparsify(q_bar, cfg.k_s);
        Some(sample_dirichlet(&q_hat, cfg.alpha, rng))
    } else {
        None
    };
    Ok(ViewSample { keep, replaced, weights })
}
