//! Survival statistics: concordance, AUROC, Kaplan-Meier, log-rank and a
//! univariate Cox model with a binary covariate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// `z_{0.975}`.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    pub time: f64,
    pub event: bool,
    pub risk: f64,
}

/// Harrell's concordance index.
///
/// A pair is comparable when the earlier time carries an event; equal times
/// are comparable only if exactly one of them is an event (the event is taken
/// as earlier). Risk ties count one half.
pub fn c_index(samples: &[SurvivalSample]) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].time.total_cmp(&samples[b].time));
    let (mut num, mut den) = (0.0, 0u64);
    for (pos, &i) in order.iter().enumerate() {
        let si = &samples[i];
        if !si.event {
            continue;
        }
        // later entries in `order` have time >= si.time
        for &j in &order[pos + 1..] {
            let sj = &samples[j];
            if sj.time == si.time && sj.event {
                continue;
            }
            den += 1;
            num += concordance(si.risk, sj.risk);
        }
        // equal-time censored entries sorted before i are comparable too
        for &j in order[..pos].iter().rev() {
            let sj = &samples[j];
            if sj.time != si.time {
                break;
            }
            if !sj.event {
                den += 1;
                num += concordance(si.risk, sj.risk);
            }
        }
    }
    if den == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(num / den as f64)
}

fn concordance(earlier: f64, later: f64) -> f64 {
    if earlier > later {
        1.0
    } else if earlier == later {
        0.5
    } else {
        0.0
    }
}

/// Area under the ROC curve from the Mann-Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Product-limit estimate. Entry `j` describes the step at `times[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `S(t)`, right-continuous.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Kaplan-Meier estimator over `(time, event)` pairs. Subjects censored at an
/// event time are still at risk at that time.
pub fn km_curve(samples: &[(f64, bool)]) -> Result<KmCurve> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve = KmCurve { times: Vec::new(), survival: Vec::new(), at_risk: Vec::new(), events: Vec::new() };
    let mut s = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let n = sorted.len() - i;
        let mut d = 0;
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == t {
            d += sorted[j].1 as usize;
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(n);
            curve.events.push(d);
        }
        i = j;
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub p_value: f64,
    /// Observed minus expected events in the first group.
    pub o_minus_e: f64,
    pub variance: f64,
}

/// Two-group log-rank test with the hypergeometric variance.
pub fn logrank_test(a: &[(f64, bool)], b: &[(f64, bool)]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientGroup(format!("group sizes {} and {}", a.len(), b.len())));
    }
    let mut all: Vec<(f64, bool, bool)> =
        a.iter().map(|&(t, e)| (t, e, true)).chain(b.iter().map(|&(t, e)| (t, e, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut n_a, mut n) = (a.len() as f64, all.len() as f64);
    let (mut o_e, mut var) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (mut d, mut d_a, mut leave_a, mut leave) = (0.0, 0.0, 0.0, 0.0);
        while i < all.len() && all[i].0 == t {
            let (_, e, in_a) = all[i];
            if e {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            leave += 1.0;
            if in_a {
                leave_a += 1.0;
            }
            i += 1;
        }
        if d > 0.0 {
            o_e += d_a - d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n_a -= leave_a;
    }
    let chi2 = if var > 0.0 { o_e * o_e / var } else { 0.0 };
    Ok(LogRank { chi2, p_value: math::chi2_sf_1dof(chi2), o_minus_e: o_e, variance: var })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: f64,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Score at the returned `beta`.
    pub score: f64,
}

/// Partial-likelihood score and information with Breslow ties.
pub fn cox_score_info(times: &[f64], events: &[bool], x: &[bool], beta: f64) -> (f64, f64) {
    let mut order: Vec<usize> = (0..times.len()).collect();
    // descending time so risk sets accumulate as we go
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let w = math::exp(beta);
    let (mut s0, mut s1) = (0.0, 0.0);
    let (mut u, mut info) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let (mut d, mut dx) = (0.0, 0.0);
        while j < order.len() && times[order[j]] == t {
            let k = order[j];
            let wk = if x[k] { w } else { 1.0 };
            s0 += wk;
            if x[k] {
                s1 += wk;
            }
            if events[k] {
                d += 1.0;
                if x[k] {
                    dx += 1.0;
                }
            }
            j += 1;
        }
        if d > 0.0 {
            let p = s1 / s0;
            u += dx - d * p;
            // x is binary so S2 = S1
            info += d * (p - p * p);
        }
        i = j;
    }
    (u, info)
}

/// Newton-Raphson for a single binary covariate; stops when `|step| < 1e-8`
/// or after 50 iterations.
pub fn cox_univariate(times: &[f64], events: &[bool], x: &[bool]) -> Result<CoxFit> {
    if times.len() != events.len() || times.len() != x.len() {
        return Err(Error::DimMismatch(String::from("times, events and covariate differ in length")));
    }
    let ev1 = (0..x.len()).filter(|&i| x[i] && events[i]).count();
    let ev0 = (0..x.len()).filter(|&i| !x[i] && events[i]).count();
    if ev1 == 0 || ev0 == 0 {
        return Err(Error::Separation(format!("events per group: {} (x=1), {} (x=0)", ev1, ev0)));
    }
    let mut beta = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=50 {
        iterations = it;
        let (u, info) = cox_score_info(times, events, x, beta);
        if !(info > 0.0) {
            return Err(Error::Separation(format!("information vanished at beta={}", beta)));
        }
        let step = u / info;
        beta += step;
        if !beta.is_finite() || math::abs(beta) > 30.0 {
            return Err(Error::Separation(format!("coefficient diverged (beta={})", beta)));
        }
        if math::abs(step) < 1e-8 {
            converged = true;
            break;
        }
    }
    let (score, info) = cox_score_info(times, events, x, beta);
    let se = 1.0 / math::sqrt(info);
    Ok(CoxFit {
        beta,
        hazard_ratio: math::exp(beta),
        ci_low: math::exp(beta - Z_975 * se),
        ci_high: math::exp(beta + Z_975 * se),
        iterations,
        converged,
        score,
    })
}

/// Median split of risk scores: strictly above the median is high risk.
/// Returns `(high, low)` index lists.
pub fn risk_stratify(risks: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if risks.len() < 2 {
        return Err(Error::InsufficientGroup(format!("{} patients", risks.len())));
    }
    let med = math::median(risks);
    let (high, low): (Vec<usize>, Vec<usize>) = (0..risks.len()).partition(|&i| risks[i] > med);
    Ok((high, low))
}

/// KM curves, log-rank test and Cox hazard ratio of high vs low risk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmAnalysis {
    pub n_high: usize,
    pub n_low: usize,
    pub high: KmCurve,
    pub low: KmCurve,
    pub logrank: LogRank,
    pub cox: Option<CoxFit>,
}

pub fn km_analysis(samples: &[SurvivalSample]) -> Result<KmAnalysis> {
    let risks: Vec<f64> = samples.iter().map(|s| s.risk).collect();
    let (high, low) = risk_stratify(&risks)?;
    if high.is_empty() || low.is_empty() {
        return Err(Error::InsufficientGroup(format!("high={} low={}", high.len(), low.len())));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| (samples[i].time, samples[i].event)).collect::<Vec<_>>();
    let (h, l) = (pick(&high), pick(&low));
    let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let events: Vec<bool> = samples.iter().map(|s| s.event).collect();
    let mut x = alloc::vec![false; samples.len()];
    high.iter().for_each(|&i| x[i] = true);
    Ok(KmAnalysis {
        n_high: high.len(),
        n_low: low.len(),
        high: km_curve(&h)?,
        low: km_curve(&l)?,
        logrank: logrank_test(&h, &l)?,
        cox: cox_univariate(&times, &events, &x).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s(time: f64, event: bool, risk: f64) -> SurvivalSample {
        SurvivalSample { time, event, risk }
    }

    #[test]
    fn c_index_perfect_and_tied() {
        let perfect: Vec<_> = (1..=5).map(|i| s(i as f64, true, -(i as f64))).collect();
        assert_eq!(c_index(&perfect).unwrap(), 1.0);
        let tied: Vec<_> = (1..=5).map(|i| s(i as f64, true, 0.3)).collect();
        assert_eq!(c_index(&tied).unwrap(), 0.5);
        assert_eq!(c_index(&[s(1.0, false, 0.0), s(2.0, false, 1.0)]), Err(Error::NoComparablePairs));
    }

    #[test]
    fn c_index_hand_built_with_censoring() {
        // pairs (earlier event first): (1,2) (1,3) (1,4) (1,5) (3,4) (3,5) (5 ties 4? no: t4=4 < t5=5, 4 censored)
        // samples: t=1 e r=.9 | t=2 c r=.5 | t=3 e r=.4 | t=4 c r=.6 | t=5 e r=.1
        // comparable: 1>2 c, 1>3 c, 1>4 c, 1>5 c, 3<4 d, 3>5 c  -> 5/6
        let xs = [s(1.0, true, 0.9), s(2.0, false, 0.5), s(3.0, true, 0.4), s(4.0, false, 0.6), s(5.0, true, 0.1)];
        assert!((c_index(&xs).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn c_index_tied_times() {
        // both events at t=2: incomparable; event vs censored at t=2: comparable
        let xs = [s(2.0, true, 1.0), s(2.0, true, 0.0), s(2.0, false, 0.5)];
        // pairs: (0,2) concordant, (1,2) discordant
        assert_eq!(c_index(&xs).unwrap(), 0.5);
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.5, 0.1], &[true, true]), Err(Error::SingleClass));
    }

    #[test]
    fn km_examples() {
        let c = km_curve(&[(1.0, true), (2.0, true), (3.0, true)]).unwrap();
        assert_eq!(c.times, vec![1.0, 2.0, 3.0]);
        let want = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, b) in c.survival.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let all_c = km_curve(&[(1.0, false), (2.0, false)]).unwrap();
        assert!(all_c.times.is_empty());
        assert_eq!(all_c.survival_at(5.0), 1.0);
        let more = km_curve(&[(1.0, true), (2.0, true), (3.0, true), (9.0, false)]).unwrap();
        let less = km_curve(&[(1.0, true), (2.0, true), (3.0, true), (3.5, false)]).unwrap();
        assert_eq!(more.survival, less.survival);
    }

    #[test]
    fn logrank_identical_groups() {
        let g = [(1.0, true), (2.0, false), (3.0, true)];
        let r = logrank_test(&g, &g).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn logrank_hand_table() {
        // A: 1e 3e 4c ; B: 2e 5e 6e
        // t=1: nA=3 n=6 d=1 E=.5  V=.25 ; t=2: nA=2 n=5 E=.4 V=.24 ; t=3: nA=2 n=4 E=.5 V=.25
        // t=5,6: nA=0 -> E=0 V=0.  O-E = 2-1.4 = .6, V = .74, chi2 = 18/37
        let a = [(1.0, true), (3.0, true), (4.0, false)];
        let b = [(2.0, true), (5.0, true), (6.0, true)];
        let r = logrank_test(&a, &b).unwrap();
        assert!((r.o_minus_e - 0.6).abs() < 1e-15);
        assert!((r.variance - 0.74).abs() < 1e-15);
        assert!((r.chi2 - 18.0 / 37.0).abs() < 1e-15);
        // scipy.stats.chi2.sf(18/37, 1)
        assert!((r.p_value - 0.485_498_802_644_282_25).abs() < 1e-12);
        let swapped = logrank_test(&b, &a).unwrap();
        assert!((swapped.chi2 - r.chi2).abs() < 1e-15);
    }

    #[test]
    fn cox_rejects_groups_without_events() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true, true, false, false];
        let x = [true, true, false, false];
        assert!(matches!(cox_univariate(&t, &e, &x), Err(Error::Separation(_))));
    }

    #[test]
    fn cox_score_vanishes_at_optimum() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let e = [true, true, true, false, true, true, true, true];
        let x = [true, false, true, true, false, true, false, false];
        let f = cox_univariate(&t, &e, &x).unwrap();
        assert!(f.converged);
        assert!(f.score.abs() < 1e-6);
        assert!(f.ci_low < f.hazard_ratio && f.hazard_ratio < f.ci_high);
    }

    #[test]
    fn stratify_ties_go_low() {
        let (h, l) = risk_stratify(&[0.4, 0.1, 0.3, 0.2]).unwrap();
        assert_eq!((h, l), (vec![0, 2], vec![1, 3]));
        let (h, l) = risk_stratify(&[1.0; 5]).unwrap();
        assert!(h.is_empty());
        assert_eq!(l.len(), 5);
        let samples: Vec<_> = (0..5).map(|i| s(i as f64 + 1.0, true, 1.0)).collect();
        assert!(matches!(km_analysis(&samples), Err(Error::InsufficientGroup(_))));
    }
}
