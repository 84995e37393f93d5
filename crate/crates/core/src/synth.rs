//! Synthetic multimodal cohorts with a planted shared latent state.
//!
//! Each patient draws `z ~ N(0, I_8)`. A modality renders every embedding row as
//! `B_m tanh(A_m z + S_m eta_m + site_m + u_row) + noise`, where `eta_m` is a
//! per-patient nuisance private to that modality and `u_row` varies across
//! rows. Only `z` is shared between modalities, so cross-modal agreement is
//! exactly the signal the outcomes depend on.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Embedding, Modality, ModalityDims, Outcome, PatientRecord};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derived_rng, normal, Rng};
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    /// Maximum rows per modality, `I, R, T`.
    pub lengths: [usize; 3],
    pub dims: [usize; 3],
    pub missing_rates: [f64; 3],
    pub hazard_coupling: f64,
    pub n_sites: u32,
    /// Hidden width of the per-modality rendering.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Standard deviation of the modality-private nuisance.
    #[serde(default = "default_nuisance")]
    pub nuisance_scale: f64,
    /// Standard deviation of the per-row perturbation.
    #[serde(default = "default_row_scale")]
    pub row_scale: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_site_scale")]
    pub site_scale: f64,
    /// Median survival at `w.z = 0`, months.
    #[serde(default = "default_baseline_median")]
    pub baseline_median_months: f64,
    #[serde(default = "default_censor_median")]
    pub censor_median_months: f64,
}

fn default_hidden() -> usize {
    32
}
fn default_nuisance() -> f64 {
    1.5
}
fn default_row_scale() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.3
}
fn default_site_scale() -> f64 {
    0.3
}
fn default_baseline_median() -> f64 {
    36.0
}
fn default_censor_median() -> f64 {
    60.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 1500,
            lengths: [128, 1, 200],
            dims: [32, 64, 48],
            missing_rates: [0.1, 0.1, 0.1],
            hazard_coupling: 1.0,
            n_sites: 4,
            hidden: default_hidden(),
            nuisance_scale: default_nuisance(),
            row_scale: default_row_scale(),
            noise: default_noise(),
            site_scale: default_site_scale(),
            baseline_median_months: default_baseline_median(),
            censor_median_months: default_censor_median(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_patients == 0 {
            return bad(String::from("n_patients must be positive"));
        }
        for m in Modality::ALL {
            let r = self.missing_rates[m.index()];
            if !(0.0..1.0).contains(&r) {
                return bad(format!("missing rate for {} must lie in [0, 1), got {}", m.name(), r));
            }
            if self.lengths[m.index()] == 0 || self.dims[m.index()] == 0 {
                return bad(format!("{} needs positive length and width", m.name()));
            }
        }
        if self.n_sites == 0 || self.hidden == 0 {
            return bad(String::from("n_sites and hidden must be positive"));
        }
        for (name, v) in [
            ("hazard_coupling", self.hazard_coupling),
            ("nuisance_scale", self.nuisance_scale),
            ("row_scale", self.row_scale),
            ("noise", self.noise),
            ("site_scale", self.site_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{} must be finite and nonnegative, got {}", name, v));
            }
        }
        if !(self.baseline_median_months > 0.0 && self.censor_median_months > 0.0) {
            return bad(String::from("survival medians must be positive"));
        }
        Ok(())
    }

    pub fn modality_dims(&self) -> [ModalityDims; 3] {
        core::array::from_fn(|i| ModalityDims { len: self.lengths[i], dim: self.dims[i] })
    }
}

struct Renderer {
    a: Tensor,          // [hidden, 8]
    s: Tensor,          // [hidden, 8]
    b: Tensor,          // [dim, hidden]
    site: Vec<Vec<f64>>, // per site, [hidden]
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = std * normal(rng));
    t
}

fn matvec(m: &Tensor, x: &[f64], out: &mut [f64]) {
    let c = m.cols();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m.data()[i * c..(i + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Generated cohort together with each patient's latent state.
pub struct SynthCohort {
    pub cohort: Cohort,
    pub latent: Vec<[f64; LATENT_DIM]>,
    /// Direction of `z` that drives the hazard.
    pub hazard_direction: [f64; LATENT_DIM],
}

pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    Ok(generate_with_latent(cfg)?.cohort)
}

pub fn generate_with_latent(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let h = cfg.hidden;
    let mut grng = derived_rng(cfg.seed, &[0x6e0]);
    let inv = |n: usize| 1.0 / math::sqrt(n as f64);
    let renderers: Vec<Renderer> = Modality::ALL
        .iter()
        .map(|m| Renderer {
            a: gaussian(&mut grng, &[h, LATENT_DIM], 1.5 * inv(LATENT_DIM)),
            s: gaussian(&mut grng, &[h, LATENT_DIM], inv(LATENT_DIM)),
            b: gaussian(&mut grng, &[cfg.dims[m.index()], h], inv(h)),
            site: (0..cfg.n_sites)
                .map(|_| (0..h).map(|_| cfg.site_scale * normal(&mut grng)).collect())
                .collect(),
        })
        .collect();
    let mut w = [0.0; LATENT_DIM];
    w.iter_mut().for_each(|v| *v = normal(&mut grng));
    let wn = math::sqrt(w.iter().map(|v| v * v).sum());
    w.iter_mut().for_each(|v| *v /= wn);
    // progression direction shares most of its weight with the hazard direction
    let mut wp = [0.0; LATENT_DIM];
    wp.iter_mut().zip(&w).for_each(|(p, &a)| *p = 0.8 * a + 0.6 * normal(&mut grng) / math::sqrt(LATENT_DIM as f64));

    let ln2 = core::f64::consts::LN_2;
    let base_rate = ln2 / cfg.baseline_median_months;
    let censor = Exp::new(ln2 / cfg.censor_median_months).map_err(|e| Error::InvalidConfig(format!("{}", e)))?;

    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut latent = Vec::with_capacity(cfg.n_patients);
    let width = digits(cfg.n_patients);
    let mut pre = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for i in 0..cfg.n_patients {
        let mut rng = derived_rng(cfg.seed, &[0x9a7, i as u64]);
        let mut z = [0.0; LATENT_DIM];
        z.iter_mut().for_each(|v| *v = normal(&mut rng));
        let site = rng.gen_range(0..cfg.n_sites);

        let mut keep: [bool; 3] = core::array::from_fn(|m| rng.gen::<f64>() >= cfg.missing_rates[m]);
        if !keep.iter().any(|&k| k) {
            keep[rng.gen_range(0..3)] = true;
        }

        let mut embeddings: [Option<Embedding>; 3] = [None, None, None];
        for m in Modality::ALL {
            // draw every modality so availability does not shift other streams
            let mut mrng = derived_rng(cfg.seed, &[0x9a7, i as u64, 1 + m.index() as u64]);
            let r = &renderers[m.index()];
            let mut eta = [0.0; LATENT_DIM];
            eta.iter_mut().for_each(|v| *v = cfg.nuisance_scale * normal(&mut mrng));
            matvec(&r.a, &z, &mut pre);
            matvec(&r.s, &eta, &mut tmp);
            for k in 0..h {
                pre[k] += tmp[k] + r.site[site as usize][k];
            }
            let max_len = cfg.lengths[m.index()];
            let len = if max_len == 1 { 1 } else { mrng.gen_range(max_len.div_ceil(2)..=max_len) };
            let d = cfg.dims[m.index()];
            let mut data = vec![0.0; len * d];
            let mut act = vec![0.0; h];
            for row in 0..len {
                for k in 0..h {
                    act[k] = math::tanh(pre[k] + cfg.row_scale * normal(&mut mrng));
                }
                let out = &mut data[row * d..(row + 1) * d];
                matvec(&r.b, &act, out);
                out.iter_mut().for_each(|v| *v += cfg.noise * normal(&mut mrng));
            }
            if keep[m.index()] {
                embeddings[m.index()] = Some(Embedding::new(Tensor::new(vec![len, d], data)?)?);
            }
        }

        let risk: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum();
        let prog: f64 = wp.iter().zip(&z).map(|(a, b)| a * b).sum();
        let t_event = Exp::new(base_rate * math::exp(cfg.hazard_coupling * risk)).expect("positive rate").sample(&mut rng);
        let t_prog =
            Exp::new(1.5 * base_rate * math::exp(cfg.hazard_coupling * prog)).expect("positive rate").sample(&mut rng);
        let t_censor = censor.sample(&mut rng);
        let survival = Outcome { time_months: t_event.min(t_censor), censored: t_censor < t_event };
        let first = t_event.min(t_prog);
        let pfi = Outcome { time_months: first.min(t_censor), censored: t_censor < first };

        patients.push(PatientRecord {
            id: format!("P{:0width$}", i, width = width),
            embeddings,
            survival,
            pfi: Some(pfi),
            site,
        });
        latent.push(z);
    }
    let cohort = Cohort::new(patients, cfg.modality_dims())?;
    Ok(SynthCohort { cohort, latent, hazard_direction: w })
}

fn digits(n: usize) -> usize {
    let mut d = 1;
    let mut x = n.saturating_sub(1);
    while x >= 10 {
        x /= 10;
        d += 1;
    }
    d.max(5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Availability;

    fn small() -> SynthConfig {
        SynthConfig { n_patients: 60, lengths: [6, 1, 5], dims: [4, 5, 3], ..SynthConfig::default() }
    }

    #[test]
    fn no_missingness_gives_trimodal() {
        let cfg = SynthConfig { missing_rates: [0.0; 3], ..small() };
        let c = generate_synthetic_cohort(&cfg).unwrap();
        assert!(c.patients.iter().all(|p| p.availability() == Availability::FULL));
    }

    #[test]
    fn regeneration_is_identical() {
        let a = generate_synthetic_cohort(&small()).unwrap();
        let b = generate_synthetic_cohort(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_cohort(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_patient_has_a_modality_even_at_high_missingness() {
        let cfg = SynthConfig { missing_rates: [0.95; 3], n_patients: 200, ..small() };
        let c = generate_synthetic_cohort(&cfg).unwrap();
        assert!(c.patients.iter().all(|p| !p.availability().is_empty()));
    }

    #[test]
    fn rejects_bad_rates() {
        for r in [1.0, -0.1, f64::NAN] {
            let cfg = SynthConfig { missing_rates: [0.1, r, 0.1], ..small() };
            assert!(matches!(generate_synthetic_cohort(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn shapes_follow_config() {
        let c = generate_synthetic_cohort(&small()).unwrap();
        for p in &c.patients {
            for m in Modality::ALL {
                if let Some(e) = p.embedding(m) {
                    assert_eq!(e.dim(), small().dims[m.index()]);
                    assert!(e.len() <= small().lengths[m.index()] && e.len() >= 1);
                }
            }
        }
        assert_eq!(c.patients[0].id, "P00000");
    }
}
