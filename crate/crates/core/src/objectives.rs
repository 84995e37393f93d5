//! Pretraining losses: masked pairwise alignment, augmented-view fusion
//! consistency and the router penalty.

use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{sample_view, ViewSample};
use crate::autodiff::{Tape, Var};
use crate::cohort::{Availability, Modality, PatientRecord};
use crate::config::{AugmentConfig, Fill, LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{Completed, PrimeModel};
use crate::nn::Ffn;
use crate::params::ParamStore;
use crate::rng::{derived_rng, Rng};
use crate::tensor::Tensor;

/// Modality pairs of the alignment term.
pub const PAIRS: [(Modality, Modality); 3] =
    [(Modality::Image, Modality::Rna), (Modality::Image, Modality::Text), (Modality::Rna, Modality::Text)];

/// Two-layer MLP `D -> D -> D_d` followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub mlp: Ffn,
}

impl ProjectionHead {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, out: usize, rng: &mut Rng) -> Self {
        Self { mlp: Ffn::new(ps, name, d, d, out, rng) }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let y = self.mlp.forward(tape, ps, x)?;
        tape.l2_normalize_rows(y, "projection")
    }
}

/// `g_I, g_R, g_T` and the fusion head `g_f`.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub modality: Vec<ProjectionHead>,
    pub fusion: ProjectionHead,
}

impl ProjectionHeads {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = derived_rng(seed, &[0x9e4d]);
        let modality = Modality::ALL
            .iter()
            .map(|m| ProjectionHead::new(ps, &alloc::format!("proj.{}", m.name()), cfg.d, cfg.proj_dim, &mut rng))
            .collect();
        let fusion = ProjectionHead::new(ps, "proj.fusion", cfg.d, cfg.proj_dim, &mut rng);
        Self { modality, fusion }
    }
}

/// Symmetric InfoNCE between matched rows of `a` and `b`, both unit-norm.
pub fn info_nce(tape: &mut Tape, a: Var, b: Var, temp: f64) -> Result<Var> {
    if tape.value(a).rows() == 0 || tape.shape(a).first() == Some(&0) {
        return Err(Error::EmptyBatch);
    }
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch { op: "info_nce", detail: alloc::format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)) });
    }
    let s = tape.matmul_t(a, b, false, true)?;
    let s = tape.scale(s, 1.0 / temp)?;
    let l_ab = tape.cross_entropy_diag(s)?;
    let st = tape.transpose(s)?;
    let l_ba = tape.cross_entropy_diag(st)?;
    let l = tape.add(l_ab, l_ba)?;
    tape.scale(l, 0.5)
}

/// Value-only InfoNCE over rows of two `[n, k]` tensors.
pub fn info_nce_value(a: &Tensor, b: &Tensor, temp: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = info_nce(&mut tape, a, b, temp)?;
    Ok(tape.value(l).item())
}

/// Patients holding both modalities of a pair.
pub fn pair_cohort(avail: &[Availability], m: Modality, n: Modality) -> Vec<usize> {
    (0..avail.len()).filter(|&i| avail[i].has(m) && avail[i].has(n)).collect()
}

/// Mean over pairs with at least two co-observed patients; zero if none.
pub fn alignment_loss(tape: &mut Tape, ps: &ParamStore, heads: &ProjectionHeads, c: &Completed, t_q: usize, temp: f64) -> Result<Var> {
    let mut terms = Vec::new();
    for (m, n) in PAIRS {
        let omega = pair_cohort(&c.avail, m, n);
        if omega.len() < 2 {
            continue;
        }
        let rows: Vec<usize> = omega.iter().flat_map(|&i| (i * t_q)..(i * t_q + t_q)).collect();
        let mut proj = [m, n].into_iter().map(|k| {
            let z = tape.gather_rows(c.refined[k.index()], &rows)?;
            let v = tape.group_mean(z, t_q)?;
            heads.modality[k.index()].forward(tape, ps, v)
        });
        let (vm, vn) = (proj.next().unwrap()?, proj.next().unwrap()?);
        terms.push(info_nce(tape, vm, vn, temp)?);
    }
    mean_of(tape, &terms)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Reliability-weighted mean of each `seq`-row group of `o`.
pub fn masked_pool(tape: &mut Tape, o: Var, reliable: &[bool], seq: usize) -> Result<Var> {
    let rows = tape.value(o).rows();
    if rows % seq != 0 || reliable.len() != rows {
        return Err(Error::ShapeMismatch { op: "masked_pool", detail: alloc::format!("{} rows, {} flags, groups of {}", rows, reliable.len(), seq) });
    }
    let offsets: Vec<usize> = (0..=rows / seq).map(|i| i * seq).collect();
    let w: Vec<f64> = reliable.iter().map(|&r| f64::from(u8::from(r))).collect();
    tape.group_weighted_mean(o, &offsets, &w)
}

/// Builds the augmented fused sequences for one view of a batch.
pub fn apply_views(tape: &mut Tape, ps: &ParamStore, model: &PrimeModel, fused: Var, views: &[ViewSample], fill: Fill) -> Result<Var> {
    let t_q = model.cfg.t_q;
    let seq = 3 * t_q;
    let total = views.len() * seq;
    if tape.value(fused).rows() != total {
        return Err(Error::ShapeMismatch { op: "apply_views", detail: alloc::format!("{} rows for {} views", tape.value(fused).rows(), views.len()) });
    }
    let mask: Vec<f64> = views.iter().flat_map(|v| v.replaced.iter().map(|&r| f64::from(u8::from(!r)))).collect();
    let mask = tape.constant(Tensor::new(vec![total], mask)?);
    let kept = tape.row_scale(fused, mask)?;
    if fill == Fill::Zero {
        return Ok(kept);
    }
    let mut weights = Vec::new();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, v) in views.iter().enumerate() {
        let Some(w) = &v.weights else { continue };
        let j = weights.len() / model.bank.k_c;
        weights.extend_from_slice(w);
        for (pos, _) in v.replaced.iter().enumerate().filter(|(_, &r)| r) {
            src.push(j * t_q + pos % t_q);
            dst.push(i * seq + pos);
        }
    }
    if dst.is_empty() {
        return Ok(kept);
    }
    let r = weights.len() / model.bank.k_c;
    let w = tape.constant(Tensor::new(vec![r, model.bank.k_c], weights)?);
    let u = model.bank.mix(tape, ps, w)?;
    let g = tape.gather_rows(u, &src)?;
    let s = tape.scatter_rows(g, &dst, total)?;
    tape.add(kept, s)
}

/// Inter-view consistency: pool each contextualized view over its reliable
/// tokens, project with `g_f` and compare with InfoNCE.
pub fn fusion_loss(tape: &mut Tape, ps: &ParamStore, head: &ProjectionHead, o: Var, reliable: &[bool], seq: usize, temp: f64) -> Result<Var> {
    let pooled = masked_pool(tape, o, reliable, seq)?;
    let h = head.forward(tape, ps, pooled)?;
    let n2 = tape.value(h).rows();
    let h1 = tape.slice_rows(h, 0, n2 / 2)?;
    let h2 = tape.slice_rows(h, n2 / 2, n2)?;
    info_nce(tape, h1, h2, temp)
}

/// Where the two views of each patient come from.
#[derive(Clone, Debug)]
pub enum ViewSampler {
    /// Drawn from a stream keyed by seed, epoch, patient key and view.
    Fresh { seed: u64, epoch: u64 },
    /// Fixed views, one pair per batch position.
    Frozen(Vec<[ViewSample; 2]>),
}

impl ViewSampler {
    pub fn views(&self, pos: usize, key: u64, avail: Availability, q_bar: &[f64], t_q: usize, cfg: &AugmentConfig) -> Result<[ViewSample; 2]> {
        match self {
            Self::Fresh { seed, epoch } => {
                let draw = |view: u64| sample_view(avail, q_bar, t_q, cfg, &mut derived_rng(*seed, &[*epoch, key, view]));
                Ok([draw(0)?, draw(1)?])
            }
            Self::Frozen(v) => v.get(pos).cloned().ok_or(Error::EmptyBatch),
        }
    }
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub align: f64,
    pub fusion: f64,
    pub router: f64,
    pub total: f64,
}

pub struct PretrainForward {
    pub total: Var,
    pub parts: LossParts,
    pub views: Vec<[ViewSample; 2]>,
}

/// `lambda * align + (1 - lambda) * fusion + lambda_router * router` on one batch.
/// `keys` identify patients for the view streams.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    ps: &ParamStore,
    model: &PrimeModel,
    heads: &ProjectionHeads,
    patients: &[&PatientRecord],
    keys: &[u64],
    sampler: &ViewSampler,
    aug: &AugmentConfig,
    loss: &LossConfig,
) -> Result<PretrainForward> {
    let t_q = model.cfg.t_q;
    let avail = PrimeModel::effective_availability(patients, None)?;
    let c = model.complete(tape, ps, patients, &avail)?;
    let align = alignment_loss(tape, ps, heads, &c, t_q, loss.align_temp)?;

    let q = tape.value(c.q_bar).clone();
    let views = (0..c.n)
        .map(|i| sampler.views(i, keys[i], avail[i], q.row(i), t_q, aug))
        .collect::<Result<Vec<_>>>()?;
    let fill = aug.fill;
    let firsts: Vec<ViewSample> = views.iter().map(|v| v[0].clone()).collect();
    let seconds: Vec<ViewSample> = views.iter().map(|v| v[1].clone()).collect();
    let x1 = apply_views(tape, ps, model, c.fused, &firsts, fill)?;
    let x2 = apply_views(tape, ps, model, c.fused, &seconds, fill)?;
    let x = tape.concat_rows(&[x1, x2])?;
    let o = model.backbone.forward(tape, ps, x)?;
    let reliable: Vec<bool> = firsts.iter().chain(&seconds).flat_map(|v| v.keep.iter().copied()).collect();
    let fusion = fusion_loss(tape, ps, &heads.fusion, o.out, &reliable, 3 * t_q, loss.fusion_temp)?;
    let router = mean_of(tape, &o.router_losses)?;

    let a = tape.scale(align, loss.lambda)?;
    let f = tape.scale(fusion, 1.0 - loss.lambda)?;
    let r = tape.scale(router, loss.lambda_router)?;
    let af = tape.add(a, f)?;
    let total = tape.add(af, r)?;
    let parts = LossParts {
        align: tape.value(align).item(),
        fusion: tape.value(fusion).item(),
        router: tape.value(router).item(),
        total: tape.value(total).item(),
    };
    Ok(PretrainForward { total, parts, views })
}
