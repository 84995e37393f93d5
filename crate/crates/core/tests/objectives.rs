use protomiss_core::augment::{sample_view, ViewSample};
use protomiss_core::cohort::{Availability, Cohort, Modality, PatientRecord};
use protomiss_core::config::{AugmentConfig, Fill, LossConfig, ModelConfig};
use protomiss_core::model::PrimeModel;
use protomiss_core::objectives::{
    alignment_loss, apply_views, info_nce, pair_cohort, total_loss, ProjectionHeads, ViewSampler, PAIRS,
};
use protomiss_core::rng::{derived_rng, rng_from};
use protomiss_core::synth::{generate_synthetic_cohort, SynthConfig};
use protomiss_core::{grad_check, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng as _;

fn setup(missing: f64) -> (Cohort, ModelConfig) {
    let s = SynthConfig { n_patients: 60, lengths: [4, 1, 3], dims: [6, 5, 4], missing_rates: [missing; 3], ..SynthConfig::default() };
    let m = ModelConfig { input_dims: [6, 5, 4], t_q: 2, d: 8, n_heads: 2, k_c: 5, proj_dim: 4, n_experts: 3, top_k: 2, ..ModelConfig::default() };
    (generate_synthetic_cohort(&s).unwrap(), m)
}

fn brute_force_alignment(model: &PrimeModel, heads: &ProjectionHeads, ps: &ParamStore, batch: &[&PatientRecord], temp: f64) -> f64 {
    let avail: Vec<Availability> = batch.iter().map(|p| p.availability()).collect();
    let t_q = model.cfg.t_q;
    let mut terms = Vec::new();
    for (m, n) in PAIRS {
        let omega = pair_cohort(&avail, m, n);
        if omega.len() < 2 {
            continue;
        }
        let sub: Vec<&PatientRecord> = omega.iter().map(|&i| batch[i]).collect();
        let sub_avail: Vec<Availability> = omega.iter().map(|&i| avail[i]).collect();
        let mut tape = Tape::new();
        let c = model.complete(&mut tape, ps, &sub, &sub_avail).unwrap();
        let mut proj = |k: Modality| {
            let v = tape.group_mean(c.refined[k.index()], t_q).unwrap();
            heads.modality[k.index()].forward(&mut tape, ps, v).unwrap()
        };
        let (vm, vn) = (proj(m), proj(n));
        let l = info_nce(&mut tape, vm, vn, temp).unwrap();
        terms.push(tape.value(l).item());
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

#[test]
fn alignment_equals_loss_on_filtered_sub_batches() {
    let (cohort, mc) = setup(0.45);
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, &mc, 1).unwrap();
    let heads = ProjectionHeads::new(&mut ps, &mc, 1);
    let mut rng = rng_from(11);
    for _ in 0..100 {
        let size = rng.gen_range(1..=10);
        let batch: Vec<&PatientRecord> = (0..size).map(|_| &cohort.patients[rng.gen_range(0..cohort.len())]).collect();
        let avail: Vec<Availability> = batch.iter().map(|p| p.availability()).collect();
        let mut tape = Tape::new();
        let c = model.complete(&mut tape, &ps, &batch, &avail).unwrap();
        let l = alignment_loss(&mut tape, &ps, &heads, &c, mc.t_q, 0.1).unwrap();
        let want = brute_force_alignment(&model, &heads, &ps, &batch, 0.1);
        assert!((tape.value(l).item() - want).abs() < 1e-12, "{} vs {}", tape.value(l).item(), want);
    }
}

#[test]
fn image_only_batches_have_no_alignment() {
    let (cohort, mc) = setup(0.3);
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, &mc, 1).unwrap();
    let heads = ProjectionHeads::new(&mut ps, &mc, 1);
    let restricted: Vec<PatientRecord> = cohort
        .patients
        .iter()
        .filter(|p| p.availability().has(Modality::Image))
        .take(8)
        .map(|p| p.restricted(Availability::only(Modality::Image)).unwrap())
        .collect();
    let batch: Vec<&PatientRecord> = restricted.iter().collect();
    let avail = vec![Availability::only(Modality::Image); batch.len()];
    let mut tape = Tape::new();
    let c = model.complete(&mut tape, &ps, &batch, &avail).unwrap();
    let l = alignment_loss(&mut tape, &ps, &heads, &c, mc.t_q, 0.1).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn image_only_patient_leaves_rna_text_term_alone() {
    let (cohort, mc) = setup(0.0);
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, &mc, 1).unwrap();
    let heads = ProjectionHeads::new(&mut ps, &mc, 1);
    let rt = Availability([false, true, true]);
    let base: Vec<PatientRecord> = cohort.patients[..5].iter().map(|p| p.restricted(rt).unwrap()).collect();
    let extra = cohort.patients[5].restricted(Availability::only(Modality::Image)).unwrap();
    let run = |batch: Vec<&PatientRecord>| {
        let avail: Vec<Availability> = batch.iter().map(|p| p.availability()).collect();
        let mut tape = Tape::new();
        let c = model.complete(&mut tape, &ps, &batch, &avail).unwrap();
        let l = alignment_loss(&mut tape, &ps, &heads, &c, mc.t_q, 0.1).unwrap();
        tape.value(l).item()
    };
    let a = run(base.iter().collect());
    let mut with: Vec<&PatientRecord> = base.iter().collect();
    with.insert(2, &extra);
    assert!((a - run(with)).abs() < 1e-12);
}

#[test]
fn fully_trimodal_batch_uses_every_pair() {
    let (cohort, mc) = setup(0.0);
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, &mc, 1).unwrap();
    let heads = ProjectionHeads::new(&mut ps, &mc, 1);
    let batch: Vec<&PatientRecord> = cohort.patients[..6].iter().collect();
    let avail = vec![Availability::FULL; 6];
    let mut tape = Tape::new();
    let c = model.complete(&mut tape, &ps, &batch, &avail).unwrap();
    let l = alignment_loss(&mut tape, &ps, &heads, &c, mc.t_q, 0.1).unwrap();
    let v: Vec<Var> = Modality::ALL
        .iter()
        .map(|m| {
            let g = tape.group_mean(c.refined[m.index()], mc.t_q).unwrap();
            heads.modality[m.index()].forward(&mut tape, &ps, g).unwrap()
        })
        .collect();
    let mut want = 0.0;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let t = info_nce(&mut tape, v[a], v[b], 0.1).unwrap();
        want += tape.value(t).item() / 3.0;
    }
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn untouched_views_reproduce_the_fused_sequence() {
    let (cohort, mc) = setup(0.4);
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, &mc, 1).unwrap();
    let batch: Vec<&PatientRecord> = cohort.patients[..7].iter().collect();
    let avail: Vec<Availability> = batch.iter().map(|p| p.availability()).collect();
    let cfg = AugmentConfig { p_mod: 0.0, p_tok: 0.0, ..AugmentConfig::default() };
    let mut tape = Tape::new();
    let c = model.complete(&mut tape, &ps, &batch, &avail).unwrap();
    let q = tape.value(c.q_bar).clone();
    let views: Vec<ViewSample> =
        (0..7).map(|i| sample_view(avail[i], q.row(i), mc.t_q, &cfg, &mut rng_from(i as u64)).unwrap()).collect();
    for (v, a) in views.iter().zip(&avail) {
        assert_eq!(v, &ViewSample::identity(*a, mc.t_q));
    }
    let x = apply_views(&mut tape, &ps, &model, c.fused, &views, Fill::Prototype).unwrap();
    assert_eq!(tape.value(x), tape.value(c.fused));
}

#[test]
fn one_hot_refill_is_the_argmax_prototype() {
    let (cohort, mc) = setup(0.0);
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, &mc, 1).unwrap();
    let batch: Vec<&PatientRecord> = cohort.patients[..4].iter().collect();
    let avail = vec![Availability::FULL; 4];
    let cfg = AugmentConfig { p_mod: 0.5, p_tok: 0.5, k_s: 1, ..AugmentConfig::default() };
    let mut tape = Tape::new();
    let c = model.complete(&mut tape, &ps, &batch, &avail).unwrap();
    let q = tape.value(c.q_bar).clone();
    let mut rng = rng_from(5);
    let views: Vec<ViewSample> = (0..4).map(|i| sample_view(avail[i], q.row(i), mc.t_q, &cfg, &mut rng).unwrap()).collect();
    let x = apply_views(&mut tape, &ps, &model, c.fused, &views, Fill::Prototype).unwrap();
    let mut checked = 0;
    for (i, v) in views.iter().enumerate() {
        let row = q.row(i);
        let argmax = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        let proto = model.bank.prototype(&ps, argmax);
        for (pos, &r) in v.replaced.iter().enumerate() {
            let got = tape.value(x).row(i * 3 * mc.t_q + pos);
            if r {
                assert_eq!(got, proto.row(pos % mc.t_q));
                checked += 1;
            } else {
                assert_eq!(got, tape.value(c.fused).row(i * 3 * mc.t_q + pos));
            }
        }
    }
    assert!(checked > 0);
}

fn heads_and_model(mc: &ModelConfig) -> (ParamStore, PrimeModel, ProjectionHeads) {
    let mut ps = ParamStore::new();
    let model = PrimeModel::new(&mut ps, mc, 2).unwrap();
    let heads = ProjectionHeads::new(&mut ps, mc, 2);
    (ps, model, heads)
}

fn grads_by_prefix(ps: &ParamStore, tape: &Tape, loss: Var, prefix: &str) -> f64 {
    let g = tape.backward(loss).unwrap();
    tape.bound_params()
        .filter(|(id, _)| ps.name(*id).starts_with(prefix))
        .map(|(_, v)| g.get(v).map_or(0.0, |s| s.iter().map(|x| x.abs()).sum()))
        .sum()
}

#[test]
fn lambda_switches_remove_terms_from_the_gradient() {
    let (cohort, mc) = setup(0.2);
    let (ps, model, heads) = heads_and_model(&mc);
    let batch: Vec<&PatientRecord> = cohort.patients[..8].iter().collect();
    let keys: Vec<u64> = (0..8).collect();
    let sampler = ViewSampler::Fresh { seed: 3, epoch: 0 };
    let aug = AugmentConfig::default();
    for (lambda, dead, live) in [(1.0, "proj.fusion", "proj.image"), (0.0, "proj.image", "proj.fusion")] {
        let loss = LossConfig { lambda, ..LossConfig::default() };
        let mut tape = Tape::new();
        let f = total_loss(&mut tape, &ps, &model, &heads, &batch, &keys, &sampler, &aug, &loss).unwrap();
        assert_eq!(grads_by_prefix(&ps, &tape, f.total, dead), 0.0);
        assert!(grads_by_prefix(&ps, &tape, f.total, live) > 0.0);
        let p = f.parts;
        let recombined = lambda * p.align + (1.0 - lambda) * p.fusion + loss.lambda_router * p.router;
        assert!((p.total - recombined).abs() < 1e-12);
    }
}

#[test]
fn fresh_views_do_not_depend_on_batch_composition() {
    let (cohort, mc) = setup(0.2);
    let (ps, model, heads) = heads_and_model(&mc);
    let sampler = ViewSampler::Fresh { seed: 3, epoch: 4 };
    let aug = AugmentConfig::default();
    let loss = LossConfig::default();
    let run = |idx: &[usize]| {
        let batch: Vec<&PatientRecord> = idx.iter().map(|&i| &cohort.patients[i]).collect();
        let keys: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let mut tape = Tape::new();
        total_loss(&mut tape, &ps, &model, &heads, &batch, &keys, &sampler, &aug, &loss).unwrap().views
    };
    let a = run(&[0, 1, 2, 3]);
    let b = run(&[3, 9, 1]);
    assert_eq!(a[3], b[0]);
    assert_eq!(a[1], b[2]);
}

fn check_params(ps: &ParamStore, names: &[&str], mut f: impl FnMut(&mut Tape) -> Var) -> f64 {
    let ids: Vec<ParamId> = names.iter().map(|n| ps.id(n).unwrap_or_else(|| panic!("no param {}", n))).collect();
    let mut tensors: Vec<_> = ids.iter().map(|&i| ps.get(i).clone()).collect();
    let r = grad_check(&mut tensors, 1e-6, |tape, vars| {
        for (&id, &v) in ids.iter().zip(vars) {
            tape.bind(id, v);
        }
        Ok(f(tape))
    })
    .unwrap();
    r.max_rel_err
}

#[test]
fn refinement_gradients_match_finite_differences() {
    let (cohort, mc) = setup(0.3);
    let (ps, model, _) = heads_and_model(&mc);
    let batch: Vec<&PatientRecord> = cohort.patients[..3].iter().collect();
    let avail: Vec<Availability> = batch.iter().map(|p| p.availability()).collect();
    let err = check_params(&ps, &["refine.rna.0.attn.q.w", "refine.rna.0.ffn.up.w", "bank.protos", "tok.image.queries"], |tape| {
        let c = model.complete(tape, &ps, &batch, &avail).unwrap();
        let sq = tape.mul(c.refined[1], c.refined[1]).unwrap();
        let s = tape.sum(sq).unwrap();
        let t = tape.sum(c.refined[0]).unwrap();
        tape.add(s, t).unwrap()
    });
    assert!(err < 1e-4, "{}", err);
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let (cohort, mc) = setup(0.0);
    let (ps, model, _) = heads_and_model(&mc);
    let batch: Vec<&PatientRecord> = cohort.patients[..3].iter().collect();
    let avail = vec![Availability::FULL; 3];
    let names = ["backbone.0.attn.k.w", "backbone.1.gate.w", "backbone.1.modality_emb", "backbone.1.expert0.down.w", "backbone.segment"];
    let err = check_params(&ps, &names, |tape| {
        let c = model.complete(tape, &ps, &batch, &avail).unwrap();
        let o = model.backbone.forward(tape, &ps, c.fused).unwrap();
        let sq = tape.mul(o.out, o.out).unwrap();
        let s = tape.sum(sq).unwrap();
        let r = tape.add(s, o.router_losses[0]).unwrap();
        r
    });
    assert!(err < 1e-4, "{}", err);
}

#[test]
fn total_loss_gradients_match_with_frozen_views() {
    let (cohort, mc) = setup(0.3);
    let (ps, model, heads) = heads_and_model(&mc);
    let batch: Vec<&PatientRecord> = cohort.patients[..4].iter().collect();
    let keys: Vec<u64> = (0..4).collect();
    let aug = AugmentConfig { k_s: 3, ..AugmentConfig::default() };
    let loss = LossConfig::default();
    let frozen = {
        let mut tape = Tape::new();
        let f = total_loss(&mut tape, &ps, &model, &heads, &batch, &keys, &ViewSampler::Fresh { seed: 8, epoch: 0 }, &aug, &loss).unwrap();
        assert!(f.views.iter().any(|v| v[0].weights.is_some()));
        ViewSampler::Frozen(f.views)
    };
    let names = ["proj.fusion.up.w", "proj.rna.down.w", "bank.protos", "backbone.1.gate.w", "refine.text.0.ln1.gamma"];
    let err = check_params(&ps, &names, |tape| {
        total_loss(tape, &ps, &model, &heads, &batch, &keys, &frozen, &aug, &loss).unwrap().total
    });
    assert!(err < 1e-4, "{}", err);
}

#[test]
fn view_streams_are_keyed_by_patient_and_epoch() {
    let cfg = AugmentConfig::default();
    let q = vec![0.2; 5];
    let draw = |epoch: u64, key: u64| sample_view(Availability::FULL, &q, 4, &cfg, &mut derived_rng(1, &[epoch, key, 0])).unwrap();
    let s = ViewSampler::Fresh { seed: 1, epoch: 2 };
    assert_eq!(s.views(0, 7, Availability::FULL, &q, 4, &cfg).unwrap()[0], draw(2, 7));
}

#[test]
fn info_nce_on_three_pairs_matches_finite_differences() {
    let mut rng = rng_from(21);
    let mut params: Vec<Tensor> = (0..2)
        .map(|_| Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let r = grad_check(&mut params, 1e-6, |tape, v| {
        let a = tape.l2_normalize_rows(v[0], "a")?;
        let b = tape.l2_normalize_rows(v[1], "b")?;
        info_nce(tape, a, b, 0.1)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
}
