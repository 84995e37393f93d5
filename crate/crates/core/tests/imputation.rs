use protomiss_core::augment::{sample_dirichlet, top_k_sparsify};
use protomiss_core::cohort::{Embedding, Modality};
use protomiss_core::config::ModelConfig;
use protomiss_core::prototype::{consensus_of, impute_missing, soft_assign, PrototypeBank};
use protomiss_core::rng::{derived_rng, normal, Rng};
use protomiss_core::tensor::Tensor;
use protomiss_core::tokenizer::{ModalityTokenizer, Provenance, TokenBlock};
use protomiss_core::{grad_check, ParamStore};
use rand::Rng as _;

fn cfg(k_c: usize) -> ModelConfig {
    ModelConfig { input_dims: [5, 4, 3], t_q: 3, d: 6, n_heads: 2, k_c, ..ModelConfig::default() }
}

fn bank(k_c: usize, seed: u64) -> (ParamStore, PrototypeBank) {
    let mut ps = ParamStore::new();
    let b = PrototypeBank::new(&mut ps, &cfg(k_c), &mut derived_rng(seed, &[]));
    // spread the prototypes out so the hull is not degenerate
    ps.get_mut(b.protos).data_mut().iter_mut().for_each(|v| *v *= 50.0);
    (ps, b)
}

fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = normal(rng));
    t
}

#[test]
fn imputed_tokens_lie_in_the_prototype_hull() {
    let (ps, b) = bank(7, 1);
    let mut rng = derived_rng(2, &[]);
    let protos: Vec<Tensor> = (0..7).map(|k| b.prototype(&ps, k)).collect();
    for _ in 0..200 {
        let q = random_simplex(&mut rng, 7);
        let u = impute_missing(&b, &ps, &q, Modality::Rna).unwrap();
        assert!(u.provenance.iter().all(|&p| p == Provenance::Imputed));
        for (e, &v) in u.tokens.data().iter().enumerate() {
            let lo = protos.iter().map(|c| c.data()[e]).fold(f64::INFINITY, f64::min);
            let hi = protos.iter().map(|c| c.data()[e]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= v && v <= hi, "coordinate {} = {} outside [{}, {}]", e, v, lo, hi);
        }
    }
}

#[test]
fn one_hot_consensus_returns_the_prototype_exactly() {
    let (ps, b) = bank(5, 3);
    for k in 0..5 {
        let mut q = vec![0.0; 5];
        q[k] = 1.0;
        let u = impute_missing(&b, &ps, &q, Modality::Text).unwrap();
        assert_eq!(u.tokens, b.prototype(&ps, k));
    }
}

#[test]
fn single_survivor_dirichlet_is_the_argmax_prototype() {
    let (ps, b) = bank(6, 4);
    let mut rng = derived_rng(5, &[]);
    for _ in 0..50 {
        let q = random_simplex(&mut rng, 6);
        let argmax = (0..6).fold(0, |best, k| if q[k] > q[best] { k } else { best });
        let w = sample_dirichlet(&top_k_sparsify(&q, 1), 50.0, &mut rng);
        let mut one_hot = vec![0.0; 6];
        one_hot[argmax] = 1.0;
        assert_eq!(w, one_hot);
        let u = impute_missing(&b, &ps, &w, Modality::Image).unwrap();
        assert_eq!(u.tokens, b.prototype(&ps, argmax));
    }
}

#[test]
fn uniform_consensus_over_two_prototypes_is_the_midpoint() {
    let (ps, b) = bank(2, 6);
    let u = impute_missing(&b, &ps, &[0.5, 0.5], Modality::Rna).unwrap();
    let (c0, c1) = (b.prototype(&ps, 0), b.prototype(&ps, 1));
    for ((u, a), c) in u.tokens.data().iter().zip(c0.data()).zip(c1.data()) {
        assert!((u - 0.5 * (a + c)).abs() < 1e-12);
    }
}

#[test]
fn assignment_ignores_token_scale() {
    let (ps, b) = bank(8, 7);
    let mut rng = derived_rng(8, &[]);
    for _ in 0..20 {
        let tokens = randn(&mut rng, &[3, 6]);
        let block = |t: Tensor| TokenBlock { tokens: t, modality: Modality::Image, provenance: vec![Provenance::Observed; 3] };
        let q = soft_assign(&b, &ps, &block(tokens.clone())).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.iter().all(|&v| v > 0.0));
        let c = rng.gen_range(0.01..100.0);
        let scaled = Tensor::new(vec![3, 6], tokens.data().iter().map(|v| v * c).collect()).unwrap();
        let qs = soft_assign(&b, &ps, &block(scaled)).unwrap();
        for (a, s) in q.iter().zip(&qs) {
            assert!((a - s).abs() < 1e-12);
        }
    }
}

#[test]
fn consensus_is_the_mean_of_assignments() {
    let c = consensus_of(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![1.0, 0.0]]).unwrap();
    assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.4).abs() < 1e-15);
    assert!(consensus_of(&[]).is_err());
}

fn tokenizer(seed: u64) -> (ParamStore, ModalityTokenizer) {
    let mut ps = ParamStore::new();
    let tok = ModalityTokenizer::new(&mut ps, &cfg(4), Modality::Rna, &mut derived_rng(seed, &[]));
    (ps, tok)
}

#[test]
fn tokenizer_is_invariant_to_row_order() {
    let (ps, tok) = tokenizer(9);
    let mut rng = derived_rng(10, &[]);
    for l in [2, 7, 30] {
        let x = randn(&mut rng, &[l, 4]);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.reverse();
        perm.swap(0, l / 2);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        let a = tok.tokenize(&ps, &Embedding::new(x).unwrap()).unwrap();
        let b = tok.tokenize(&ps, &Embedding::new(Tensor::new(vec![l, 4], shuffled).unwrap()).unwrap()).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) < 1e-12);
    }
}

#[test]
fn tokenizer_output_has_fixed_shape_for_any_length() {
    let (ps, tok) = tokenizer(11);
    let mut rng = derived_rng(12, &[]);
    for l in [1, 7, 500] {
        let b = tok.tokenize(&ps, &Embedding::new(randn(&mut rng, &[l, 4])).unwrap()).unwrap();
        assert_eq!(b.tokens.shape(), &[3, 6]);
        assert!(b.tokens.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn tokenizer_gradients_match_finite_differences() {
    let (ps, tok) = tokenizer(13);
    let mut rng = derived_rng(14, &[]);
    let embs: Vec<Embedding> = [3, 1, 5].iter().map(|&l| Embedding::new(randn(&mut rng, &[l, 4])).unwrap()).collect();
    let names = ["tok.rna.proj.w", "tok.rna.queries", "tok.rna.attn.k.w", "tok.rna.attn.v.w", "tok.rna.ln_kv.gamma", "tok.rna.ffn.up.w"];
    let ids: Vec<_> = names.iter().map(|n| ps.id(n).unwrap_or_else(|| panic!("no param {}", n))).collect();
    // a fixed random readout keeps the loss from being symmetric in the tokens
    let readout = randn(&mut rng, &[9, 6]);
    let mut params: Vec<Tensor> = ids.iter().map(|&id| ps.get(id).clone()).collect();
    let ps_ref = &ps;
    let report = grad_check(&mut params, 1e-6, |tape, vars| {
        for (&id, &v) in ids.iter().zip(vars) {
            tape.bind(id, v);
        }
        let refs: Vec<&Embedding> = embs.iter().collect();
        let z = tok.forward_batch(tape, ps_ref, &refs)?;
        let r = tape.constant(readout.clone());
        let p = tape.mul(z, r)?;
        let s = tape.sum(p)?;
        let sq = tape.mul(s, s)?;
        Ok(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{:?}", report.per_tensor);
}
