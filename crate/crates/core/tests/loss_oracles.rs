//! Every loss against an independent scalar-loop evaluation.

mod common;

use ccd_core::autodiff::Graph;
use ccd_core::data::Batch;
use ccd_core::losses::{
    class_contrastive_value, loss_align, loss_rec, loss_vae, set_contrastive_value, RecPlans, Similarity,
};
use ccd_core::model::{
    align_forward, apply_swap, CcdModel, CodeVars, DisentangledCode, HiddenActivation, ModelDims, SwapMode,
    SwapPlan,
};
use ccd_core::rng::Rng;
use ccd_core::trainer::{train_step, StepOverrides, TrainConfig};
use ccd_core::Tensor2;
use common::*;
use proptest::prelude::*;

fn dims() -> ModelDims {
    ModelDims {
        d_feat: 5,
        d_attr: 3,
        d_z: 2,
        d_uns: 2,
        d_cs: 2,
        d_cu: 2,
        n_seen: 4,
        hidden: 6,
        encoder_hidden: HiddenActivation::Relu,
    }
}

fn sim_case(k: u64) -> (Similarity, f64, bool) {
    match k % 3 {
        0 => (Similarity::Cosine, 0.1, true),
        1 => (Similarity::Cosine, 1.0, true),
        _ => (Similarity::Dot, 0.5, false),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn set_contrastive_matches_brute_force(seed in any::<u64>(), b in 2usize..=8, d in 1usize..=5, m in 1usize..=3) {
        let mut rng = Rng::new(seed);
        let v = rng.normal_tensor(b, d, 1.0);
        let ids: Vec<usize> = (0..b).map(|_| rng.below(m)).collect();
        let (sim, tau, cosine) = sim_case(seed);
        let got = set_contrastive_value(&v, &ids, tau, sim).unwrap();
        let want = brute_set_contrastive(&rows(&v), &ids, tau, cosine);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn class_contrastive_matches_brute_force(seed in any::<u64>(), b in 2usize..=8, d in 1usize..=5, m in 1usize..=3, k in 1u32..=4) {
        let mut rng = Rng::new(seed);
        let v = rng.normal_tensor(b, d, 1.0);
        let ids: Vec<usize> = (0..b).map(|_| rng.below(m)).collect();
        let classes: Vec<u32> = (0..b).map(|_| rng.below(k as usize) as u32).collect();
        let (sim, tau, cosine) = sim_case(seed);
        let got = class_contrastive_value(&v, &ids, &classes, tau, sim).unwrap();
        let want = brute_class_contrastive(&rows(&v), &ids, &classes, tau, cosine);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn vae_matches_scalar_loop(seed in any::<u64>(), b in 1usize..=8, d in 1usize..=6, z in 1usize..=4) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(b, d, 1.0);
        let x_hat = rng.normal_tensor(b, d, 1.0);
        let mu = rng.normal_tensor(b, z, 1.0);
        let lv = rng.normal_tensor(b, z, 1.0);
        let mut g = Graph::new();
        let vars = [x.clone(), x_hat.clone(), mu.clone(), lv.clone()].map(|t| g.constant(t));
        let l = loss_vae(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let got = g.value(l).item().unwrap();
        let want = scalar_vae(&x, &x_hat, &mu, &lv);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn hand_case_one_positive_one_negative() {
    let v = Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let got = set_contrastive_value(&v, &[0, 0, 1], 1.0, Similarity::Cosine).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.3133).abs() < 1e-4);
}

#[test]
fn identical_vectors_in_one_set() {
    for b in 2..=8 {
        let v = Tensor2::filled(b, 3, 0.7);
        let ids = vec![0; b];
        let got = set_contrastive_value(&v, &ids, 0.1, Similarity::Cosine).unwrap();
        let brute = brute_set_contrastive(&rows(&v), &ids, 0.1, true);
        assert!((got - brute).abs() < 1e-12);
        assert!((got - ((b - 1) as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn class_contrastive_aab_case() {
    let v = Tensor2::from_rows(&[vec![1.0, 0.2], vec![0.8, 0.5], vec![-0.3, 1.0]]).unwrap();
    let classes = [4, 4, 9];
    let got = class_contrastive_value(&v, &[0, 0, 0], &classes, 0.1, Similarity::Cosine).unwrap();
    // only rows 0 and 1 are anchors, each with the other as its positive
    let s = |i: usize, j: usize| pair_sim(v.row(i), v.row(j), 0.1, true);
    let term = |i: usize, p: usize, n: usize| -(s(i, p).exp() / (s(i, p).exp() + s(i, n).exp())).ln();
    let want = 0.5 * (term(0, 1, 2) + term(1, 0, 2));
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!((got - brute_class_contrastive(&rows(&v), &[0, 0, 0], &classes, 0.1, true)).abs() < 1e-12);
}

#[test]
fn align_matches_scalar_cross_entropy() {
    let mut rng = Rng::new(3);
    let logits = rng.normal_tensor(8, 5, 2.0);
    let targets: Vec<usize> = (0..8).map(|_| rng.below(5)).collect();
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = loss_align(&mut g, l, &vec![true; 40], &targets).unwrap();
    let want = scalar_restricted_ce(&logits, &[0, 1, 2, 3, 4], &targets);
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn align_softmax_is_restricted_to_batch_classes() {
    let mut rng = Rng::new(8);
    let model = CcdModel::new(dims(), 1e-3, &mut rng).unwrap();
    let seen = [2u32, 5, 7, 11];
    let labels = [5u32, 11, 5, 5, 11];
    let mat = rng.normal_tensor(labels.len(), 4, 1.0);

    let mut g = Graph::new();
    let head = model.align.bind_frozen(&mut g);
    let m = g.constant(mat.clone());
    let out = align_forward(&mut g, &head, m, &labels, &seen).unwrap();
    assert_eq!(out.batch_classes, 2);
    let loss = loss_align(&mut g, out.logits, &out.mask, &out.targets).unwrap();

    let raw = model.align.apply(&mat).unwrap();
    let targets: Vec<usize> = labels.iter().map(|l| seen.iter().position(|s| s == l).unwrap()).collect();
    let want = scalar_restricted_ce(&raw, &[1, 3], &targets);
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn rec_equals_hand_assembled_terms() {
    let mut rng = Rng::new(21);
    let model = CcdModel::new(dims(), 1e-3, &mut rng).unwrap();
    let x = rng.normal_tensor(4, 5, 1.0);
    let code = DisentangledCode {
        uns: rng.normal_tensor(4, 2, 1.0),
        cs: rng.normal_tensor(4, 2, 1.0),
        cu: rng.normal_tensor(4, 2, 1.0),
    };
    let plans = RecPlans {
        uns: Some(SwapPlan::new(vec![2, 0, 3, 1], SwapMode::Uns).unwrap()),
        cs: Some(SwapPlan::new(vec![1, 0, 2, 3], SwapMode::Cs).unwrap()),
    };

    let mut g = Graph::new();
    let vars = model.bind_main(&mut g);
    let xv = g.constant(x.clone());
    let cv = CodeVars {
        uns: g.constant(code.uns.clone()),
        cs: g.constant(code.cs.clone()),
        cu: g.constant(code.cu.clone()),
    };
    let got = loss_rec(&mut g, &vars, xv, &cv, &plans).unwrap();
    let got = g.value(got).item().unwrap();

    let decode = |c: &DisentangledCode| model.d2.apply(&c.concat()).unwrap();
    let z1 = apply_swap(&code, plans.uns.as_ref().unwrap()).unwrap();
    let z2 = apply_swap(&code, plans.cs.as_ref().unwrap()).unwrap();
    let want = sq_err(&x, &decode(&code)) + sq_err(&x, &decode(&z1)) + sq_err(&x, &decode(&z2));
    assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn unweighted_total_is_vae_plus_rec() {
    let mut rng = Rng::new(4);
    let mut model = CcdModel::new(dims(), 1e-3, &mut rng).unwrap();
    let attrs = rng.normal_tensor(4, 3, 1.0);
    let labels = vec![0u32, 3];
    let batch = Batch::new(rng.normal_tensor(2, 5, 1.0), labels, attrs.gather_rows(&[0, 3]).unwrap());
    let config = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        batch_size: 2,
        n_set: Some(1),
        ..TrainConfig::default()
    };
    let overrides = StepOverrides {
        rec_plans: Some(RecPlans {
            uns: Some(SwapPlan::new(vec![1, 0, 2, 3], SwapMode::Uns).unwrap()),
            cs: Some(SwapPlan::identity(4, SwapMode::Cs)),
        }),
    };
    let log = train_step(&mut model, &batch, &[0, 1, 2, 3], &config, &mut Rng::new(9), &overrides, &mut ()).unwrap();
    let l = log.losses;
    assert_eq!(l.l_total, l.l_vae + l.l_rec);
    assert!(l.l_mat.is_finite() && l.l_cu.is_finite() && l.l_a.is_finite());
}
