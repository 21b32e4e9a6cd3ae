//! Seeded invariance checks, shared by the property tests and the
//! acceptance run. Each returns a description of the first violation.

use ccd_core::autodiff::Graph;
use ccd_core::data::Batch;
use ccd_core::losses::{
    class_contrastive_value, loss_align, loss_rec, loss_vae, set_contrastive_value, RecPlans, Similarity,
};
use ccd_core::model::{
    apply_swap, build_swap_plan, build_swap_plan_within_sets, CcdModel, CodeVars, DisentangledCode, HiddenActivation,
    ModelDims, SwapMode, SwapPlan,
};
use ccd_core::rng::Rng;
use ccd_core::trainer::TrainObserver;
use ccd_core::Tensor2;

pub type Check = Result<(), String>;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn permute(t: &Tensor2, perm: &[usize]) -> Tensor2 {
    t.gather_rows(perm).unwrap()
}

fn instance(seed: u64, b: usize) -> (Rng, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let perm = rng.permutation(b);
    (rng, perm)
}

/// Both contrastive losses under cosine similarity, with every row scaled by `c`.
pub fn contrastive_scale(seed: u64, b: usize, c: f64) -> Check {
    let mut rng = Rng::new(seed);
    let v = rng.normal_tensor(b, 4, 1.0);
    let ids: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
    let classes: Vec<u32> = (0..b).map(|_| rng.below(3) as u32).collect();
    let scaled = v.scale(c);
    let s0 = set_contrastive_value(&v, &ids, 0.1, Similarity::Cosine).unwrap();
    let s1 = set_contrastive_value(&scaled, &ids, 0.1, Similarity::Cosine).unwrap();
    ensure((s0 - s1).abs() < 1e-9, || format!("set loss {s0} vs {s1} at scale {c}"))?;
    let c0 = class_contrastive_value(&v, &ids, &classes, 0.1, Similarity::Cosine).unwrap();
    let c1 = class_contrastive_value(&scaled, &ids, &classes, 0.1, Similarity::Cosine).unwrap();
    ensure((c0 - c1).abs() < 1e-9, || format!("class loss {c0} vs {c1} at scale {c}"))
}

pub fn contrastive_order(seed: u64, b: usize) -> Check {
    let (mut rng, perm) = instance(seed, b);
    let v = rng.normal_tensor(b, 3, 1.0);
    let ids: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
    let classes: Vec<u32> = (0..b).map(|_| rng.below(3) as u32).collect();
    let pv = permute(&v, &perm);
    let pids: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
    let pcls: Vec<u32> = perm.iter().map(|&i| classes[i]).collect();
    for sim in [Similarity::Cosine, Similarity::Dot] {
        let x = set_contrastive_value(&v, &ids, 0.1, sim).unwrap();
        let y = set_contrastive_value(&pv, &pids, 0.1, sim).unwrap();
        ensure(close(x, y, 1e-12), || format!("set loss {x} vs {y} ({sim:?})"))?;
        let x = class_contrastive_value(&v, &ids, &classes, 0.1, sim).unwrap();
        let y = class_contrastive_value(&pv, &pids, &pcls, 0.1, sim).unwrap();
        ensure(close(x, y, 1e-12), || format!("class loss {x} vs {y} ({sim:?})"))?;
    }
    Ok(())
}

pub fn vae_and_align_order(seed: u64, b: usize) -> Check {
    let (mut rng, perm) = instance(seed, b);
    let t: Vec<Tensor2> = [5, 5, 3, 3].iter().map(|&d| rng.normal_tensor(b, d, 1.0)).collect();
    let vae = |t: &[Tensor2]| {
        let mut g = Graph::new();
        let v: Vec<_> = t.iter().map(|x| g.constant(x.clone())).collect();
        let l = loss_vae(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        g.value(l).item().unwrap()
    };
    let pt: Vec<Tensor2> = t.iter().map(|x| permute(x, &perm)).collect();
    let (x, y) = (vae(&t), vae(&pt));
    ensure(close(x, y, 1e-12), || format!("vae {x} vs {y}"))?;

    let logits = rng.normal_tensor(b, 4, 2.0);
    let targets: Vec<usize> = (0..b).map(|_| rng.below(4)).collect();
    let keep: Vec<bool> = (0..4).map(|c| targets.contains(&c)).collect();
    let mask: Vec<bool> = (0..b).flat_map(|_| keep.clone()).collect();
    let align = |l: &Tensor2, tg: &[usize]| {
        let mut g = Graph::new();
        let v = g.constant(l.clone());
        let out = loss_align(&mut g, v, &mask, tg).unwrap();
        g.value(out).item().unwrap()
    };
    let ptg: Vec<usize> = perm.iter().map(|&i| targets[i]).collect();
    let (x, y) = (align(&logits, &targets), align(&permute(&logits, &perm), &ptg));
    ensure(close(x, y, 1e-12), || format!("align {x} vs {y}"))
}

pub fn rec_order(seed: u64, b: usize) -> Check {
    let (mut rng, perm) = instance(seed, b);
    let dims = ModelDims {
        d_feat: 4,
        d_attr: 2,
        d_z: 2,
        d_uns: 2,
        d_cs: 2,
        d_cu: 2,
        n_seen: 2,
        hidden: 5,
        encoder_hidden: HiddenActivation::Relu,
    };
    let model = CcdModel::new(dims, 1e-3, &mut rng).unwrap();
    let x = rng.normal_tensor(b, 4, 1.0);
    let code = DisentangledCode {
        uns: rng.normal_tensor(b, 2, 1.0),
        cs: rng.normal_tensor(b, 2, 1.0),
        cu: rng.normal_tensor(b, 2, 1.0),
    };
    let sets: Vec<usize> = (0..b).map(|_| rng.below(2)).collect();
    let plans = RecPlans::random(&sets, &mut rng).unwrap();

    // new row k is old row perm[k]; the plans are conjugated to match
    let mut inv = vec![0; b];
    for (k, &i) in perm.iter().enumerate() {
        inv[i] = k;
    }
    let conj = |p: &SwapPlan| SwapPlan::new(perm.iter().map(|&i| inv[p.index[i]]).collect(), p.mode).unwrap();
    let pplans = RecPlans {
        uns: plans.uns.as_ref().map(conj),
        cs: plans.cs.as_ref().map(conj),
    };
    let pcode = DisentangledCode {
        uns: permute(&code.uns, &perm),
        cs: permute(&code.cs, &perm),
        cu: permute(&code.cu, &perm),
    };

    let rec = |x: &Tensor2, c: &DisentangledCode, p: &RecPlans| {
        let mut g = Graph::new();
        let vars = model.bind_main(&mut g);
        let xv = g.constant(x.clone());
        let cv = CodeVars {
            uns: g.constant(c.uns.clone()),
            cs: g.constant(c.cs.clone()),
            cu: g.constant(c.cu.clone()),
        };
        let l = loss_rec(&mut g, &vars, xv, &cv, p).unwrap();
        g.value(l).item().unwrap()
    };
    let (a, b) = (rec(&x, &code, &plans), rec(&permute(&x, &perm), &pcode, &pplans));
    ensure(close(a, b, 1e-12), || format!("rec {a} vs {b}"))
}

/// Swapping one part leaves the other two bitwise untouched, and a
/// within-set swap only pairs rows of the same set.
pub fn swap_locality(seed: u64, b: usize) -> Check {
    let mut rng = Rng::new(seed);
    let code = DisentangledCode {
        uns: rng.normal_tensor(b, 3, 1.0),
        cs: rng.normal_tensor(b, 3, 1.0),
        cu: rng.normal_tensor(b, 3, 1.0),
    };
    let sets: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
    let u = build_swap_plan(b, SwapMode::Uns, &mut rng).unwrap();
    let c = build_swap_plan_within_sets(&sets, SwapMode::Cs, &mut rng).unwrap();

    let su = apply_swap(&code, &u).unwrap();
    ensure(su.cs == code.cs && su.cu == code.cu, || "uns swap changed cs or cu".into())?;
    for i in 0..b {
        ensure(su.uns.row(i) == code.uns.row(u.index[i]), || format!("uns row {i} not taken from its partner"))?;
    }
    let sc = apply_swap(&code, &c).unwrap();
    ensure(sc.uns == code.uns && sc.cu == code.cu, || "cs swap changed uns or cu".into())?;
    for i in 0..b {
        ensure(sets[c.index[i]] == sets[i], || format!("cs row {i} swapped across sets"))?;
        ensure(sc.cs.row(i) == code.cs.row(c.index[i]), || format!("cs row {i} not taken from its partner"))?;
    }
    Ok(())
}

/// Fails the run on any batch that is not drawn from seen training data.
pub struct SeenOnly {
    pub unseen: Vec<u32>,
    pub attributes: Tensor2,
    pub batches: u64,
}

impl SeenOnly {
    pub fn new(ds: &ccd_core::data::FeatureDataset) -> Self {
        SeenOnly {
            unseen: ds.unseen_classes.clone(),
            attributes: ds.attributes.clone(),
            batches: 0,
        }
    }
}

impl TrainObserver for SeenOnly {
    fn on_batch(&mut self, _step: u64, batch: &Batch) {
        for (i, &l) in batch.labels.iter().enumerate() {
            assert!(!self.unseen.contains(&l), "unseen class {l} in a training batch");
            assert_eq!(batch.attributes.row(i), self.attributes.row(l as usize));
        }
        self.batches += 1;
    }
}
