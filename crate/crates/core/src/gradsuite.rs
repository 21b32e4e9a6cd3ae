//! Finite-difference checks of every training objective on random small
//! instances. Used by the `gradcheck` command and the test suites.

use crate::autodiff::{Graph, Var};
use crate::data::Batch;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::losses::{
    loss_align, loss_class_contrastive, loss_rec, loss_set_contrastive, loss_vae, RecPlans, Similarity,
};
use crate::model::{
    build_swap_plan, build_swap_plan_within_sets, CcdModel, CodeVars, HiddenActivation, MainVars, ModelDims,
    SwapMode,
};
use crate::nn::{mlp_forward, Activation, BoundLayer, Mlp};
use crate::rng::Rng;
use crate::tensor::Tensor2;
use crate::trainer::{step_forward, step_objective, TrainConfig};

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-6;

/// Worst result of one objective over all its instances.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub plain_max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE && self.checked > 0
    }
}

fn fold(name: &'static str, reports: &[GradCheckReport]) -> SuiteEntry {
    SuiteEntry {
        name,
        instances: reports.len(),
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        plain_max_rel_error: reports.iter().map(|r| r.plain_max_rel_error).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        skipped_kinks: reports.iter().map(|r| r.skipped_kinks).sum(),
    }
}

fn random_ids(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(k)).collect()
}

fn check(params: &[Tensor2], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    finite_diff_check(params, SUITE_STEP, SUITE_TOLERANCE, f)
}

fn vae_instance(rng: &mut Rng) -> Result<GradCheckReport> {
    let (b, d, z) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(3));
    let x = rng.normal_tensor(b, d, 0.5);
    let params = [rng.normal_tensor(b, d, 0.5), rng.normal_tensor(b, z, 0.5), rng.normal_tensor(b, z, 0.5)];
    check(&params, |g, p| {
        let xv = g.constant(x.clone());
        loss_vae(g, xv, p[0], p[1], p[2])
    })
}

fn rec_instance(rng: &mut Rng) -> Result<GradCheckReport> {
    let (b, part, feat, hidden) = (2 + rng.below(4), 1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(3));
    let d2 = Mlp::new(&[3 * part, hidden, feat], Activation::Relu, Activation::Identity, rng)?;
    let set_ids = random_ids(b, 2, rng);
    let plans = RecPlans {
        uns: Some(build_swap_plan(b, SwapMode::Uns, rng)?),
        cs: Some(build_swap_plan_within_sets(&set_ids, SwapMode::Cs, rng)?),
    };
    let x = rng.normal_tensor(b, feat, 0.5);
    let mut params: Vec<Tensor2> = (0..3).map(|_| rng.normal_tensor(b, part, 0.5)).collect();
    params.extend(d2.tensors().cloned());
    check(&params, |g, p| {
        let layers: Vec<BoundLayer> = d2
            .layers
            .iter()
            .zip(p[3..].chunks(2))
            .map(|(l, wb)| BoundLayer {
                weight: wb[0],
                bias: wb[1],
                activation: l.activation,
            })
            .collect();
        let vars = MainVars {
            e1: Vec::new(),
            d1: Vec::new(),
            e2: Vec::new(),
            d2: layers,
        };
        let code = CodeVars {
            uns: p[0],
            cs: p[1],
            cu: p[2],
        };
        let xv = g.constant(x.clone());
        loss_rec(g, &vars, xv, &code, &plans)
    })
}

fn similarity_for(i: usize) -> (Similarity, f64) {
    // alternate modes; keep dot-mode logits moderate
    if i % 4 == 3 {
        (Similarity::Dot, 1.0)
    } else {
        (Similarity::Cosine, 0.1)
    }
}

fn set_instance(i: usize, rng: &mut Rng) -> Result<GradCheckReport> {
    let (b, d) = (2 + rng.below(7), 1 + rng.below(4));
    let ids = random_ids(b, 1 + rng.below(3), rng);
    let (sim, tau) = similarity_for(i);
    let v = rng.normal_tensor(b, d, 0.7);
    check(&[v], |g, p| loss_set_contrastive(g, p[0], &ids, tau, sim))
}

fn class_instance(i: usize, rng: &mut Rng) -> Result<GradCheckReport> {
    let (b, d) = (3 + rng.below(6), 1 + rng.below(4));
    let sets = random_ids(b, 1 + rng.below(2), rng);
    let classes: Vec<u32> = (0..b).map(|_| rng.below(3) as u32).collect();
    let (sim, tau) = similarity_for(i);
    let v = rng.normal_tensor(b, d, 0.7);
    check(&[v], |g, p| loss_class_contrastive(g, p[0], &sets, &classes, tau, sim))
}

fn align_instance(rng: &mut Rng) -> Result<GradCheckReport> {
    let (b, c) = (1 + rng.below(6), 1 + rng.below(5));
    let targets: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
    let mut keep = vec![false; c];
    for &t in &targets {
        keep[t] = true;
    }
    for k in keep.iter_mut() {
        *k |= rng.uniform() < 0.5;
    }
    let mask: Vec<bool> = (0..b).flat_map(|_| keep.iter().copied()).collect();
    let logits = rng.normal_tensor(b, c, 1.0);
    check(&[logits], |g, p| {
        // relu in front so some entries sit near a kink
        let h = g.relu(p[0]);
        let z = g.add(h, p[0])?;
        loss_align(g, z, &mask, &targets)
    })
}

/// The whole weighted objective of one step, differentiated with respect
/// to every `E1`, `D1`, `E2` and `D2` parameter.
fn total_instance(i: usize, rng: &mut Rng) -> Result<GradCheckReport> {
    let n_seen = 3;
    let dims = ModelDims {
        d_feat: 4,
        d_attr: 2,
        d_z: 2,
        d_uns: 2,
        d_cs: 2,
        d_cu: 2,
        n_seen,
        hidden: 4,
        encoder_hidden: if i % 3 == 1 {
            HiddenActivation::LeakyRelu
        } else {
            HiddenActivation::Relu
        },
    };
    let model = CcdModel::new(dims, 1e-3, rng)?;
    let b = 8 + rng.below(9);
    let labels: Vec<u32> = (0..b).map(|k| (k % n_seen) as u32).collect();
    let attrs = rng.normal_tensor(n_seen, dims.d_attr, 0.5);
    let batch = Batch::new(
        rng.normal_tensor(b, dims.d_feat, 0.5),
        labels.clone(),
        attrs.gather_rows(&labels.iter().map(|&l| l as usize).collect::<Vec<_>>())?,
    );
    let set_ids = random_ids(b, 2, rng);
    let eps = rng.normal_tensor(b, dims.d_z, 1.0);
    let include_pseudo = i % 2 == 0;
    let all_sets = if include_pseudo {
        [set_ids.as_slice(), set_ids.as_slice()].concat()
    } else {
        set_ids.clone()
    };
    let plans = RecPlans::random(&all_sets, rng)?;
    let config = TrainConfig {
        include_pseudo_in_losses: include_pseudo,
        ..TrainConfig::default()
    };
    let seen: Vec<u32> = (0..n_seen as u32).collect();
    // init weights, random biases: with zero biases a row whose hidden units
    // are all dead has a zero code, where cosine similarity is singular
    let params: Vec<Tensor2> = model
        .main_tensors()
        .map(|t| if t.rows() == 1 { rng.normal_tensor(1, t.cols(), 0.1) } else { t.clone() })
        .collect();
    check(&params, |g, p| {
        let vars = model.main_vars_from(p)?;
        let fwd = step_forward(g, &vars, &dims, &batch, &set_ids, eps.clone(), include_pseudo, &mut |_| {})?;
        let head = model.align.bind_frozen(g);
        let (total, _) = step_objective(g, &vars, &fwd, &head, &plans, &seen, &config, &mut |_| {})?;
        Ok(total)
    })
}

/// Alignment head parameters against the alignment loss on fixed codes.
fn head_instance(rng: &mut Rng) -> Result<GradCheckReport> {
    let head = Mlp::new(&[2, 3, 3, 3], Activation::Relu, Activation::Identity, rng)?;
    let b = 2 + rng.below(4);
    let mat = rng.normal_tensor(b, 2, 1.0);
    let targets: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
    let params: Vec<Tensor2> = head.tensors().cloned().collect();
    check(&params, |g, p| {
        let layers: Vec<BoundLayer> = head
            .layers
            .iter()
            .zip(p.chunks(2))
            .map(|(l, wb)| BoundLayer {
                weight: wb[0],
                bias: wb[1],
                activation: l.activation,
            })
            .collect();
        let m = g.constant(mat.clone());
        let logits = mlp_forward(g, &layers, m)?;
        loss_align(g, logits, &vec![true; b * 3], &targets)
    })
}

/// Runs `instances` random instances of every objective from `seed`.
pub fn run_loss_suite(seed: u64, instances: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::new(seed);
    let mut run = |name: &'static str, f: &mut dyn FnMut(usize, &mut Rng) -> Result<GradCheckReport>| {
        let reports = (0..instances).map(|i| f(i, &mut rng)).collect::<Result<Vec<_>>>()?;
        Ok::<_, crate::CcdError>(fold(name, &reports))
    };
    Ok(vec![
        run("vae", &mut |_, r| vae_instance(r))?,
        run("rec", &mut |_, r| rec_instance(r))?,
        run("set-contrastive", &mut set_instance)?,
        run("class-contrastive", &mut class_instance)?,
        run("align", &mut |_, r| align_instance(r))?,
        run("align-head", &mut |_, r| head_instance(r))?,
        run("total", &mut total_instance)?,
    ])
}
