//! Independent scalar-loop oracles and fixtures shared by the integration
//! tests. Nothing here goes through the tape.

#![allow(dead_code)]

pub mod checks;

use ccd_core::data::{gen_synthetic, FeatureDataset, SyntheticSpec};
use ccd_core::trainer::TrainConfig;
use ccd_core::Tensor2;

pub fn rows(t: &Tensor2) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(a: &[f64]) -> Vec<f64> {
    let n = dot(a, a).sqrt();
    a.iter().map(|v| v / n).collect()
}

/// Pairwise similarity over `tau`, cosine or raw dot.
pub fn pair_sim(a: &[f64], b: &[f64], tau: f64, cosine: bool) -> f64 {
    if cosine {
        dot(&unit(a), &unit(b)) / tau
    } else {
        dot(a, b) / tau
    }
}

/// Per-anchor average over positives of `-log(e^{s+} / Σ_{j≠i} e^{s_ij})`,
/// then averaged over anchors that have a positive. `None` if no anchor does.
fn brute_contrastive(v: &[Vec<f64>], group: &[usize], tau: f64, cosine: bool) -> Option<f64> {
    let n = v.len();
    let mut per_anchor = Vec::new();
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += pair_sim(&v[i], &v[j], tau, cosine).exp();
            }
        }
        let mut terms = Vec::new();
        for p in 0..n {
            if p != i && group[p] == group[i] {
                let s = pair_sim(&v[i], &v[p], tau, cosine);
                terms.push(-(s.exp() / denom).ln());
            }
        }
        if !terms.is_empty() {
            per_anchor.push(terms.iter().sum::<f64>() / terms.len() as f64);
        }
    }
    if per_anchor.is_empty() {
        None
    } else {
        Some(per_anchor.iter().sum::<f64>() / per_anchor.len() as f64)
    }
}

pub fn brute_set_contrastive(v: &[Vec<f64>], set_ids: &[usize], tau: f64, cosine: bool) -> f64 {
    brute_contrastive(v, set_ids, tau, cosine).unwrap_or(0.0)
}

pub fn brute_class_contrastive(v: &[Vec<f64>], set_ids: &[usize], classes: &[u32], tau: f64, cosine: bool) -> f64 {
    let mut sets: Vec<usize> = set_ids.to_vec();
    sets.sort_unstable();
    sets.dedup();
    let mut terms = Vec::new();
    for s in sets {
        let members: Vec<usize> = (0..v.len()).filter(|&i| set_ids[i] == s).collect();
        let mut distinct: Vec<u32> = members.iter().map(|&i| classes[i]).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            continue;
        }
        let sub: Vec<Vec<f64>> = members.iter().map(|&i| v[i].clone()).collect();
        let group: Vec<usize> = members.iter().map(|&i| classes[i] as usize).collect();
        if let Some(t) = brute_contrastive(&sub, &group, tau, cosine) {
            terms.push(t);
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

pub fn scalar_vae(x: &Tensor2, x_hat: &Tensor2, mu: &Tensor2, logvar: &Tensor2) -> f64 {
    let mut total = 0.0;
    for r in 0..x.rows() {
        let mut row = 0.0;
        for c in 0..x.cols() {
            let d = x.get(r, c) - x_hat.get(r, c);
            row += d * d;
        }
        for c in 0..mu.cols() {
            let (m, lv) = (mu.get(r, c), logvar.get(r, c));
            row += 0.5 * (m * m + lv.exp() - 1.0 - lv);
        }
        total += row;
    }
    total / x.rows() as f64
}

/// Cross-entropy with the softmax taken over `keep` columns only.
pub fn scalar_restricted_ce(logits: &Tensor2, keep: &[usize], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let z: f64 = keep.iter().map(|&c| logits.get(r, c).exp()).sum();
        total -= (logits.get(r, t).exp() / z).ln();
    }
    total / targets.len() as f64
}

pub fn sq_err(x: &Tensor2, y: &Tensor2) -> f64 {
    x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.rows() as f64
}

pub fn reference_dataset(seed: u64) -> FeatureDataset {
    gen_synthetic(&SyntheticSpec::reference(seed)).unwrap()
}

/// Training setup used wherever a trained model is needed.
pub fn benchmark_config(seed: u64) -> TrainConfig {
    TrainConfig {
        n_steps: 1500,
        batch_size: 64,
        n_set: Some(2),
        d_z: 16,
        d_part: 16,
        hidden_width: 128,
        seed,
        ..TrainConfig::default()
    }
}

/// Alignment, swapping and both contrastive terms off.
pub fn baseline_config(seed: u64) -> TrainConfig {
    TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        swap: false,
        ..benchmark_config(seed)
    }
}
