//! Training objectives, all built on a [`Graph`] so they share one tape.
//!
//! Every loss is a minimised scalar. Batch reductions are means over rows;
//! reconstruction errors are sums over feature columns.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{CcdError, Result};
use crate::model::{ae_decode, build_swap_plan, build_swap_plan_within_sets, CodeVars, MainVars, SwapMode, SwapPlan};
use crate::rng::Rng;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Dot product of L2-normalised rows.
    #[default]
    Cosine,
    /// Raw dot product.
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.2,
            gamma: 2.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CcdError::validation(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CcdError::validation(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor2::scalar(0.0))
}

/// Squared error summed over columns, averaged over rows.
pub fn mean_row_sq_error(g: &mut Graph, target: Var, pred: Var) -> Result<Var> {
    let rows = g.shape(target).0;
    if rows == 0 {
        return Err(CcdError::validation("empty batch"));
    }
    let diff = g.sub(target, pred)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// Reconstruction error plus `KL(N(μ, σ²) ‖ N(0, I))`, both batch-averaged.
pub fn loss_vae(g: &mut Graph, x: Var, x_hat: Var, mu: Var, logvar: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(CcdError::dim("loss_vae", g.shape(mu), g.shape(logvar)));
    }
    if g.shape(x).0 != g.shape(mu).0 {
        return Err(CcdError::dim("loss_vae", g.shape(x), g.shape(mu)));
    }
    for v in [x, x_hat, mu, logvar] {
        if !g.value(v).is_finite() {
            return Err(CcdError::numeric("non-finite input to loss_vae"));
        }
    }
    let rows = g.shape(mu).0;
    let recon = mean_row_sq_error(g, x, x_hat)?;
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0);
    let kl = g.sum(t);
    let kl = g.scale(kl, 0.5 / rows as f64);
    g.add(recon, kl)
}

/// Swap plans for one reconstruction pass. `None` disables that term.
#[derive(Clone, Debug, Default)]
pub struct RecPlans {
    pub uns: Option<SwapPlan>,
    pub cs: Option<SwapPlan>,
}

impl RecPlans {
    /// Fresh batch-wide `uns` plan and within-set `cs` plan.
    pub fn random(set_ids: &[usize], rng: &mut Rng) -> Result<Self> {
        Ok(RecPlans {
            uns: Some(build_swap_plan(set_ids.len(), SwapMode::Uns, rng)?),
            cs: Some(build_swap_plan_within_sets(set_ids, SwapMode::Cs, rng)?),
        })
    }
}

/// `‖x − D2(Z)‖² + ‖x − D2(Z′)‖² + ‖x − D2(Z″)‖²`, each batch-averaged.
/// `Z′` and `Z″` are present only when their plan is.
pub fn loss_rec(g: &mut Graph, vars: &MainVars, x: Var, code: &CodeVars, plans: &RecPlans) -> Result<Var> {
    let rows = g.shape(x).0;
    if g.shape(code.uns).0 != rows {
        return Err(CcdError::contract(format!(
            "code has {} rows, batch has {rows}",
            g.shape(code.uns).0
        )));
    }
    let x_rec = ae_decode(g, vars, code)?;
    let mut total = mean_row_sq_error(g, x, x_rec)?;
    for (plan, mode) in [(&plans.uns, SwapMode::Uns), (&plans.cs, SwapMode::Cs)] {
        let Some(plan) = plan else { continue };
        if plan.mode != mode {
            return Err(CcdError::contract(format!("expected a {mode:?} plan, got {:?}", plan.mode)));
        }
        let swapped = code.swapped(g, plan)?;
        let x_rec = ae_decode(g, vars, &swapped)?;
        let term = mean_row_sq_error(g, x, x_rec)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Similarity matrix scaled by `1/τ`.
fn similarity(g: &mut Graph, v: Var, tau: f64, sim: Similarity) -> Result<Var> {
    let u = match sim {
        Similarity::Cosine => g.normalize_rows(v),
        Similarity::Dot => v,
    };
    let s = g.matmul_t(u, u)?;
    Ok(g.scale(s, 1.0 / tau))
}

/// Shared contrastive construction. Row `i`'s denominator is every `j != i`
/// with `scope[j] == scope[i]`; its positives are those with also
/// `group[j] == group[i]`. Returns the mean over anchors with at least one
/// positive of the per-anchor mean `−log softmax`, or `None` if no anchor
/// has a positive.
fn grouped_contrastive(
    g: &mut Graph,
    v: Var,
    group: &[usize],
    scope: &[usize],
    tau: f64,
    sim: Similarity,
) -> Result<Option<Var>> {
    let n = g.shape(v).0;
    let mut mask = vec![false; n * n];
    let mut positives = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && scope[i] == scope[j] {
                mask[i * n + j] = true;
                if group[i] == group[j] {
                    positives[i] += 1;
                }
            }
        }
    }
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Ok(None);
    }
    let mut weights = Tensor2::zeros(n, n);
    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        let w = -1.0 / (anchors * positives[i]) as f64;
        for j in 0..n {
            if i != j && scope[i] == scope[j] && group[i] == group[j] {
                weights.set(i, j, w);
            }
        }
    }
    let s = similarity(g, v, tau, sim)?;
    let lsm = g.masked_log_softmax(s, &mask)?;
    Ok(Some(g.weighted_sum(lsm, weights)?))
}

/// Contrast between cluster sets: positives are the other members of the
/// anchor's set, the denominator is every other sample. 0 when no set has
/// two members.
pub fn loss_set_contrastive(g: &mut Graph, mat: Var, set_ids: &[usize], tau: f64, sim: Similarity) -> Result<Var> {
    check_tau(tau)?;
    if set_ids.len() != g.shape(mat).0 {
        return Err(CcdError::contract(format!(
            "{} set ids for {} rows",
            set_ids.len(),
            g.shape(mat).0
        )));
    }
    let scope = vec![0; set_ids.len()];
    match grouped_contrastive(g, mat, set_ids, &scope, tau, sim)? {
        Some(v) => Ok(v),
        None => Ok(zero(g)),
    }
}

/// Per-set class contrast terms, in increasing set id order. A set yields
/// `None` when it has fewer than two classes or no anchor with a positive.
pub fn class_contrastive_per_set(
    g: &mut Graph,
    cu: Var,
    set_ids: &[usize],
    class_ids: &[u32],
    tau: f64,
    sim: Similarity,
) -> Result<Vec<(usize, Option<Var>)>> {
    check_tau(tau)?;
    let n = g.shape(cu).0;
    if set_ids.len() != n || class_ids.len() != n {
        return Err(CcdError::contract(format!(
            "{} set ids and {} class ids for {n} rows",
            set_ids.len(),
            class_ids.len()
        )));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in set_ids.iter().enumerate() {
        members.entry(s).or_default().push(i);
    }
    let mut out = Vec::with_capacity(members.len());
    for (set, rows) in members {
        let classes: BTreeSet<u32> = rows.iter().map(|&i| class_ids[i]).collect();
        if classes.len() < 2 {
            out.push((set, None));
            continue;
        }
        let sub = g.gather_rows(cu, &rows)?;
        let group: Vec<usize> = rows.iter().map(|&i| class_ids[i] as usize).collect();
        let scope = vec![0; rows.len()];
        out.push((set, grouped_contrastive(g, sub, &group, &scope, tau, sim)?));
    }
    Ok(out)
}

/// Mean of the per-set terms that exist; 0 when none do.
pub fn average_set_terms(g: &mut Graph, terms: &[(usize, Option<Var>)]) -> Result<Var> {
    let present: Vec<Var> = terms.iter().filter_map(|t| t.1).collect();
    let Some((&first, rest)) = present.split_first() else {
        return Ok(zero(g));
    };
    let mut total = first;
    for &t in rest {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / present.len() as f64))
}

/// Class contrast inside each cluster set, averaged over contributing sets.
pub fn loss_class_contrastive(
    g: &mut Graph,
    cu: Var,
    set_ids: &[usize],
    class_ids: &[u32],
    tau: f64,
    sim: Similarity,
) -> Result<Var> {
    let terms = class_contrastive_per_set(g, cu, set_ids, class_ids, tau, sim)?;
    average_set_terms(g, &terms)
}

/// Mean cross-entropy with the softmax restricted to `mask`. `targets[i]`
/// is row `i`'s label column and must be retained.
pub fn loss_align(g: &mut Graph, logits: Var, mask: &[bool], targets: &[usize]) -> Result<Var> {
    let (rows, cols) = g.shape(logits);
    if targets.len() != rows || mask.len() != rows * cols {
        return Err(CcdError::contract(format!(
            "{} targets and {} mask entries for {rows}x{cols} logits",
            targets.len(),
            mask.len()
        )));
    }
    if rows == 0 {
        return Err(CcdError::validation("empty batch"));
    }
    let mut weights = Tensor2::zeros(rows, cols);
    for (i, &t) in targets.iter().enumerate() {
        if t >= cols || !mask[i * cols + t] {
            return Err(CcdError::contract(format!("label column {t} of row {i} is masked out")));
        }
        weights.set(i, t, -1.0 / rows as f64);
    }
    let lsm = g.masked_log_softmax(logits, mask)?;
    g.weighted_sum(lsm, weights)
}

/// Component handles on one tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub vae: Var,
    pub rec: Var,
    pub mat: Var,
    pub cu: Var,
    pub align: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vae: f64,
    pub l_rec: f64,
    pub l_mat: f64,
    pub l_cu: f64,
    pub l_a: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_vae, self.l_rec, self.l_mat, self.l_cu, self.l_a, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `vae + rec + α·mat + β·cu + γ·align`, composed on the tape.
pub fn loss_total(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let mut total = g.add(terms.vae, terms.rec)?;
    for (t, k) in [(terms.mat, w.alpha), (terms.cu, w.beta), (terms.align, w.gamma)] {
        let s = g.scale(t, k);
        total = g.add(total, s)?;
    }
    let item = |v: Var| g.value(v).item();
    let breakdown = LossBreakdown {
        l_vae: item(terms.vae)?,
        l_rec: item(terms.rec)?,
        l_mat: item(terms.mat)?,
        l_cu: item(terms.cu)?,
        l_a: item(terms.align)?,
        l_total: item(total)?,
    };
    Ok((total, breakdown))
}

/// [`loss_set_contrastive`] on plain tensors.
pub fn set_contrastive_value(mat: &Tensor2, set_ids: &[usize], tau: f64, sim: Similarity) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(mat.clone());
    let l = loss_set_contrastive(&mut g, v, set_ids, tau, sim)?;
    g.value(l).item()
}

/// [`loss_class_contrastive`] on plain tensors.
pub fn class_contrastive_value(
    cu: &Tensor2,
    set_ids: &[usize],
    class_ids: &[u32],
    tau: f64,
    sim: Similarity,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(cu.clone());
    let l = loss_class_contrastive(&mut g, v, set_ids, class_ids, tau, sim)?;
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn vae_zero_case_and_closed_form_kl() {
        let mut g = Graph::new();
        let x = g.constant(Rng::new(0).normal_tensor(3, 4, 1.0));
        let mu = g.constant(Tensor2::zeros(3, 5));
        let lv = g.constant(Tensor2::zeros(3, 5));
        let l = loss_vae(&mut g, x, x, mu, lv).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        let mu = g.constant(Tensor2::filled(3, 5, 1.0));
        let l = loss_vae(&mut g, x, x, mu, lv).unwrap();
        assert!((scalar(&g, l) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn vae_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor2::filled(1, 1, f64::NAN));
        let z = g.constant(Tensor2::zeros(1, 1));
        assert!(matches!(loss_vae(&mut g, x, z, z, z), Err(CcdError::Numeric(_))));
    }

    #[test]
    fn hand_case_one_positive_one_negative() {
        // anchor 0 and its positive 1 share a direction, row 2 is orthogonal
        let v = Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(v);
        let s = g.normalize_rows(x);
        let sim = g.matmul_t(s, s).unwrap();
        let mask: Vec<bool> = (0..9).map(|k| k / 3 != k % 3).collect();
        let lsm = g.masked_log_softmax(sim, &mask).unwrap();
        let anchor0 = -g.value(lsm).get(0, 1);
        assert!((anchor0 - 0.31326168751822286).abs() < 1e-6);
        assert!((anchor0 + (1f64.exp() / (1f64.exp() + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_in_one_set_is_zero() {
        let v = Tensor2::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        assert_eq!(set_contrastive_value(&v, &[0, 0], 0.1, Similarity::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn identical_vectors_one_set_gives_log_b_minus_one() {
        let v = Tensor2::filled(6, 3, 0.7);
        let l = set_contrastive_value(&v, &[0; 6], 0.1, Similarity::Cosine).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn singleton_sets_give_zero() {
        let v = Rng::new(1).normal_tensor(3, 2, 1.0);
        assert_eq!(set_contrastive_value(&v, &[0, 1, 2], 0.1, Similarity::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn bad_tau_rejected() {
        let v = Tensor2::zeros(2, 2);
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                set_contrastive_value(&v, &[0, 0], tau, Similarity::Cosine),
                Err(CcdError::Validation(_))
            ));
            assert!(matches!(
                class_contrastive_value(&v, &[0, 0], &[1, 2], tau, Similarity::Cosine),
                Err(CcdError::Validation(_))
            ));
        }
    }

    #[test]
    fn single_class_set_contributes_zero() {
        let v = Rng::new(2).normal_tensor(4, 3, 1.0);
        assert_eq!(class_contrastive_value(&v, &[0; 4], &[5; 4], 0.1, Similarity::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn two_singleton_classes_give_zero() {
        let v = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(class_contrastive_value(&v, &[0, 0], &[1, 2], 0.1, Similarity::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn align_uniform_and_margin() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor2::zeros(4, 6));
        let mask: Vec<bool> = (0..24).map(|k| k % 6 < 3).collect();
        let l = loss_align(&mut g, logits, &mask, &[0, 1, 2, 0]).unwrap();
        assert!((scalar(&g, l) - 3f64.ln()).abs() < 1e-12);

        let mut t = Tensor2::zeros(2, 3);
        t.set(0, 1, 10.0);
        t.set(1, 2, 10.0);
        let logits = g.constant(t);
        let l = loss_align(&mut g, logits, &[true; 6], &[1, 2]).unwrap();
        assert!(scalar(&g, l) < 1e-4);
    }

    #[test]
    fn align_masked_label_is_contract_error() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor2::zeros(1, 3));
        let err = loss_align(&mut g, logits, &[true, false, true], &[1]).unwrap_err();
        assert!(matches!(err, CcdError::Contract(_)));
    }

    #[test]
    fn total_weighting() {
        let mut g = Graph::new();
        let mut c = |v: f64| g.constant(Tensor2::scalar(v));
        let terms = LossTerms {
            vae: c(1.0),
            rec: c(2.0),
            mat: c(3.0),
            cu: c(4.0),
            align: c(5.0),
        };
        let (t, b) = loss_total(&mut g, &terms, &LossWeights::default()).unwrap();
        assert!((scalar(&g, t) - 14.1).abs() < 1e-12);
        assert_eq!(b.l_total, scalar(&g, t));
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            tau: 0.1,
        };
        let (t, _) = loss_total(&mut g, &terms, &w).unwrap();
        assert_eq!(scalar(&g, t), 3.0);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma, w.tau), (0.1, 0.2, 2.0, 0.1));
        let bad = LossWeights { alpha: -1.0, ..w };
        assert!(bad.validate().is_err());
    }
}
