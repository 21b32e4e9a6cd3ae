//! Per-batch k-means: groups a batch into `M` sets of similar samples,
//! relabelled `0..M`.

use std::collections::BTreeMap;

use crate::data::Batch;
use crate::error::{CcdError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2;

pub const DEFAULT_MAX_ITER: usize = 50;

/// `ceil(n_seen / 10)`, at least 1.
pub fn default_n_sets(n_seen: usize) -> usize {
    n_seen.div_ceil(10).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// Set id of every batch row, each `< n_sets()`.
    pub set_ids: Vec<usize>,
    pub set_sizes: Vec<usize>,
    /// `M x d`
    pub centroids: Tensor2,
    /// Objective after each Lloyd iteration.
    pub objective_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn n_sets(&self) -> usize {
        self.set_sizes.len()
    }

    /// Sum of squared distances of rows to their assigned centroid.
    pub fn objective(&self, features: &Tensor2) -> f64 {
        objective(features, &self.centroids, &self.set_ids)
    }

    /// Row indices of every set.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_sets()];
        for (i, &s) in self.set_ids.iter().enumerate() {
            m[s].push(i);
        }
        m
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn objective(x: &Tensor2, centroids: &Tensor2, set_ids: &[usize]) -> f64 {
    set_ids
        .iter()
        .enumerate()
        .map(|(i, &s)| sq_dist(x.row(i), centroids.row(s)))
        .sum()
}

fn nearest(row: &[f64], centroids: &Tensor2) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(row, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn kmeans_pp_init(x: &Tensor2, m: usize, rng: &mut Rng) -> Tensor2 {
    let n = x.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < m {
        let next = rng.weighted_index(&d2);
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.gather_rows(&chosen).expect("indices in range")
}

/// Lloyd's algorithm with k-means++ seeding on the raw rows of `features`.
pub fn kmeans_fit(features: &Tensor2, n_sets: usize, rng: &mut Rng, max_iter: usize) -> Result<ClusterAssignment> {
    let b = features.rows();
    if n_sets == 0 {
        return Err(CcdError::validation("k-means needs at least one set"));
    }
    if n_sets > b {
        return Err(CcdError::validation(format!("{n_sets} sets requested for {b} rows")));
    }
    if !features.is_finite() {
        return Err(CcdError::validation("k-means input contains non-finite values"));
    }
    let init = kmeans_pp_init(features, n_sets, rng);
    kmeans_from_centroids(features, init, max_iter)
}

/// Lloyd iterations from the given initial centroids. Stops when
/// assignments stop changing or after `max_iter` iterations.
pub fn kmeans_from_centroids(features: &Tensor2, init: Tensor2, max_iter: usize) -> Result<ClusterAssignment> {
    if init.cols() != features.cols() {
        return Err(CcdError::dim("kmeans centroids", features.shape(), init.shape()));
    }
    let (n, m, d) = (features.rows(), init.rows(), features.cols());
    if m == 0 || m > n {
        return Err(CcdError::validation(format!("{m} sets requested for {n} rows")));
    }
    let mut centroids = init;
    let mut set_ids: Vec<usize> = Vec::new();
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut next: Vec<usize> = (0..n).map(|i| nearest(features.row(i), &centroids)).collect();
        repair_empty(features, &mut centroids, &mut next, m);

        let converged = next == set_ids;
        set_ids = next;

        let mut sums = Tensor2::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &s) in set_ids.iter().enumerate() {
            counts[s] += 1;
            for (acc, v) in sums.row_mut(s).iter_mut().zip(features.row(i)) {
                *acc += v;
            }
        }
        for (s, &count) in counts.iter().enumerate() {
            let inv = 1.0 / count as f64;
            for (c, v) in centroids.row_mut(s).iter_mut().zip(sums.row(s)) {
                *c = v * inv;
            }
        }
        history.push(objective(features, &centroids, &set_ids));
        if converged {
            break;
        }
    }

    let mut set_sizes = vec![0; m];
    for &s in &set_ids {
        set_sizes[s] += 1;
    }
    Ok(ClusterAssignment {
        set_ids,
        set_sizes,
        centroids,
        objective_history: history,
    })
}

/// Every empty set takes the row farthest from its centroid within the
/// currently largest set.
fn repair_empty(x: &Tensor2, centroids: &mut Tensor2, set_ids: &mut [usize], m: usize) {
    loop {
        let mut sizes = vec![0usize; m];
        for &s in set_ids.iter() {
            sizes[s] += 1;
        }
        let Some(empty) = sizes.iter().position(|&c| c == 0) else { return };
        let largest = (0..m).max_by_key(|&s| (sizes[s], std::cmp::Reverse(s))).expect("m > 0");
        let victim = (0..set_ids.len())
            .filter(|&i| set_ids[i] == largest)
            .map(|i| (i, sq_dist(x.row(i), centroids.row(largest))))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i)
            .expect("largest set is non-empty");
        set_ids[victim] = empty;
        centroids.row_mut(empty).copy_from_slice(x.row(victim));
    }
}

/// Members of one class inside one cluster set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGroup {
    pub class: u32,
    pub rows: Vec<usize>,
}

/// Classes present in one cluster set, ordered by class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetGroups {
    pub set_id: usize,
    pub classes: Vec<ClassGroup>,
}

impl SetGroups {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(|g| g.rows.len()).collect()
    }
}

pub fn group_by_class(batch: &Batch, assignment: &ClusterAssignment) -> Result<Vec<SetGroups>> {
    group_rows_by_class(&batch.labels, &assignment.set_ids, assignment.n_sets())
}

/// Groups rows by set, then by label within each set.
pub fn group_rows_by_class(labels: &[u32], set_ids: &[usize], n_sets: usize) -> Result<Vec<SetGroups>> {
    if labels.len() != set_ids.len() {
        return Err(CcdError::contract(format!(
            "{} labels but {} set ids",
            labels.len(),
            set_ids.len()
        )));
    }
    let mut per_set: Vec<BTreeMap<u32, Vec<usize>>> = vec![BTreeMap::new(); n_sets];
    for (i, (&l, &s)) in labels.iter().zip(set_ids).enumerate() {
        if s >= n_sets {
            return Err(CcdError::contract(format!("set id {s} out of range ({n_sets} sets)")));
        }
        per_set[s].entry(l).or_default().push(i);
    }
    Ok(per_set
        .into_iter()
        .enumerate()
        .map(|(set_id, m)| SetGroups {
            set_id,
            classes: m.into_iter().map(|(class, rows)| ClassGroup { class, rows }).collect(),
        })
        .collect())
}
