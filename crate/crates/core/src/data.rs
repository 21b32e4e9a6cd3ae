//! Datasets, the on-disk dataset directory format, the synthetic benchmark
//! generator, and batch sampling.
//!
//! Directory layout (all integers little-endian):
//!
//! - `manifest.json`: name, dimensions, seen/unseen class ids, split indices.
//! - `features.bin`: `"CCDF"`, u32 version 1, u64 rows, u64 cols, then
//!   `rows * cols` f32 values row-major.
//! - `attributes.bin`: same layout with magic `"CCDA"`, one row per class.
//! - `labels.bin`: `"CCDL"`, u32 version 1, u64 n, then n u32 class ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2;

pub const FORMAT_VERSION: u32 = 1;
pub const FEATURES_MAGIC: &[u8; 4] = b"CCDF";
pub const ATTRIBUTES_MAGIC: &[u8; 4] = b"CCDA";
pub const LABELS_MAGIC: &[u8; 4] = b"CCDL";
/// Bytes before the payload of a matrix file: magic, version, rows, cols.
pub const MATRIX_HEADER_BYTES: usize = 4 + 4 + 8 + 8;
/// Bytes before the payload of a labels file: magic, version, n.
pub const LABELS_HEADER_BYTES: usize = 4 + 4 + 8;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub name: String,
    /// `n_samples x d_feat`
    pub features: Tensor2,
    pub labels: Vec<u32>,
    /// `n_classes x d_attr`, row `c` describes class `c`.
    pub attributes: Tensor2,
    pub seen_classes: Vec<u32>,
    pub unseen_classes: Vec<u32>,
    pub splits: Splits,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    d_feat: usize,
    d_attr: usize,
    n_classes: usize,
    n_samples: usize,
    seen_classes: Vec<u32>,
    unseen_classes: Vec<u32>,
    splits: Splits,
}

impl FeatureDataset {
    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn d_feat(&self) -> usize {
        self.features.cols()
    }

    pub fn d_attr(&self) -> usize {
        self.attributes.cols()
    }

    pub fn is_seen(&self, class: u32) -> bool {
        self.seen_classes.contains(&class)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        if self.labels.len() != n {
            return Err(CcdError::validation(format!(
                "{} labels for {} samples",
                self.labels.len(),
                n
            )));
        }
        let n_classes = self.n_classes() as u32;
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_classes) {
            return Err(CcdError::validation(format!(
                "label {bad} has no attribute row ({n_classes} classes)"
            )));
        }
        let seen: BTreeSet<u32> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<u32> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return Err(CcdError::validation("duplicate class id in seen/unseen lists"));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(CcdError::validation(format!("class {c} is both seen and unseen")));
        }
        if let Some(&c) = seen.iter().chain(&unseen).find(|&&c| c >= n_classes) {
            return Err(CcdError::validation(format!("class id {c} out of range ({n_classes} classes)")));
        }
        let check = |name: &str, idx: &[usize], allowed: &BTreeSet<u32>| -> Result<()> {
            for &i in idx {
                if i >= n {
                    return Err(CcdError::validation(format!(
                        "{name} index {i} out of range ({n} samples)"
                    )));
                }
                if !allowed.contains(&self.labels[i]) {
                    return Err(CcdError::validation(format!(
                        "{name} index {i} has label {} outside its class set",
                        self.labels[i]
                    )));
                }
            }
            Ok(())
        };
        check("train", &self.splits.train, &seen)?;
        check("test_seen", &self.splits.test_seen, &seen)?;
        check("test_unseen", &self.splits.test_unseen, &unseen)?;
        if !self.features.is_finite() || !self.attributes.is_finite() {
            return Err(CcdError::validation("non-finite feature or attribute value"));
        }
        Ok(())
    }

    /// Attribute rows of `classes`, in order.
    pub fn attributes_of(&self, classes: &[u32]) -> Result<Tensor2> {
        let idx: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
        self.attributes.gather_rows(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<(Tensor2, Vec<u32>)> {
        let x = self.features.gather_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Copies out everything training may touch: train-split rows and
    /// seen-class attributes. Nothing about unseen classes survives.
    pub fn seen_train_set(&self) -> Result<SeenTrainSet> {
        self.validate()?;
        let (features, labels) = self.subset(&self.splits.train)?;
        let mut seen_classes = self.seen_classes.clone();
        seen_classes.sort_unstable();
        let attributes = seen_classes
            .iter()
            .map(|&c| (c, self.attributes.row(c as usize).to_vec()))
            .collect();
        Ok(SeenTrainSet {
            features,
            labels,
            attributes,
            seen_classes,
        })
    }
}

/// Seen-class training data, isolated from the rest of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SeenTrainSet {
    pub features: Tensor2,
    pub labels: Vec<u32>,
    attributes: BTreeMap<u32, Vec<f64>>,
    /// Sorted; position `i` is the alignment head's output `i`.
    pub seen_classes: Vec<u32>,
}

impl SeenTrainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_attr(&self) -> usize {
        self.attributes.values().next().map_or(0, Vec::len)
    }

    pub fn attribute(&self, class: u32) -> Option<&[f64]> {
        self.attributes.get(&class).map(Vec::as_slice)
    }

    pub fn sample_batch(&self, size: usize, rng: &mut Rng) -> Result<Batch> {
        if size == 0 || size > self.len() {
            return Err(CcdError::validation(format!(
                "batch size {size} not in 1..={} (train split size)",
                self.len()
            )));
        }
        let idx = sample_without_replacement(self.len(), size, rng);
        let features = self.features.gather_rows(&idx)?;
        let labels: Vec<u32> = idx.iter().map(|&i| self.labels[i]).collect();
        let mut attributes = Tensor2::zeros(size, self.d_attr());
        for (r, &l) in labels.iter().enumerate() {
            let a = self
                .attribute(l)
                .ok_or_else(|| CcdError::contract(format!("batch label {l} is not a seen class")))?;
            attributes.row_mut(r).copy_from_slice(a);
        }
        Ok(Batch::new(features, labels, attributes))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor2,
    pub labels: Vec<u32>,
    /// Row `i` is the attribute vector of `labels[i]`.
    pub attributes: Tensor2,
    /// Number of distinct labels in the batch.
    pub batch_class_count: usize,
}

impl Batch {
    pub fn new(features: Tensor2, labels: Vec<u32>, attributes: Tensor2) -> Self {
        let batch_class_count = labels.iter().collect::<BTreeSet<_>>().len();
        Batch {
            features,
            labels,
            attributes,
            batch_class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<u32> {
        let s: BTreeSet<u32> = self.labels.iter().copied().collect();
        s.into_iter().collect()
    }
}

/// Uniform batch of train-split samples, drawn without replacement.
pub fn sample_batch(ds: &FeatureDataset, size: usize, rng: &mut Rng) -> Result<Batch> {
    let n = ds.splits.train.len();
    if size == 0 || size > n {
        return Err(CcdError::validation(format!(
            "batch size {size} not in 1..={n} (train split size)"
        )));
    }
    let picks = sample_without_replacement(n, size, rng);
    let idx: Vec<usize> = picks.iter().map(|&p| ds.splits.train[p]).collect();
    let (features, labels) = ds.subset(&idx)?;
    for &l in &labels {
        if !ds.is_seen(l) {
            return Err(CcdError::contract(format!("train split contains unseen class {l}")));
        }
    }
    let attributes = ds.attributes_of(&labels)?;
    Ok(Batch::new(features, labels, attributes))
}

/// `k` distinct indices from `0..n` in random order (partial Fisher-Yates).
fn sample_without_replacement(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

// ---------------------------------------------------------------------------
// synthetic benchmark

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_seen_classes: usize,
    pub n_unseen_classes: usize,
    pub d_attr: usize,
    pub d_feat: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 8 seen + 2 unseen classes, 16-d attributes, 64-d features,
    /// 100 samples per class, noise 0.1.
    pub fn reference(seed: u64) -> Self {
        SyntheticSpec {
            n_seen_classes: 8,
            n_unseen_classes: 2,
            d_attr: 16,
            d_feat: 64,
            samples_per_class: 100,
            noise_std: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_unseen_classes == 0 {
            return Err(CcdError::validation("synthetic spec needs at least one unseen class"));
        }
        if self.n_seen_classes == 0 || self.d_attr == 0 || self.d_feat == 0 || self.samples_per_class == 0 {
            return Err(CcdError::validation("synthetic spec counts must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(CcdError::validation("noise_std must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Scale of the hidden linear attribute-to-feature map.
const SYNTH_MAP_SCALE: f64 = 1.0;
/// Standard deviation of the per-class offset not explained by attributes.
const SYNTH_OFFSET_STD: f64 = 0.1;
/// Fraction of every seen class that goes to the train split.
const SYNTH_TRAIN_FRACTION: f64 = 0.8;

fn round_f32(t: &Tensor2) -> Tensor2 {
    t.map(|v| v as f32 as f64)
}

/// Generates `x = W a_c + o_c + noise` for a hidden random linear map `W`,
/// per-class attributes `a_c` and per-class offsets `o_c`. Unseen classes
/// only appear in the `test_unseen` split. Values are rounded to f32 so the
/// dataset survives a save/load round trip exactly.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let n_classes = spec.n_seen_classes + spec.n_unseen_classes;

    let attributes = rng.uniform_tensor(n_classes, spec.d_attr, 0.0, 1.0);
    let map = rng.normal_tensor(spec.d_attr, spec.d_feat, SYNTH_MAP_SCALE / (spec.d_attr as f64).sqrt());
    let offsets = rng.normal_tensor(n_classes, spec.d_feat, SYNTH_OFFSET_STD);
    let means = attributes.matmul(&map)?.add(&offsets)?;

    let mut order: Vec<u32> = (0..n_classes as u32).collect();
    rng.shuffle(&mut order);
    let mut seen_classes = order[..spec.n_seen_classes].to_vec();
    let mut unseen_classes = order[spec.n_seen_classes..].to_vec();
    seen_classes.sort_unstable();
    unseen_classes.sort_unstable();

    let n = n_classes * spec.samples_per_class;
    let mut features = Tensor2::zeros(n, spec.d_feat);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Splits::default();
    let n_train = ((spec.samples_per_class as f64) * SYNTH_TRAIN_FRACTION).round() as usize;
    for c in 0..n_classes {
        let seen = seen_classes.contains(&(c as u32));
        for k in 0..spec.samples_per_class {
            let i = c * spec.samples_per_class + k;
            for (j, v) in features.row_mut(i).iter_mut().enumerate() {
                *v = means.get(c, j) + spec.noise_std * rng.normal();
            }
            labels.push(c as u32);
            if !seen {
                splits.test_unseen.push(i);
            } else if k < n_train {
                splits.train.push(i);
            } else {
                splits.test_seen.push(i);
            }
        }
    }

    let ds = FeatureDataset {
        name: format!("synthetic-{}", spec.seed),
        features: round_f32(&features),
        labels,
        attributes: round_f32(&attributes),
        seen_classes,
        unseen_classes,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// file format

fn write_matrix(path: &Path, magic: &[u8; 4], t: &Tensor2) -> Result<()> {
    let mut buf = Vec::with_capacity(MATRIX_HEADER_BYTES + 4 * t.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn check_header(bytes: &[u8], magic: &[u8; 4], path: &Path, header_len: usize) -> Result<()> {
    if bytes.len() < header_len {
        return Err(CcdError::format(format!(
            "{}: expected at least {header_len} header bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != magic {
        return Err(CcdError::format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CcdError::format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    Ok(())
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn read_matrix(path: &Path, magic: &[u8; 4]) -> Result<Tensor2> {
    let bytes = fs::read(path)?;
    check_header(&bytes, magic, path, MATRIX_HEADER_BYTES)?;
    let rows = read_u64(&bytes, 8) as usize;
    let cols = read_u64(&bytes, 16) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(MATRIX_HEADER_BYTES))
        .ok_or_else(|| CcdError::format(format!("{}: matrix shape overflows", path.display())))?;
    if bytes.len() != expected {
        return Err(CcdError::format(format!(
            "{}: expected {expected} bytes for a {rows}x{cols} matrix, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[MATRIX_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor2::from_vec(rows, cols, data)
}

fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut buf = Vec::with_capacity(LABELS_HEADER_BYTES + 4 * labels.len());
    buf.extend_from_slice(LABELS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for &l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    check_header(&bytes, LABELS_MAGIC, path, LABELS_HEADER_BYTES)?;
    let n = read_u64(&bytes, 8) as usize;
    let expected = n
        .checked_mul(4)
        .and_then(|v| v.checked_add(LABELS_HEADER_BYTES))
        .ok_or_else(|| CcdError::format(format!("{}: label count overflows", path.display())))?;
    if bytes.len() != expected {
        return Err(CcdError::format(format!(
            "{}: expected {expected} bytes for {n} labels, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes[LABELS_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_dataset(ds: &FeatureDataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        name: ds.name.clone(),
        d_feat: ds.d_feat(),
        d_attr: ds.d_attr(),
        n_classes: ds.n_classes(),
        n_samples: ds.n_samples(),
        seen_classes: ds.seen_classes.clone(),
        unseen_classes: ds.unseen_classes.clone(),
        splits: ds.splits.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    write_matrix(&dir.join("features.bin"), FEATURES_MAGIC, &ds.features)?;
    write_matrix(&dir.join("attributes.bin"), ATTRIBUTES_MAGIC, &ds.attributes)?;
    write_labels(&dir.join("labels.bin"), &ds.labels)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<FeatureDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let features = read_matrix(&dir.join("features.bin"), FEATURES_MAGIC)?;
    let attributes = read_matrix(&dir.join("attributes.bin"), ATTRIBUTES_MAGIC)?;
    let labels = read_labels(&dir.join("labels.bin"))?;

    let declared = [
        ("features rows", manifest.n_samples, features.rows()),
        ("features cols", manifest.d_feat, features.cols()),
        ("attributes rows", manifest.n_classes, attributes.rows()),
        ("attributes cols", manifest.d_attr, attributes.cols()),
        ("labels", manifest.n_samples, labels.len()),
    ];
    for (what, want, got) in declared {
        if want != got {
            return Err(CcdError::validation(format!(
                "manifest declares {want} {what}, files contain {got}"
            )));
        }
    }
    let ds = FeatureDataset {
        name: manifest.name,
        features,
        labels,
        attributes,
        seen_classes: manifest.seen_classes,
        unseen_classes: manifest.unseen_classes,
        splits: manifest.splits,
    };
    ds.validate()?;
    Ok(ds)
}
