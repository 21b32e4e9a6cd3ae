//! Evaluation: feature synthesis for unseen classes, a softmax classifier on
//! latent codes, and per-class (macro) accuracy metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{CcdError, Result};
use crate::model::{CcdModel, CodePart};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::Tensor2;

/// `2us / (u + s)`, 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if !(u >= 0.0 && s >= 0.0) {
        return Err(CcdError::validation(format!("harmonic mean of negative values ({u}, {s})")));
    }
    if u + s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            epochs: 50,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

/// Single affine layer followed by softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    /// `d x class_count`
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl SoftmaxClassifier {
    pub fn logits(&self, x: &Tensor2) -> Result<Tensor2> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    /// Arg-max class index per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|r| {
                let row = z.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Minibatch Adam on mean cross-entropy, zero-initialised.
pub fn train_classifier(
    x: &Tensor2,
    labels: &[usize],
    class_count: usize,
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<SoftmaxClassifier> {
    if x.rows() == 0 {
        return Err(CcdError::validation("classifier training set is empty"));
    }
    if labels.len() != x.rows() {
        return Err(CcdError::contract(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(CcdError::validation(format!("label {bad} not below class count {class_count}")));
    }
    if params.batch_size == 0 || !(params.lr > 0.0) {
        return Err(CcdError::validation(format!("invalid classifier params {params:?}")));
    }
    let mut clf = SoftmaxClassifier {
        weight: Tensor2::zeros(x.cols(), class_count),
        bias: Tensor2::zeros(1, class_count),
    };
    let mut adam = AdamState::new(params.lr, [&clf.weight, &clf.bias]);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..params.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(params.batch_size) {
            let xb = x.gather_rows(chunk)?;
            let mut delta = clf.logits(&xb)?;
            let n = chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                let row = delta.row_mut(r);
                softmax_in_place(row);
                row[labels[i]] -= 1.0;
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            let gw = xb.t_matmul(&delta)?;
            let gb = delta.sum_rows();
            adam.step([&mut clf.weight, &mut clf.bias], &[gw, gb])?;
        }
    }
    Ok(clf)
}

/// Accuracy of each true class, over the rows carrying it.
pub fn per_class_accuracy(predicted: &[u32], truth: &[u32]) -> BTreeMap<u32, f64> {
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        let e = tally.entry(t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    tally.into_iter().map(|(c, (hit, n))| (c, hit as f64 / n as f64)).collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Accuracies are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GzslReport {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub zsl_top1: Option<f64>,
    pub per_class: BTreeMap<u32, f64>,
    pub n_syn: usize,
}

/// [`GzslReport`] in percent, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslReportJson {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub zsl_top1: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
    pub n_syn: usize,
}

impl GzslReport {
    pub fn to_percent(&self) -> GzslReportJson {
        GzslReportJson {
            u: 100.0 * self.u,
            s: 100.0 * self.s,
            h: 100.0 * self.h,
            zsl_top1: self.zsl_top1.map(|v| 100.0 * v),
            per_class: self.per_class.iter().map(|(c, a)| (c.to_string(), 100.0 * a)).collect(),
            n_syn: self.n_syn,
        }
    }
}

/// Labelled rows of codes.
#[derive(Clone, Debug)]
pub struct LabelledCodes {
    pub codes: Tensor2,
    pub labels: Vec<u32>,
}

/// Trains one classifier over the classes present in `train`, then scores
/// each test split with per-class mean accuracy. Test classes absent from
/// `train` can never be predicted.
pub fn gzsl_from_codes(
    train: &LabelledCodes,
    test_seen: &LabelledCodes,
    test_unseen: &LabelledCodes,
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<GzslReport> {
    if test_seen.labels.is_empty() || test_unseen.labels.is_empty() {
        return Err(CcdError::validation("both test splits must be non-empty"));
    }
    let classes: Vec<u32> = train.labels.iter().copied().collect::<BTreeSet<u32>>().into_iter().collect();
    let preds = classify(train, &[test_seen, test_unseen], &classes, params, rng)?;
    let seen_acc = per_class_accuracy(&preds[0], &test_seen.labels);
    let unseen_acc = per_class_accuracy(&preds[1], &test_unseen.labels);
    let s = mean(seen_acc.values().copied());
    let u = mean(unseen_acc.values().copied());
    let mut per_class = seen_acc;
    per_class.extend(unseen_acc);
    Ok(GzslReport {
        u,
        s,
        h: harmonic_mean(u, s)?,
        zsl_top1: None,
        per_class,
        n_syn: 0,
    })
}

/// Trains over `classes` and predicts class ids for every test set.
fn classify(
    train: &LabelledCodes,
    tests: &[&LabelledCodes],
    classes: &[u32],
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<Vec<Vec<u32>>> {
    let col = |l: &u32| classes.binary_search(l).expect("class list covers labels");
    let y: Vec<usize> = train.labels.iter().map(col).collect();
    let clf = train_classifier(&train.codes, &y, classes.len(), params, rng)?;
    tests
        .iter()
        .map(|t| Ok(clf.predict(&t.codes)?.into_iter().map(|c| classes[c]).collect()))
        .collect()
}

/// Top-1 per-class mean accuracy of a classifier restricted to the test labels.
pub fn zsl_from_codes(
    train: &LabelledCodes,
    test: &LabelledCodes,
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<f64> {
    if test.labels.is_empty() {
        return Err(CcdError::validation("test split is empty"));
    }
    let classes: Vec<u32> = test.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if train.labels.iter().any(|l| classes.binary_search(l).is_err()) {
        return Err(CcdError::validation("training labels outside the test classes"));
    }
    if train.labels.is_empty() {
        // nothing to learn from: every prediction is the first class
        let pred = vec![classes[0]; test.labels.len()];
        return Ok(mean(per_class_accuracy(&pred, &test.labels).into_values()));
    }
    let preds = classify(train, &[test], &classes, params, rng)?;
    Ok(mean(per_class_accuracy(&preds[0], &test.labels).into_values()))
}

/// Codes of one part for the real rows `idx` of `dataset`.
fn real_codes(model: &CcdModel, dataset: &FeatureDataset, idx: &[usize], part: CodePart) -> Result<LabelledCodes> {
    let (x, labels) = dataset.subset(idx)?;
    Ok(LabelledCodes {
        codes: model.encode_codes(&x)?.part(part),
        labels,
    })
}

fn synthetic_codes(
    model: &CcdModel,
    dataset: &FeatureDataset,
    n_syn: usize,
    part: CodePart,
    rng: &mut Rng,
) -> Result<LabelledCodes> {
    let attrs = dataset.attributes_of(&dataset.unseen_classes)?;
    let (x, labels) = model.synthesize_features(&attrs, &dataset.unseen_classes, n_syn, rng)?;
    let codes = if x.rows() == 0 {
        Tensor2::zeros(0, part_width(model, part))
    } else {
        model.encode_codes(&x)?.part(part)
    };
    Ok(LabelledCodes { codes, labels })
}

fn part_width(model: &CcdModel, part: CodePart) -> usize {
    match part {
        CodePart::Uns => model.dims.d_uns,
        CodePart::Cs => model.dims.d_cs,
        CodePart::Cu => model.dims.d_cu,
        CodePart::Mat => model.dims.d_mat(),
    }
}

fn check_splits(dataset: &FeatureDataset) -> Result<()> {
    let s = &dataset.splits;
    for (name, v) in [("train", &s.train), ("test_seen", &s.test_seen), ("test_unseen", &s.test_unseen)] {
        if v.is_empty() {
            return Err(CcdError::validation(format!("dataset has no {name} split")));
        }
    }
    Ok(())
}

/// GZSL on one code part: real seen-train codes plus `n_syn` synthesized
/// codes per unseen class train one classifier over all classes.
pub fn evaluate_gzsl_part(
    model: &CcdModel,
    dataset: &FeatureDataset,
    n_syn: usize,
    part: CodePart,
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<GzslReport> {
    check_splits(dataset)?;
    let seen_train = real_codes(model, dataset, &dataset.splits.train, part)?;
    let syn = synthetic_codes(model, dataset, n_syn, part, rng)?;
    let train = LabelledCodes {
        codes: Tensor2::concat_rows(&[&seen_train.codes, &syn.codes])?,
        labels: [seen_train.labels, syn.labels].concat(),
    };
    let ts = real_codes(model, dataset, &dataset.splits.test_seen, part)?;
    let tu = real_codes(model, dataset, &dataset.splits.test_unseen, part)?;
    let mut report = gzsl_from_codes(&train, &ts, &tu, params, rng)?;
    report.n_syn = n_syn;
    Ok(report)
}

/// GZSL on `mat` codes.
pub fn evaluate_gzsl(
    model: &CcdModel,
    dataset: &FeatureDataset,
    n_syn: usize,
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<GzslReport> {
    evaluate_gzsl_part(model, dataset, n_syn, CodePart::Mat, params, rng)
}

/// Unseen-only classification of real unseen test rows by a classifier
/// trained on synthesized `mat` codes.
pub fn evaluate_zsl(
    model: &CcdModel,
    dataset: &FeatureDataset,
    n_syn: usize,
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<f64> {
    check_splits(dataset)?;
    let syn = synthetic_codes(model, dataset, n_syn, CodePart::Mat, rng)?;
    let tu = real_codes(model, dataset, &dataset.splits.test_unseen, CodePart::Mat)?;
    zsl_from_codes(&syn, &tu, params, rng)
}

/// GZSL and ZSL on `mat`, as one report.
pub fn evaluate_full(
    model: &CcdModel,
    dataset: &FeatureDataset,
    n_syn: usize,
    params: &ClassifierParams,
    rng: &mut Rng,
) -> Result<GzslReport> {
    let mut report = evaluate_gzsl(model, dataset, n_syn, params, rng)?;
    report.zsl_top1 = Some(evaluate_zsl(model, dataset, n_syn, params, rng)?);
    Ok(report)
}

/// GZSL report of each code part; the part's score is its `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub parts: BTreeMap<CodePart, GzslReport>,
}

impl ProbeReport {
    pub fn score(&self, part: CodePart) -> f64 {
        self.parts[&part].h
    }
}

/// Runs the GZSL protocol four times, once per code part, each with the
/// same classifier settings and its own copy of `rng`.
pub fn disentangling_probe(
    model: &CcdModel,
    dataset: &FeatureDataset,
    n_syn: usize,
    params: &ClassifierParams,
    rng: &Rng,
) -> Result<ProbeReport> {
    let mut parts = BTreeMap::new();
    for part in CodePart::ALL {
        let mut r = rng.clone();
        parts.insert(part, evaluate_gzsl_part(model, dataset, n_syn, part, params, &mut r)?);
    }
    Ok(ProbeReport { parts })
}

/// CSV with header `label,part,dim0,...` and four rows per sample (`uns`,
/// `cs`, `cu`, `mat`). Parts narrower than `mat` leave trailing fields empty.
pub fn dump_embeddings(model: &CcdModel, features: &Tensor2, labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(CcdError::contract(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let code = model.encode_codes(features)?;
    let width = model.dims.d_mat();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "label,part")?;
    for k in 0..width {
        write!(w, ",dim{k}")?;
    }
    writeln!(w)?;
    let parts: Vec<(CodePart, Tensor2)> = CodePart::ALL.iter().map(|&p| (p, code.part(p))).collect();
    for (i, &label) in labels.iter().enumerate() {
        for (part, t) in &parts {
            write!(w, "{label},{}", part.name())?;
            for v in t.row(i) {
                write!(w, ",{v:?}")?;
            }
            for _ in t.cols()..width {
                write!(w, ",")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}
