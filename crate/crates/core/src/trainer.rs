//! The training loop.
//!
//! Randomness is counter-based: step `k` (0-based) draws everything from
//! `Rng::with_stream(seed, k + 1)` and initialisation uses stream 0. The
//! number of completed steps is the main optimizer's step counter, so a
//! checkpoint alone is enough to resume a run bitwise.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Var};
use crate::checkpoint::save_checkpoint;
use crate::clustering::{default_n_sets, kmeans_fit, DEFAULT_MAX_ITER};
use crate::data::{Batch, FeatureDataset, SeenTrainSet};
use crate::error::{CcdError, Result};
use crate::losses::{
    average_set_terms, class_contrastive_per_set, loss_align, loss_rec, loss_set_contrastive, loss_total, loss_vae,
    LossBreakdown, LossTerms, LossWeights, RecPlans, Similarity,
};
use crate::model::{
    align_forward, disentangle, vae_decode, vae_encode_with_noise, CcdModel, CodeVars, HiddenActivation, MainVars,
    ModelDims,
};
use crate::nn::BoundLayer;
use crate::optim::clip_global_norm;
use crate::rng::Rng;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_steps: u64,
    pub batch_size: usize,
    /// Cluster sets per batch; `None` means `ceil(n_seen / 10)`.
    pub n_set: Option<usize>,
    pub align_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub d_z: usize,
    /// Width of each of `uns`, `cs` and `cu`.
    pub d_part: usize,
    pub hidden_width: usize,
    pub encoder_hidden_activation: HiddenActivation,
    /// Feed `x̂` codes to the reconstruction, contrastive and alignment losses.
    pub include_pseudo_in_losses: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub clip_norm: f64,
    pub similarity: Similarity,
    /// Add the `uns`-swapped and `cs`-swapped reconstruction terms.
    pub swap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            n_steps: 2000,
            batch_size: 64,
            n_set: None,
            align_steps: 1,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            tau: w.tau,
            learning_rate: 3e-4,
            seed: 0,
            d_z: 64,
            d_part: 64,
            hidden_width: 4096,
            encoder_hidden_activation: HiddenActivation::Relu,
            include_pseudo_in_losses: true,
            checkpoint_every: 0,
            clip_norm: 5.0,
            similarity: Similarity::Cosine,
            swap: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| CcdError::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CcdError::validation(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.n_set == Some(0) {
            return Err(CcdError::validation("n_set must be at least 1"));
        }
        if self.align_steps == 0 {
            return Err(CcdError::validation("align_steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CcdError::validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CcdError::validation(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.d_z == 0 || self.d_part == 0 || self.hidden_width == 0 {
            return Err(CcdError::validation("d_z, d_part and hidden_width must be positive"));
        }
        self.weights().validate()
    }

    pub fn model_dims(&self, d_feat: usize, d_attr: usize, n_seen: usize) -> ModelDims {
        ModelDims {
            d_feat,
            d_attr,
            d_z: self.d_z,
            d_uns: self.d_part,
            d_cs: self.d_part,
            d_cu: self.d_part,
            n_seen,
            hidden: self.hidden_width,
            encoder_hidden: self.encoder_hidden_activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 0-based index of the step.
    pub step: u64,
    pub losses: LossBreakdown,
    pub set_sizes: Vec<usize>,
    pub wall_time_s: f64,
}

/// What a step is doing, in the order the step does it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStage {
    Cluster,
    Vae,
    Disentangle,
    Align,
    Rec,
    SetContrast,
    ClassContrast,
    Total,
    Update,
}

/// Hooks called during training.
pub trait TrainObserver {
    /// Every batch before it is used.
    fn on_batch(&mut self, _step: u64, _batch: &Batch) {}
    fn on_stage(&mut self, _step: u64, _stage: StepStage) {}
}

impl TrainObserver for () {}

/// Records every stage of every step.
#[derive(Clone, Debug, Default)]
pub struct StageRecorder {
    pub stages: Vec<(u64, StepStage)>,
}

impl TrainObserver for StageRecorder {
    fn on_stage(&mut self, step: u64, stage: StepStage) {
        self.stages.push((step, stage));
    }
}

/// Inputs normally drawn from the step's stream, fixed for testing.
#[derive(Clone, Debug, Default)]
pub struct StepOverrides {
    pub rec_plans: Option<RecPlans>,
}

pub fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::with_stream(seed, step + 1)
}

/// Fresh model for `data` under `config`.
pub fn init_model(data: &SeenTrainSet, config: &TrainConfig) -> Result<CcdModel> {
    config.validate()?;
    let dims = config.model_dims(data.features.cols(), data.d_attr(), data.seen_classes.len());
    CcdModel::new(dims, config.learning_rate, &mut Rng::with_stream(config.seed, 0))
}

/// Graph state after the VAE and `E2` passes of a step.
#[derive(Clone, Debug)]
pub struct StepForward {
    pub l_vae: Var,
    /// Rows the autoencoder sees: `x`, then `x̂` when pseudo features are used.
    pub ae_input: Var,
    pub code: CodeVars,
    pub mat: Var,
    pub labels: Vec<u32>,
    pub set_ids: Vec<usize>,
}

/// VAE pass with fixed noise `eps`, then one `E2` pass. `stage` is called
/// after each of the two.
#[allow(clippy::too_many_arguments)]
pub fn step_forward(
    g: &mut Graph,
    vars: &MainVars,
    dims: &ModelDims,
    batch: &Batch,
    set_ids: &[usize],
    eps: Tensor2,
    include_pseudo: bool,
    stage: &mut dyn FnMut(StepStage),
) -> Result<StepForward> {
    let x = g.constant(batch.features.clone());
    let a = g.constant(batch.attributes.clone());
    let vae = vae_encode_with_noise(g, vars, x, a, eps)?;
    let x_hat = vae_decode(g, vars, vae.z, a)?;
    let l_vae = loss_vae(g, x, x_hat, vae.mu, vae.logvar)?;
    stage(StepStage::Vae);

    let (ae_input, labels, set_ids) = if include_pseudo {
        let both = g.concat_rows(&[x, x_hat])?;
        (both, [batch.labels.as_slice(), batch.labels.as_slice()].concat(), [set_ids, set_ids].concat())
    } else {
        (x, batch.labels.clone(), set_ids.to_vec())
    };
    let code = disentangle(g, vars, dims, ae_input)?;
    let mat = code.mat(g)?;
    stage(StepStage::Disentangle);
    Ok(StepForward {
        l_vae,
        ae_input,
        code,
        mat,
        labels,
        set_ids,
    })
}

/// Reconstruction, contrastive and alignment terms and their weighted
/// total. `head` is the alignment head as placed on the graph.
#[allow(clippy::too_many_arguments)]
pub fn step_objective(
    g: &mut Graph,
    vars: &MainVars,
    fwd: &StepForward,
    head: &[BoundLayer],
    plans: &RecPlans,
    seen_classes: &[u32],
    config: &TrainConfig,
    stage: &mut dyn FnMut(StepStage),
) -> Result<(Var, LossBreakdown)> {
    let weights = config.weights();
    let l_rec = loss_rec(g, vars, fwd.ae_input, &fwd.code, plans)?;
    stage(StepStage::Rec);
    let l_mat = loss_set_contrastive(g, fwd.mat, &fwd.set_ids, weights.tau, config.similarity)?;
    stage(StepStage::SetContrast);
    let per_set = class_contrastive_per_set(g, fwd.code.cu, &fwd.set_ids, &fwd.labels, weights.tau, config.similarity)?;
    for _ in &per_set {
        stage(StepStage::ClassContrast);
    }
    let l_cu = average_set_terms(g, &per_set)?;
    let logits = align_forward(g, head, fwd.mat, &fwd.labels, seen_classes)?;
    let l_a = loss_align(g, logits.logits, &logits.mask, &logits.targets)?;
    let terms = LossTerms {
        vae: fwd.l_vae,
        rec: l_rec,
        mat: l_mat,
        cu: l_cu,
        align: l_a,
    };
    let out = loss_total(g, &terms, &weights)?;
    stage(StepStage::Total);
    Ok(out)
}

/// One update on a batch. `rng` supplies clustering, VAE noise and swap plans.
pub fn train_step(
    model: &mut CcdModel,
    batch: &Batch,
    seen_classes: &[u32],
    config: &TrainConfig,
    rng: &mut Rng,
    overrides: &StepOverrides,
    observer: &mut dyn TrainObserver,
) -> Result<StepLog> {
    let started = Instant::now();
    let step = model.main_opt.step;
    if batch.len() < 2 {
        return Err(CcdError::validation("a training batch needs at least 2 rows"));
    }
    for &l in &batch.labels {
        if seen_classes.binary_search(&l).is_err() {
            return Err(CcdError::contract(format!("batch label {l} is not a seen class")));
        }
    }
    observer.on_batch(step, batch);

    let m = config
        .n_set
        .unwrap_or_else(|| default_n_sets(seen_classes.len()))
        .min(batch.batch_class_count);
    let clusters = kmeans_fit(&batch.features, m, rng, DEFAULT_MAX_ITER)?;
    observer.on_stage(step, StepStage::Cluster);

    let mut g = Graph::new();
    let vars = model.bind_main(&mut g);
    let eps = rng.normal_tensor(batch.len(), model.dims.d_z, 1.0);
    let fwd = step_forward(
        &mut g,
        &vars,
        &model.dims,
        batch,
        &clusters.set_ids,
        eps,
        config.include_pseudo_in_losses,
        &mut |s| observer.on_stage(step, s),
    )?;

    let frozen_mat = g.value(fwd.mat).clone();
    for _ in 0..config.align_steps {
        align_inner_step(model, &frozen_mat, &fwd.labels, seen_classes, config.clip_norm)?;
        observer.on_stage(step, StepStage::Align);
    }

    let plans = match &overrides.rec_plans {
        Some(p) => p.clone(),
        None if config.swap => RecPlans::random(&fwd.set_ids, rng)?,
        None => RecPlans::default(),
    };
    let head = model.align.bind_frozen(&mut g);
    let (total, losses) = step_objective(
        &mut g,
        &vars,
        &fwd,
        &head,
        &plans,
        seen_classes,
        config,
        &mut |s| observer.on_stage(step, s),
    )?;
    if !losses.is_finite() {
        return Err(CcdError::numeric(format!("non-finite loss at step {step}: {losses:?}")));
    }

    let grads = g.backward(total)?;
    let mut grads: Vec<Tensor2> = (0..model.n_main_tensors())
        .map(|i| grads.param(ParamId(i)).cloned().expect("main parameters are registered"))
        .collect();
    clip_global_norm(&mut grads, config.clip_norm);
    model.apply_main_update(&grads)?;
    observer.on_stage(step, StepStage::Update);

    Ok(StepLog {
        step,
        losses,
        set_sizes: clusters.set_sizes,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// One Adam step of the alignment head on fixed `mat` codes.
fn align_inner_step(
    model: &mut CcdModel,
    mat: &Tensor2,
    labels: &[u32],
    seen_classes: &[u32],
    clip_norm: f64,
) -> Result<()> {
    let mut g = Graph::new();
    let head = model.align.bind(&mut g, 0);
    let m = g.constant(mat.clone());
    let logits = align_forward(&mut g, &head, m, labels, seen_classes)?;
    let loss = loss_align(&mut g, logits.logits, &logits.mask, &logits.targets)?;
    if !g.value(loss).is_finite() {
        return Err(CcdError::numeric("non-finite alignment loss"));
    }
    let grads = g.backward(loss)?;
    let mut grads: Vec<Tensor2> = (0..model.align.n_tensors())
        .map(|i| grads.param(ParamId(i)).cloned().expect("head parameters are registered"))
        .collect();
    clip_global_norm(&mut grads, clip_norm);
    model.apply_align_update(&grads)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints go; each write replaces the previous one.
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: CcdModel,
    pub logs: Vec<StepLog>,
}

/// A failed run with the logs of every step that completed.
#[derive(Debug, thiserror::Error)]
#[error("training stopped after {} completed steps: {error}", logs.len())]
pub struct TrainFailure {
    pub error: CcdError,
    pub logs: Vec<StepLog>,
}

/// Trains a fresh model for `config.n_steps` steps on the seen-class train
/// split of `dataset`.
pub fn train(
    dataset: &FeatureDataset,
    config: &TrainConfig,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<TrainRun, TrainFailure> {
    let fail = |error| TrainFailure { error, logs: Vec::new() };
    let data = dataset.seen_train_set().map_err(fail)?;
    let model = init_model(&data, config).map_err(fail)?;
    resume(model, &data, config, options, observer)
}

/// Continues training `model` until it has completed `config.n_steps` steps.
pub fn resume(
    mut model: CcdModel,
    data: &SeenTrainSet,
    config: &TrainConfig,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<TrainRun, TrainFailure> {
    let mut logs = Vec::new();
    let result = (|| -> Result<()> {
        config.validate()?;
        let expected = config.model_dims(data.features.cols(), data.d_attr(), data.seen_classes.len());
        if model.dims != expected {
            return Err(CcdError::validation(format!(
                "model dims {:?} do not match config and data {:?}",
                model.dims, expected
            )));
        }
        while model.main_opt.step < config.n_steps {
            let step = model.main_opt.step;
            let mut rng = step_rng(config.seed, step);
            let batch = data.sample_batch(config.batch_size, &mut rng)?;
            let log = train_step(
                &mut model,
                &batch,
                &data.seen_classes,
                config,
                &mut rng,
                &StepOverrides::default(),
                observer,
            )?;
            log::debug!("step {} total {:.5}", log.step, log.losses.l_total);
            logs.push(log);
            let done = model.main_opt.step;
            if let Some(path) = &options.checkpoint_path {
                if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.n_steps {
                    save_checkpoint(&model, path)?;
                }
            }
        }
        if let Some(path) = &options.checkpoint_path {
            save_checkpoint(&model, path)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(TrainRun { model, logs }),
        Err(error) => Err(TrainFailure { error, logs }),
    }
}
