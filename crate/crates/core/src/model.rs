//! Learnable components: the conditional VAE (`E1`/`D1`), the disentangling
//! autoencoder (`E2`/`D2`) and the alignment head, plus swap plans and
//! unseen-feature synthesis.
//!
//! `E2` produces one latent row per sample which is split by fixed column
//! ranges into `uns | cs | cu`; `mat` is `cs | cu`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{CcdError, Result};
use crate::nn::{mlp_forward, Activation, BoundLayer, Mlp};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::Tensor2;

/// `log σ²` is clamped into this range before exponentiation.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// Negative-side slope of [`HiddenActivation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.2;

/// Hidden-layer nonlinearity of the two encoders, `E1` and `E2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Relu,
    LeakyRelu,
}

impl HiddenActivation {
    pub fn activation(self) -> Activation {
        match self {
            HiddenActivation::Relu => Activation::Relu,
            HiddenActivation::LeakyRelu => Activation::LeakyRelu(LEAKY_SLOPE),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_feat: usize,
    pub d_attr: usize,
    pub d_z: usize,
    pub d_uns: usize,
    pub d_cs: usize,
    pub d_cu: usize,
    /// Number of seen classes, the alignment head's output width.
    pub n_seen: usize,
    pub hidden: usize,
    pub encoder_hidden: HiddenActivation,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_uns != self.d_cs || self.d_cs != self.d_cu {
            return Err(CcdError::validation(format!(
                "uns/cs/cu widths must be equal, got {}/{}/{}",
                self.d_uns, self.d_cs, self.d_cu
            )));
        }
        let all = [self.d_feat, self.d_attr, self.d_z, self.d_uns, self.n_seen, self.hidden];
        if all.contains(&0) {
            return Err(CcdError::validation(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn d_latent(&self) -> usize {
        self.d_uns + self.d_cs + self.d_cu
    }

    pub fn d_mat(&self) -> usize {
        self.d_cs + self.d_cu
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcdModel {
    pub dims: ModelDims,
    /// `[x | a] → [μ | log σ²]`
    pub e1: Mlp,
    /// `[z | a] → x̂`
    pub d1: Mlp,
    /// `x → [uns | cs | cu]`
    pub e2: Mlp,
    /// `[uns | cs | cu] → x̂`
    pub d2: Mlp,
    /// `mat → seen-class logits`
    pub align: Mlp,
    /// Optimizer over `e1, d1, e2, d2`.
    pub main_opt: AdamState,
    /// Optimizer over `align`.
    pub align_opt: AdamState,
}

/// Graph handles for the jointly trained networks.
#[derive(Clone, Debug)]
pub struct MainVars {
    pub e1: Vec<BoundLayer>,
    pub d1: Vec<BoundLayer>,
    pub e2: Vec<BoundLayer>,
    pub d2: Vec<BoundLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct VaeOutput {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

impl CcdModel {
    /// Fresh Glorot-initialised networks. `E1`, `D1`, `E2` and `D2` have one
    /// hidden layer (relu in the decoders, `dims.encoder_hidden` in the
    /// encoders); the alignment head has two relu hidden layers.
    pub fn new(dims: ModelDims, lr: f64, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let h = dims.hidden;
        let id = Activation::Identity;
        let enc = dims.encoder_hidden.activation();
        let relu = Activation::Relu;
        let e1 = Mlp::new(&[dims.d_feat + dims.d_attr, h, 2 * dims.d_z], enc, id, rng)?;
        let d1 = Mlp::new(&[dims.d_z + dims.d_attr, h, dims.d_feat], relu, id, rng)?;
        let e2 = Mlp::new(&[dims.d_feat, h, dims.d_latent()], enc, id, rng)?;
        let d2 = Mlp::new(&[dims.d_latent(), h, dims.d_feat], relu, id, rng)?;
        let align = Mlp::new(&[dims.d_mat(), h, h, dims.n_seen], Activation::Relu, id, rng)?;
        Self::from_parts(dims, e1, d1, e2, d2, align, lr)
    }

    /// Assembles a model with fresh optimizer state, checking every shape.
    pub fn from_parts(dims: ModelDims, e1: Mlp, d1: Mlp, e2: Mlp, d2: Mlp, align: Mlp, lr: f64) -> Result<Self> {
        dims.validate()?;
        let expect = [
            ("e1", &e1, dims.d_feat + dims.d_attr, 2 * dims.d_z),
            ("d1", &d1, dims.d_z + dims.d_attr, dims.d_feat),
            ("e2", &e2, dims.d_feat, dims.d_latent()),
            ("d2", &d2, dims.d_latent(), dims.d_feat),
            ("align", &align, dims.d_mat(), dims.n_seen),
        ];
        for (name, net, i, o) in expect {
            if net.in_dim() != i || net.out_dim() != o {
                return Err(CcdError::validation(format!(
                    "{name} maps {}→{}, expected {i}→{o}",
                    net.in_dim(),
                    net.out_dim()
                )));
            }
        }
        let main_opt = AdamState::new(lr, e1.tensors().chain(d1.tensors()).chain(e2.tensors()).chain(d2.tensors()));
        let align_opt = AdamState::new(lr, align.tensors());
        Ok(CcdModel {
            dims,
            e1,
            d1,
            e2,
            d2,
            align,
            main_opt,
            align_opt,
        })
    }

    /// `e1, d1, e2, d2` parameter tensors in id order.
    pub fn main_tensors(&self) -> impl Iterator<Item = &Tensor2> {
        self.e1
            .tensors()
            .chain(self.d1.tensors())
            .chain(self.e2.tensors())
            .chain(self.d2.tensors())
    }

    pub fn main_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor2> {
        self.e1
            .tensors_mut()
            .chain(self.d1.tensors_mut())
            .chain(self.e2.tensors_mut())
            .chain(self.d2.tensors_mut())
    }

    pub fn n_main_tensors(&self) -> usize {
        self.e1.n_tensors() + self.d1.n_tensors() + self.e2.n_tensors() + self.d2.n_tensors()
    }

    /// Registers `e1, d1, e2, d2` as trainable with ids `0..n_main_tensors()`.
    pub fn bind_main(&self, g: &mut Graph) -> MainVars {
        let mut next = 0;
        let mut bind = |net: &Mlp| {
            let v = net.bind(g, next);
            next += net.n_tensors();
            v
        };
        MainVars {
            e1: bind(&self.e1),
            d1: bind(&self.d1),
            e2: bind(&self.e2),
            d2: bind(&self.d2),
        }
    }

    /// [`MainVars`] over handles already on a graph, given in
    /// [`CcdModel::main_tensors`] order.
    pub fn main_vars_from(&self, vars: &[Var]) -> Result<MainVars> {
        if vars.len() != self.n_main_tensors() {
            return Err(CcdError::contract(format!(
                "{} handles for {} main tensors",
                vars.len(),
                self.n_main_tensors()
            )));
        }
        let mut rest = vars;
        let mut take = |net: &Mlp| {
            let (mine, tail) = rest.split_at(net.n_tensors());
            rest = tail;
            net.layers
                .iter()
                .zip(mine.chunks(2))
                .map(|(l, wb)| BoundLayer {
                    weight: wb[0],
                    bias: wb[1],
                    activation: l.activation,
                })
                .collect()
        };
        Ok(MainVars {
            e1: take(&self.e1),
            d1: take(&self.d1),
            e2: take(&self.e2),
            d2: take(&self.d2),
        })
    }

    /// One Adam step of `e1, d1, e2, d2`; `grads` in [`CcdModel::main_tensors`] order.
    pub fn apply_main_update(&mut self, grads: &[Tensor2]) -> Result<()> {
        let CcdModel {
            e1,
            d1,
            e2,
            d2,
            main_opt,
            ..
        } = self;
        let params = e1
            .tensors_mut()
            .chain(d1.tensors_mut())
            .chain(e2.tensors_mut())
            .chain(d2.tensors_mut());
        main_opt.step(params, grads)
    }

    /// One Adam step of the alignment head.
    pub fn apply_align_update(&mut self, grads: &[Tensor2]) -> Result<()> {
        self.align_opt.step(self.align.tensors_mut(), grads)
    }

    // -- untaped inference --------------------------------------------------

    /// `E2` forward split into its three parts.
    pub fn encode_codes(&self, x: &Tensor2) -> Result<DisentangledCode> {
        if x.cols() != self.dims.d_feat {
            return Err(CcdError::dim("encode_codes", x.shape(), (x.rows(), self.dims.d_feat)));
        }
        DisentangledCode::split(&self.e2.apply(x)?, &self.dims)
    }

    /// `cs | cu` of `x`.
    pub fn extract_mat(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.encode_codes(x)?.mat())
    }

    /// Draws `z ~ N(0, I)` `n_syn` times per class and decodes with `D1`
    /// conditioned on that class's attribute row.
    pub fn synthesize_features(
        &self,
        attributes: &Tensor2,
        classes: &[u32],
        n_syn: usize,
        rng: &mut Rng,
    ) -> Result<(Tensor2, Vec<u32>)> {
        if attributes.rows() != classes.len() {
            return Err(CcdError::contract(format!(
                "{} attribute rows for {} classes",
                attributes.rows(),
                classes.len()
            )));
        }
        if attributes.cols() != self.dims.d_attr {
            return Err(CcdError::dim("synthesize_features", attributes.shape(), (classes.len(), self.dims.d_attr)));
        }
        let n = classes.len() * n_syn;
        if n == 0 {
            return Ok((Tensor2::zeros(0, self.dims.d_feat), Vec::new()));
        }
        let row_idx: Vec<usize> = (0..classes.len()).flat_map(|c| std::iter::repeat(c).take(n_syn)).collect();
        let labels = row_idx.iter().map(|&c| classes[c]).collect();
        let a = attributes.gather_rows(&row_idx)?;
        let z = rng.normal_tensor(n, self.dims.d_z, 1.0);
        let x = self.d1.apply(&Tensor2::concat_cols(&[&z, &a])?)?;
        Ok((x, labels))
    }
}

// -- taped passes ------------------------------------------------------------

/// `(μ, log σ², z)` with `z = μ + exp(log σ² / 2) ⊙ ε`, `ε ~ N(0, I)`.
pub fn vae_encode(g: &mut Graph, vars: &MainVars, x: Var, a: Var, rng: &mut Rng) -> Result<VaeOutput> {
    let rows = g.shape(x).0;
    let d_z = g.shape(vars.e1.last().expect("e1 has layers").bias).1 / 2;
    let eps = rng.normal_tensor(rows, d_z, 1.0);
    vae_encode_with_noise(g, vars, x, a, eps)
}

/// [`vae_encode`] with caller-supplied `ε`.
pub fn vae_encode_with_noise(g: &mut Graph, vars: &MainVars, x: Var, a: Var, eps: Tensor2) -> Result<VaeOutput> {
    if g.shape(x).0 != g.shape(a).0 {
        return Err(CcdError::contract(format!(
            "feature rows {} != attribute rows {}",
            g.shape(x).0,
            g.shape(a).0
        )));
    }
    let input = g.concat_cols(&[x, a])?;
    let out = mlp_forward(g, &vars.e1, input)?;
    let d_z = g.shape(out).1 / 2;
    let mu = g.slice_cols(out, 0, d_z)?;
    let raw_logvar = g.slice_cols(out, d_z, 2 * d_z)?;
    let logvar = g.clamp(raw_logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let eps = g.constant(eps);
    let noise = g.mul(std, eps)?;
    let z = g.add(mu, noise)?;
    Ok(VaeOutput { mu, logvar, z })
}

pub fn vae_decode(g: &mut Graph, vars: &MainVars, z: Var, a: Var) -> Result<Var> {
    if g.shape(z).0 != g.shape(a).0 {
        return Err(CcdError::dim("vae_decode", g.shape(z), g.shape(a)));
    }
    let input = g.concat_cols(&[z, a])?;
    mlp_forward(g, &vars.d1, input)
}

/// Handles to the three latent parts of a taped `E2` pass.
#[derive(Clone, Copy, Debug)]
pub struct CodeVars {
    pub uns: Var,
    pub cs: Var,
    pub cu: Var,
}

impl CodeVars {
    pub fn mat(&self, g: &mut Graph) -> Result<Var> {
        g.concat_cols(&[self.cs, self.cu])
    }

    pub fn concat(&self, g: &mut Graph) -> Result<Var> {
        g.concat_cols(&[self.uns, self.cs, self.cu])
    }

    /// Taped [`apply_swap`].
    pub fn swapped(&self, g: &mut Graph, plan: &SwapPlan) -> Result<CodeVars> {
        let rows = g.shape(self.uns).0;
        if plan.index.len() != rows {
            return Err(CcdError::contract(format!(
                "swap plan of length {} for batch of {rows}",
                plan.index.len()
            )));
        }
        Ok(match plan.mode {
            SwapMode::Uns => CodeVars {
                uns: g.gather_rows(self.uns, &plan.index)?,
                ..*self
            },
            SwapMode::Cs => CodeVars {
                cs: g.gather_rows(self.cs, &plan.index)?,
                ..*self
            },
        })
    }
}

/// One `E2` pass, split into `uns | cs | cu`.
pub fn disentangle(g: &mut Graph, vars: &MainVars, dims: &ModelDims, x: Var) -> Result<CodeVars> {
    if g.shape(x).1 != dims.d_feat {
        return Err(CcdError::dim("disentangle", g.shape(x), (g.shape(x).0, dims.d_feat)));
    }
    let raw = mlp_forward(g, &vars.e2, x)?;
    let (a, b) = (dims.d_uns, dims.d_uns + dims.d_cs);
    Ok(CodeVars {
        uns: g.slice_cols(raw, 0, a)?,
        cs: g.slice_cols(raw, a, b)?,
        cu: g.slice_cols(raw, b, dims.d_latent())?,
    })
}

/// `D2` on `uns | cs | cu`.
pub fn ae_decode(g: &mut Graph, vars: &MainVars, code: &CodeVars) -> Result<Var> {
    let z = code.concat(g)?;
    mlp_forward(g, &vars.d2, z)
}

/// Per-sample latent parts as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledCode {
    pub uns: Tensor2,
    pub cs: Tensor2,
    pub cu: Tensor2,
}

impl DisentangledCode {
    /// Splits a raw `E2` output by the fixed column ranges.
    pub fn split(raw: &Tensor2, dims: &ModelDims) -> Result<Self> {
        if raw.cols() != dims.d_latent() {
            return Err(CcdError::dim("split code", raw.shape(), (raw.rows(), dims.d_latent())));
        }
        let (a, b) = (dims.d_uns, dims.d_uns + dims.d_cs);
        Ok(DisentangledCode {
            uns: raw.slice_cols(0, a)?,
            cs: raw.slice_cols(a, b)?,
            cu: raw.slice_cols(b, dims.d_latent())?,
        })
    }

    pub fn len(&self) -> usize {
        self.uns.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mat(&self) -> Tensor2 {
        Tensor2::concat_cols(&[&self.cs, &self.cu]).expect("parts share rows")
    }

    /// `uns | cs | cu`
    pub fn concat(&self) -> Tensor2 {
        Tensor2::concat_cols(&[&self.uns, &self.cs, &self.cu]).expect("parts share rows")
    }

    pub fn part(&self, part: CodePart) -> Tensor2 {
        match part {
            CodePart::Uns => self.uns.clone(),
            CodePart::Cs => self.cs.clone(),
            CodePart::Cu => self.cu.clone(),
            CodePart::Mat => self.mat(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodePart {
    Uns,
    Cs,
    Cu,
    Mat,
}

impl CodePart {
    pub const ALL: [CodePart; 4] = [CodePart::Uns, CodePart::Cs, CodePart::Cu, CodePart::Mat];

    pub fn name(self) -> &'static str {
        match self {
            CodePart::Uns => "uns",
            CodePart::Cs => "cs",
            CodePart::Cu => "cu",
            CodePart::Mat => "mat",
        }
    }
}

// -- swaps -------------------------------------------------------------------

/// Which latent part a [`SwapPlan`] permutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwapMode {
    /// `Z'`: row `i` takes `uns` from row `index[i]`, keeps its own `mat`.
    Uns,
    /// `Z''`: row `i` takes `cs` from row `index[i]`, keeps `uns` and `cu`.
    Cs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapPlan {
    pub index: Vec<usize>,
    pub mode: SwapMode,
}

impl SwapPlan {
    /// Checks that `index` is a bijection on `0..index.len()`.
    pub fn new(index: Vec<usize>, mode: SwapMode) -> Result<Self> {
        let n = index.len();
        let distinct: BTreeSet<usize> = index.iter().copied().collect();
        if distinct.len() != n || index.iter().any(|&i| i >= n) {
            return Err(CcdError::validation("swap index is not a permutation"));
        }
        Ok(SwapPlan { index, mode })
    }

    pub fn identity(n: usize, mode: SwapMode) -> Self {
        SwapPlan {
            index: (0..n).collect(),
            mode,
        }
    }

    pub fn inverse(&self) -> SwapPlan {
        let mut inv = vec![0; self.index.len()];
        for (i, &j) in self.index.iter().enumerate() {
            inv[j] = i;
        }
        SwapPlan {
            index: inv,
            mode: self.mode,
        }
    }
}

/// Uniformly random batch-wide permutation.
pub fn build_swap_plan(batch_size: usize, mode: SwapMode, rng: &mut Rng) -> Result<SwapPlan> {
    if batch_size == 0 {
        return Err(CcdError::validation("swap plan needs a non-empty batch"));
    }
    Ok(SwapPlan {
        index: rng.permutation(batch_size),
        mode,
    })
}

/// Random permutation that maps every cluster set onto itself.
pub fn build_swap_plan_within_sets(set_ids: &[usize], mode: SwapMode, rng: &mut Rng) -> Result<SwapPlan> {
    if set_ids.is_empty() {
        return Err(CcdError::validation("swap plan needs a non-empty batch"));
    }
    let n_sets = set_ids.iter().max().map_or(0, |&m| m + 1);
    let mut members = vec![Vec::new(); n_sets];
    for (i, &s) in set_ids.iter().enumerate() {
        members[s].push(i);
    }
    let mut index: Vec<usize> = (0..set_ids.len()).collect();
    for m in &members {
        let mut shuffled = m.clone();
        rng.shuffle(&mut shuffled);
        for (&dst, &src) in m.iter().zip(&shuffled) {
            index[dst] = src;
        }
    }
    Ok(SwapPlan { index, mode })
}

/// Permutes the rows of the part named by `plan.mode`; other parts are
/// returned unchanged.
pub fn apply_swap(code: &DisentangledCode, plan: &SwapPlan) -> Result<DisentangledCode> {
    if plan.index.len() != code.len() {
        return Err(CcdError::contract(format!(
            "swap plan of length {} for batch of {}",
            plan.index.len(),
            code.len()
        )));
    }
    let mut out = code.clone();
    match plan.mode {
        SwapMode::Uns => out.uns = code.uns.gather_rows(&plan.index)?,
        SwapMode::Cs => out.cs = code.cs.gather_rows(&plan.index)?,
    }
    Ok(out)
}

// -- alignment ---------------------------------------------------------------

/// Alignment logits over all seen classes plus the columns retained for
/// the current batch.
#[derive(Clone, Debug)]
pub struct AlignLogits {
    /// `B x n_seen`, unmasked.
    pub logits: Var,
    /// Row-major mask, true for classes present in the batch.
    pub mask: Vec<bool>,
    /// Column of every row's label.
    pub targets: Vec<usize>,
    /// Number of retained columns.
    pub batch_classes: usize,
}

/// Runs the alignment head on `mat` and masks out every seen class that is
/// absent from `labels`. `seen_classes` is sorted; position `i` is output
/// column `i`.
pub fn align_forward(
    g: &mut Graph,
    head: &[BoundLayer],
    mat: Var,
    labels: &[u32],
    seen_classes: &[u32],
) -> Result<AlignLogits> {
    if g.shape(mat).0 != labels.len() {
        return Err(CcdError::contract(format!(
            "{} mat rows for {} labels",
            g.shape(mat).0,
            labels.len()
        )));
    }
    let targets = labels
        .iter()
        .map(|l| {
            seen_classes
                .binary_search(l)
                .map_err(|_| CcdError::validation(format!("class {l} is not a seen class")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let logits = mlp_forward(g, head, mat)?;
    let n_seen = g.shape(logits).1;
    if n_seen != seen_classes.len() {
        return Err(CcdError::dim("align_forward", g.shape(logits), (labels.len(), seen_classes.len())));
    }
    let present: BTreeSet<usize> = targets.iter().copied().collect();
    let row_mask: Vec<bool> = (0..n_seen).map(|c| present.contains(&c)).collect();
    let mask = (0..labels.len()).flat_map(|_| row_mask.iter().copied()).collect();
    Ok(AlignLogits {
        logits,
        mask,
        targets,
        batch_classes: present.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_dims() -> ModelDims {
        ModelDims {
            d_feat: 6,
            d_attr: 3,
            d_z: 2,
            d_uns: 2,
            d_cs: 2,
            d_cu: 2,
            n_seen: 4,
            hidden: 5,
            encoder_hidden: HiddenActivation::Relu,
        }
    }

    fn small_model() -> CcdModel {
        CcdModel::new(small_dims(), 1e-3, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn unequal_part_widths_rejected() {
        let mut d = small_dims();
        d.d_cu = 3;
        assert!(CcdModel::new(d, 1e-3, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_noise_gives_mu() {
        let m = small_model();
        let mut rng = Rng::new(1);
        let mut g = Graph::new();
        let vars = m.bind_main(&mut g);
        let x = g.constant(rng.normal_tensor(4, 6, 1.0));
        let a = g.constant(rng.normal_tensor(4, 3, 1.0));
        let out = vae_encode_with_noise(&mut g, &vars, x, a, Tensor2::zeros(4, 2)).unwrap();
        assert_eq!(g.value(out.z), g.value(out.mu));
    }

    #[test]
    fn logvar_is_clamped() {
        let mut m = small_model();
        // a huge output bias drives the raw log-variance far outside the clamp
        let last = m.e1.layers.last_mut().unwrap();
        for c in 2..4 {
            last.bias.set(0, c, 1e3);
        }
        last.bias.set(0, 0, -1e3);
        let mut g = Graph::new();
        let vars = m.bind_main(&mut g);
        let x = g.constant(Tensor2::zeros(2, 6));
        let a = g.constant(Tensor2::zeros(2, 3));
        let out = vae_encode(&mut g, &vars, x, a, &mut Rng::new(0)).unwrap();
        assert!(g.value(out.logvar).data().iter().all(|&v| (-10.0..=10.0).contains(&v)));
    }

    #[test]
    fn decode_shapes_and_zero_weights() {
        let mut m = small_model();
        for t in m.d1.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        m.d1.layers[1].bias = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]).unwrap();
        let mut g = Graph::new();
        let vars = m.bind_main(&mut g);
        let mut rng = Rng::new(3);
        let z = g.constant(rng.normal_tensor(3, 2, 1.0));
        let a = g.constant(rng.normal_tensor(3, 3, 1.0));
        let x = vae_decode(&mut g, &vars, z, a).unwrap();
        assert_eq!(g.shape(x), (3, 6));
        for r in 0..3 {
            assert_eq!(g.value(x).row(r), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn split_concat_reconstructs_raw() {
        let m = small_model();
        let x = Rng::new(4).normal_tensor(5, 6, 1.0);
        let code = m.encode_codes(&x).unwrap();
        assert_eq!(code.concat(), m.e2.apply(&x).unwrap());
        assert_eq!(code.uns.cols(), 2);
        assert_eq!(code.cs.cols(), 2);
        assert_eq!(code.cu.cols(), 2);

        let mut g = Graph::new();
        let vars = m.bind_main(&mut g);
        let xv = g.constant(x.clone());
        let cv = disentangle(&mut g, &vars, &m.dims, xv).unwrap();
        let cat = cv.concat(&mut g).unwrap();
        assert_eq!(g.value(cat), &m.e2.apply(&x).unwrap());
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let m = small_model();
        let err = m.encode_codes(&Tensor2::zeros(2, 5)).unwrap_err();
        assert!(matches!(err, CcdError::Dimension { .. }));
    }

    #[test]
    fn single_row_plan_is_identity() {
        let p = build_swap_plan(1, SwapMode::Uns, &mut Rng::new(0)).unwrap();
        assert_eq!(p.index, vec![0]);
        assert!(build_swap_plan(0, SwapMode::Uns, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn identity_and_inverse_swaps() {
        let mut rng = Rng::new(5);
        let code = DisentangledCode {
            uns: rng.normal_tensor(6, 2, 1.0),
            cs: rng.normal_tensor(6, 2, 1.0),
            cu: rng.normal_tensor(6, 2, 1.0),
        };
        for mode in [SwapMode::Uns, SwapMode::Cs] {
            assert_eq!(apply_swap(&code, &SwapPlan::identity(6, mode)).unwrap(), code);
            let p = build_swap_plan(6, mode, &mut rng).unwrap();
            let there = apply_swap(&code, &p).unwrap();
            assert_eq!(apply_swap(&there, &p.inverse()).unwrap(), code);
        }
    }

    #[test]
    fn swap_locality() {
        let mut rng = Rng::new(6);
        let code = DisentangledCode {
            uns: rng.normal_tensor(8, 2, 1.0),
            cs: rng.normal_tensor(8, 2, 1.0),
            cu: rng.normal_tensor(8, 2, 1.0),
        };
        let p = build_swap_plan(8, SwapMode::Uns, &mut rng).unwrap();
        let s = apply_swap(&code, &p).unwrap();
        assert_eq!(s.cs, code.cs);
        assert_eq!(s.cu, code.cu);
        let p = build_swap_plan(8, SwapMode::Cs, &mut rng).unwrap();
        let s = apply_swap(&code, &p).unwrap();
        assert_eq!(s.uns, code.uns);
        assert_eq!(s.cu, code.cu);
    }

    #[test]
    fn two_row_exchange() {
        let code = DisentangledCode {
            uns: Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            cs: Tensor2::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap(),
            cu: Tensor2::from_rows(&[vec![9.0, 10.0], vec![11.0, 12.0]]).unwrap(),
        };
        let p = SwapPlan::new(vec![1, 0], SwapMode::Cs).unwrap();
        let s = apply_swap(&code, &p).unwrap();
        assert_eq!(s.cs.row(0), &[7.0, 8.0]);
        assert_eq!(s.cs.row(1), &[5.0, 6.0]);
        assert_eq!(s.uns, code.uns);
    }

    #[test]
    fn swap_length_mismatch_is_contract_error() {
        let code = DisentangledCode {
            uns: Tensor2::zeros(3, 1),
            cs: Tensor2::zeros(3, 1),
            cu: Tensor2::zeros(3, 1),
        };
        let p = SwapPlan::identity(2, SwapMode::Uns);
        assert!(matches!(apply_swap(&code, &p), Err(CcdError::Contract(_))));
    }

    #[test]
    fn non_permutation_rejected() {
        assert!(SwapPlan::new(vec![0, 0], SwapMode::Uns).is_err());
    }

    #[test]
    fn within_set_plan_stays_in_set() {
        let mut rng = Rng::new(8);
        let sets = vec![0, 1, 0, 2, 1, 0, 2, 2, 0];
        for _ in 0..50 {
            let p = build_swap_plan_within_sets(&sets, SwapMode::Cs, &mut rng).unwrap();
            SwapPlan::new(p.index.clone(), SwapMode::Cs).unwrap();
            for (i, &j) in p.index.iter().enumerate() {
                assert_eq!(sets[i], sets[j]);
            }
        }
    }

    #[test]
    fn synthesize_zero_and_stochastic() {
        let m = small_model();
        let attrs = Rng::new(9).normal_tensor(2, 3, 1.0);
        let (x, y) = m.synthesize_features(&attrs, &[7, 9], 0, &mut Rng::new(0)).unwrap();
        assert_eq!(x.rows(), 0);
        assert!(y.is_empty());

        let (x, y) = m.synthesize_features(&attrs, &[7, 9], 3, &mut Rng::new(0)).unwrap();
        assert_eq!(x.shape(), (6, 6));
        assert_eq!(y, vec![7, 7, 7, 9, 9, 9]);
        let (x2, _) = m.synthesize_features(&attrs, &[7, 9], 3, &mut Rng::new(1)).unwrap();
        assert_ne!(x.row(0), x2.row(0));
    }

    #[test]
    fn align_rejects_unknown_class() {
        let m = small_model();
        let mut g = Graph::new();
        let head = m.align.bind_frozen(&mut g);
        let mat = g.constant(Tensor2::zeros(2, 4));
        let err = align_forward(&mut g, &head, mat, &[1, 99], &[1, 2, 3, 4]).unwrap_err();
        assert!(matches!(err, CcdError::Validation(_)));
    }

    #[test]
    fn align_masks_absent_classes() {
        let m = small_model();
        let mut g = Graph::new();
        let head = m.align.bind_frozen(&mut g);
        let mat = g.constant(Rng::new(2).normal_tensor(3, 4, 1.0));
        let out = align_forward(&mut g, &head, mat, &[20, 10, 20], &[10, 20, 30, 40]).unwrap();
        assert_eq!(out.batch_classes, 2);
        assert_eq!(out.targets, vec![1, 0, 1]);
        assert_eq!(&out.mask[0..4], &[true, true, false, false]);
    }
}
