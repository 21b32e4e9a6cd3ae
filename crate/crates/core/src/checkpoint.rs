//! Binary checkpoint of a [`CcdModel`].
//!
//! Layout, little-endian:
//!
//! ```text
//! "CCDM" | u32 version | u64 d_feat d_attr d_z d_uns d_cs d_cu n_seen
//!                      | u64 encoder activation (0 relu, 1 leaky relu)
//! tensor*            e1, d1, e2, d2, align; weight then bias per layer
//! adam(main) adam(align)
//!
//! tensor = u64 rows | u64 cols | f64 data (row-major)
//! adam   = u64 step | f64 lr | tensor* m | tensor* v
//! ```
//!
//! Hidden width and layer count are recovered from the tensor shapes.
//! Other layer activations are fixed by position (see [`CcdModel::new`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CcdError, Result};
use crate::model::{CcdModel, HiddenActivation, ModelDims};
use crate::nn::{Activation, Layer, Mlp};
use crate::optim::AdamState;
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 4] = b"CCDM";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 4 + 4 + 8 * 8;

const NET_LAYERS: [usize; 5] = [2, 2, 2, 2, 3];

fn tensor_bytes(t: &Tensor2) -> u64 {
    16 + 8 * t.len() as u64
}

fn adam_bytes(a: &AdamState) -> u64 {
    16 + a.m.iter().chain(&a.v).map(tensor_bytes).sum::<u64>()
}

/// Exact file size [`save_checkpoint`] produces for `model`.
pub fn checkpoint_size(model: &CcdModel) -> u64 {
    let params: u64 = model.main_tensors().chain(model.align.tensors()).map(tensor_bytes).sum();
    HEADER_BYTES + params + adam_bytes(&model.main_opt) + adam_bytes(&model.align_opt)
}

fn nets(model: &CcdModel) -> [&Mlp; 5] {
    [&model.e1, &model.d1, &model.e2, &model.d2, &model.align]
}

fn put_tensor(w: &mut impl Write, t: &Tensor2) -> std::io::Result<()> {
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_adam(w: &mut impl Write, a: &AdamState) -> std::io::Result<()> {
    w.write_all(&a.step.to_le_bytes())?;
    w.write_all(&a.lr.to_le_bytes())?;
    for t in a.m.iter().chain(&a.v) {
        put_tensor(w, t)?;
    }
    Ok(())
}

pub fn write_checkpoint(model: &CcdModel, w: &mut impl Write) -> Result<()> {
    let d = &model.dims;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [d.d_feat, d.d_attr, d.d_z, d.d_uns, d.d_cs, d.d_cu, d.n_seen] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let code: u64 = match d.encoder_hidden {
        HiddenActivation::Relu => 0,
        HiddenActivation::LeakyRelu => 1,
    };
    w.write_all(&code.to_le_bytes())?;
    for net in nets(model) {
        for t in net.tensors() {
            put_tensor(w, t)?;
        }
    }
    put_adam(w, &model.main_opt)?;
    put_adam(w, &model.align_opt)?;
    Ok(())
}

pub fn save_checkpoint(model: &CcdModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                CcdError::format(format!("checkpoint truncated reading {what} at byte {}", self.offset))
            } else {
                CcdError::Io(e)
            }
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor2> {
        let rows = self.u64(what)? as usize;
        let cols = self.u64(what)? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| CcdError::format(format!("implausible shape {rows}x{cols} for {what}")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64(what)?);
        }
        Tensor2::from_vec(rows, cols, data)
    }

    fn adam(&mut self, like: &[&Tensor2], what: &str) -> Result<AdamState> {
        let step = self.u64(what)?;
        let lr = self.f64(what)?;
        let mut state = AdamState::new(lr, like.iter().copied());
        state.step = step;
        for slot in state.m.iter_mut().chain(state.v.iter_mut()) {
            let t = self.tensor(what)?;
            if t.shape() != slot.shape() {
                return Err(CcdError::format(format!(
                    "{what} moment has shape {:?}, parameter is {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(state)
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<CcdModel> {
    let mut r = Reader { inner: r, offset: 0 };
    let magic: [u8; 4] = r.bytes("magic")?;
    if &magic != MAGIC {
        return Err(CcdError::format(format!("bad checkpoint magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = u32::from_le_bytes(r.bytes("version")?);
    if version != VERSION {
        return Err(CcdError::format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let mut dim = [0usize; 7];
    for d in &mut dim {
        *d = r.u64("dimensions")? as usize;
    }
    let encoder_hidden = match r.u64("activation")? {
        0 => HiddenActivation::Relu,
        1 => HiddenActivation::LeakyRelu,
        k => return Err(CcdError::format(format!("unknown encoder activation code {k}"))),
    };

    let mut mlps = Vec::with_capacity(NET_LAYERS.len());
    for (net, &n_layers) in NET_LAYERS.iter().enumerate() {
        let hidden_activation = if net == 0 || net == 2 {
            encoder_hidden.activation()
        } else {
            Activation::Relu
        };
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let activation = if i + 1 == n_layers {
                Activation::Identity
            } else {
                hidden_activation
            };
            layers.push(Layer {
                weight: r.tensor("weight")?,
                bias: r.tensor("bias")?,
                activation,
            });
        }
        mlps.push(Mlp::from_layers(layers).map_err(|e| CcdError::format(format!("inconsistent network: {e}")))?);
    }
    let hidden = mlps[0].layers[0].out_dim();
    let dims = ModelDims {
        d_feat: dim[0],
        d_attr: dim[1],
        d_z: dim[2],
        d_uns: dim[3],
        d_cs: dim[4],
        d_cu: dim[5],
        n_seen: dim[6],
        hidden,
        encoder_hidden,
    };
    let mut it = mlps.into_iter();
    let mut next = || it.next().expect("five networks");
    let (e1, d1, e2, d2, align) = (next(), next(), next(), next(), next());
    let mut model = CcdModel::from_parts(dims, e1, d1, e2, d2, align, 0.0)
        .map_err(|e| CcdError::format(format!("checkpoint does not describe a valid model: {e}")))?;

    let main: Vec<&Tensor2> = model.main_tensors().collect();
    let main_opt = r.adam(&main, "main optimizer")?;
    let align: Vec<&Tensor2> = model.align.tensors().collect();
    let align_opt = r.adam(&align, "alignment optimizer")?;
    model.main_opt = main_opt;
    model.align_opt = align_opt;

    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(CcdError::format(format!("trailing bytes after checkpoint at byte {}", r.offset)));
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CcdModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
