//! Binary model checkpoints.
//!
//! Layout (all integers u32 little-endian, all reals f64 little-endian):
//!
//! ```text
//! "LTK1" | layer_count | pre_latent_count | latent_layer_index
//!        | input_rank | input dims...
//! per layer: kind tag (u8) | hyperparameters | tensor count
//!            | per tensor: rank | dims... | values...
//! ```
//!
//! Batch-norm running statistics are stored as two extra tensors after
//! gamma and beta.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::layers::{Layer, LayerKind};
use crate::nn::model::SplitModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTK1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for &v in data {
        put_f64(out, v);
    }
}

pub fn to_bytes(model: &SplitModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, model.pre_latent().len() + model.post_latent().len());
    put_u32(&mut out, model.pre_latent().len());
    put_u32(&mut out, model.latent_layer_index());
    put_u32(&mut out, model.input_shape().len());
    for &d in model.input_shape() {
        put_u32(&mut out, d);
    }
    for layer in model.layers() {
        out.push(layer.kind().tag());
        match layer {
            Layer::Dense { weights, bias } => {
                put_u32(&mut out, 2);
                put_tensor(&mut out, weights.shape(), weights.data());
                put_tensor(&mut out, bias.shape(), bias.data());
            }
            Layer::Conv2d { kernels, bias, stride, padding } => {
                put_u32(&mut out, *stride);
                put_u32(&mut out, *padding);
                put_u32(&mut out, 2);
                put_tensor(&mut out, kernels.shape(), kernels.data());
                put_tensor(&mut out, bias.shape(), bias.data());
            }
            Layer::BatchNorm { gamma, beta, running_mean, running_var, eps, momentum } => {
                put_f64(&mut out, *eps);
                put_f64(&mut out, *momentum);
                put_u32(&mut out, 4);
                put_tensor(&mut out, gamma.shape(), gamma.data());
                put_tensor(&mut out, beta.shape(), beta.data());
                put_tensor(&mut out, &[running_mean.len()], running_mean);
                put_tensor(&mut out, &[running_var.len()], running_var);
            }
            Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                put_u32(&mut out, *size);
                put_u32(&mut out, *stride);
                put_u32(&mut out, 0);
            }
            Layer::Relu | Layer::Flatten => put_u32(&mut out, 0),
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n * 8 > self.buf.len() - self.pos {
            return Err(Error::Format("tensor data exceeds checkpoint size".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::parameter(shape, data)?)
    }

    fn tensors(&mut self, expected: usize) -> Result<Vec<Tensor>> {
        let count = self.u32()?;
        if count != expected {
            return Err(Error::Format(format!("expected {expected} tensors, found {count}")));
        }
        (0..count).map(|_| self.tensor()).collect()
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<SplitModel> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected LTK1)".into()));
    }
    let layer_count = c.u32()?;
    let pre_count = c.u32()?;
    let latent_index = c.u32()?;
    let rank = c.u32()?;
    let input_shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = c.u8()?;
        let kind = LayerKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown layer tag {tag}")))?;
        let layer = match kind {
            LayerKind::Dense => {
                let mut t = c.tensors(2)?;
                let bias = t.pop().expect("two tensors");
                Layer::Dense { weights: t.pop().expect("two tensors"), bias }
            }
            LayerKind::Conv2d => {
                let (stride, padding) = (c.u32()?, c.u32()?);
                let mut t = c.tensors(2)?;
                let bias = t.pop().expect("two tensors");
                Layer::Conv2d { kernels: t.pop().expect("two tensors"), bias, stride, padding }
            }
            LayerKind::BatchNorm => {
                let (eps, momentum) = (c.f64()?, c.f64()?);
                let mut t = c.tensors(4)?.into_iter();
                let (gamma, beta) = (t.next().expect("4"), t.next().expect("4"));
                let running_mean = t.next().expect("4").into_data();
                let running_var = t.next().expect("4").into_data();
                if running_mean.len() != gamma.numel() || running_var.len() != gamma.numel() {
                    return Err(Error::Format("batch-norm statistics length mismatch".into()));
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, eps, momentum }
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                let (size, stride) = (c.u32()?, c.u32()?);
                c.tensors(0)?;
                if kind == LayerKind::MaxPool {
                    Layer::MaxPool { size, stride }
                } else {
                    Layer::AvgPool { size, stride }
                }
            }
            LayerKind::Relu => {
                c.tensors(0)?;
                Layer::Relu
            }
            LayerKind::Flatten => {
                c.tensors(0)?;
                Layer::Flatten
            }
        };
        layers.push(layer);
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - c.pos)));
    }
    if pre_count > layers.len() {
        return Err(Error::Format("latent split beyond layer count".into()));
    }
    let post = layers.split_off(pre_count);
    SplitModel::from_parts(input_shape, layers, post, latent_index)
}

pub fn save(model: &SplitModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SplitModel> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
