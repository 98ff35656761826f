//! `SHWT` weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SHWT" | version u16 | input rank u8 | input dims u32*rank | layer count u32
//! per layer:
//!   kind u8 | name length u16 | name utf-8
//!   conv:  in u32 | out u32 | kh u32 | kw u32 | stride u32 | padding u32 | activation u8
//!   pool:  size u32 | stride u32
//!   dense: in u32 | units u32 | activation u8
//!   flatten: (nothing)
//!   conv/dense payload: weights f64*n | biases f64*m
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::layer::{Activation, Conv2d, Dense, Layer, LayerKind, MaxPool2d};
use crate::nn::model::ModelSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SHWT";
pub const VERSION: u16 = 1;

pub fn save_weights(model: &ModelSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.input_shape.len() as u8);
    for &d in &model.input_shape {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.layers.len());
    for layer in &model.layers {
        out.push(layer.kind.tag());
        out.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
        out.extend_from_slice(layer.name.as_bytes());
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                for v in [c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.padding] {
                    put_u32(&mut out, v);
                }
                out.push(c.activation.tag());
            }
            LayerKind::MaxPool2d(p) => {
                put_u32(&mut out, p.size);
                put_u32(&mut out, p.stride);
            }
            LayerKind::Dense(d) => {
                put_u32(&mut out, d.in_features);
                put_u32(&mut out, d.units);
                out.push(d.activation.tag());
            }
            LayerKind::Flatten => {}
        }
        if let Some((w, b)) = layer.params() {
            for v in w.data().iter().chain(b.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.pos as u64, "size overflow"))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn activation(&mut self) -> Result<Activation> {
        let at = self.pos as u64;
        let tag = self.u8("activation")?;
        Activation::from_tag(tag).ok_or_else(|| Error::format(at, format!("unknown activation tag {tag}")))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<ModelSpec> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a SHWT file"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let rank = r.u8("input rank")? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32("input dims")?);
    }
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos as u64;
        let tag = r.u8("layer kind")?;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| Error::format(at, "layer name is not utf-8"))?
            .to_string();
        let bad = |e: Error| match e {
            Error::Format { .. } => e,
            other => Error::format(at, format!("layer {name:?}: {other}")),
        };
        let kind = match tag {
            1 => {
                let dims: Vec<usize> = (0..6).map(|_| r.u32("conv dims")).collect::<Result<_>>()?;
                let act = r.activation()?;
                let mut c = Conv2d::new(dims[0], dims[1], (dims[2], dims[3]), dims[4], dims[5], act).map_err(bad)?;
                let wn = c.weights.len();
                c.weights = Tensor::new(c.weights.dims().to_vec(), r.f64s(wn, "conv weights")?).map_err(bad)?;
                c.biases = Tensor::new(vec![dims[1]], r.f64s(dims[1], "conv biases")?).map_err(bad)?;
                LayerKind::Conv2d(c)
            }
            2 => {
                let size = r.u32("pool size")?;
                let stride = r.u32("pool stride")?;
                LayerKind::MaxPool2d(MaxPool2d::new(size, stride).map_err(bad)?)
            }
            3 => {
                let inputs = r.u32("dense inputs")?;
                let units = r.u32("dense units")?;
                let act = r.activation()?;
                let mut d = Dense::new(inputs, units, act).map_err(bad)?;
                d.weights = Tensor::new(vec![units, inputs], r.f64s(units * inputs, "dense weights")?).map_err(bad)?;
                d.biases = Tensor::new(vec![units], r.f64s(units, "dense biases")?).map_err(bad)?;
                LayerKind::Dense(d)
            }
            4 => LayerKind::Flatten,
            other => return Err(Error::format(at, format!("unknown layer kind {other}"))),
        };
        layers.push(Layer { name, kind });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last layer"));
    }
    ModelSpec::new(input_shape, layers).map_err(|e| Error::format(0, e.to_string()))
}

pub fn write_weights_file(model: &ModelSpec, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, save_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn read_weights_file(path: &Path) -> Result<ModelSpec> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_weights(&bytes)
}
