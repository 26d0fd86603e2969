//! SFCK checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SFCK"            magic
//! u16               format version (1)
//! u16               flags: bit 0 = optimizer state present
//! u16               completed fine-tune phases (0 after initial training)
//! u32 × 3           input channels, height, width
//! u32               class count
//! u32               layer count, then per layer:
//!   u8                kind: 0 conv2d, 1 relu, 2 maxpool2d, 3 flatten, 4 dense
//!   u16 + bytes       name (UTF-8)
//!   u32 × n           conv: in, out, kernel, stride, padding
//!                     maxpool: window, stride; dense: in, out; others: none
//! u32               tensor count, then per tensor in layer order, weight first:
//!   u8                trainable flag
//!   u8 + u32 × rank   shape
//!   f32 × numel       values
//! [optimizer]       f32 lr, β1, β2, ε; u64 step; per tensor m values then v values
//! u32               CRC-32 (IEEE) of every preceding byte
//! ```

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::network::{LayerKind, LayerSpec, NetworkSpec, ParameterSet};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_OPTIMIZER: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    /// Number of fine-tune phases applied since initial training.
    pub phase: u16,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: ParameterSet, phase: u16) -> Self {
        Checkpoint {
            spec,
            params,
            phase,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u16(&mut w, FORMAT_VERSION);
        put_u16(&mut w, if self.optimizer.is_some() { FLAG_OPTIMIZER } else { 0 });
        put_u16(&mut w, self.phase);
        for d in self.spec.input_shape() {
            put_u32(&mut w, d as u32);
        }
        put_u32(&mut w, self.spec.class_count() as u32);
        put_u32(&mut w, self.spec.layers().len() as u32);
        for layer in self.spec.layers() {
            let (tag, fields): (u8, Vec<usize>) = match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => (0, vec![in_channels, out_channels, kernel, stride, padding]),
                LayerKind::Relu => (1, vec![]),
                LayerKind::MaxPool2d { window, stride } => (2, vec![window, stride]),
                LayerKind::Flatten => (3, vec![]),
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => (4, vec![in_features, out_features]),
            };
            w.push(tag);
            put_u16(&mut w, layer.name.len() as u16);
            w.extend_from_slice(layer.name.as_bytes());
            for f in fields {
                put_u32(&mut w, f as u32);
            }
        }
        put_u32(&mut w, self.params.len() as u32);
        for p in self.params.iter() {
            w.push(p.trainable as u8);
            w.push(p.tensor.shape().len() as u8);
            for &d in p.tensor.shape() {
                put_u32(&mut w, d as u32);
            }
            put_f32s(&mut w, p.tensor.data());
        }
        if let Some(opt) = &self.optimizer {
            for v in [opt.lr, opt.beta1, opt.beta2, opt.epsilon] {
                w.extend_from_slice(&v.to_le_bytes());
            }
            w.extend_from_slice(&opt.t.to_le_bytes());
            for (m, v) in opt.first_moments().iter().zip(opt.second_moments()) {
                put_f32s(&mut w, m.data());
                put_f32s(&mut w, v.data());
            }
        }
        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 {
            return Err(CheckpointError::Truncated(bytes.len()).into());
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed }.into());
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let flags = r.u16()?;
        let phase = r.u16()?;
        let input = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let classes = r.u32()? as usize;
        let layer_count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(layer_count.min(1024));
        for _ in 0..layer_count {
            let tag = r.u8()?;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| malformed("layer name is not UTF-8"))?;
            let kind = match tag {
                0 => LayerKind::Conv2d {
                    in_channels: r.u32()? as usize,
                    out_channels: r.u32()? as usize,
                    kernel: r.u32()? as usize,
                    stride: r.u32()? as usize,
                    padding: r.u32()? as usize,
                },
                1 => LayerKind::Relu,
                2 => LayerKind::MaxPool2d {
                    window: r.u32()? as usize,
                    stride: r.u32()? as usize,
                },
                3 => LayerKind::Flatten,
                4 => LayerKind::Dense {
                    in_features: r.u32()? as usize,
                    out_features: r.u32()? as usize,
                },
                t => return Err(malformed(&format!("unknown layer kind {t}"))),
            };
            layers.push(LayerSpec { name, kind });
        }
        let spec = NetworkSpec::new(input, layers, classes)
            .map_err(|e| malformed(&format!("network descriptor: {e}")))?;
        let tensor_count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(tensor_count.min(1024));
        for _ in 0..tensor_count {
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(malformed(&format!("trainable flag {f}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            let tensor = Tensor::new(shape, data).map_err(|e| malformed(&e.to_string()))?;
            tensors.push((tensor, trainable));
        }
        let params =
            ParameterSet::from_tensors(&spec, tensors).map_err(|e| malformed(&format!("parameters: {e}")))?;
        let optimizer = if flags & FLAG_OPTIMIZER != 0 {
            let (lr, beta1, beta2, epsilon) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            let t = r.u64()?;
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for p in params.iter() {
                let shape = p.tensor.shape().to_vec();
                m.push(Tensor::new(shape.clone(), r.f32s(p.tensor.len())?).expect("shape from params"));
                v.push(Tensor::new(shape, r.f32s(p.tensor.len())?).expect("shape from params"));
            }
            Some(AdamState::from_parts(lr, beta1, beta2, epsilon, t, m, v)?)
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(malformed(&format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            spec,
            params,
            phase,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn malformed(msg: &str) -> Error {
    CheckpointError::Malformed(msg.to_string()).into()
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(w: &mut Vec<u8>, values: &[f32]) {
    w.reserve(values.len() * 4);
    for v in values {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed("unexpected end of body"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| malformed("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
