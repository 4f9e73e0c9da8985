//! Versioned binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FFCK" | u32 version | u32 header_len | header JSON | u32 array_count | arrays...
//! array := u16 name_len | name | u8 dtype (0 = f64, 1 = u32) | u64 len | payload
//! ```
//!
//! The JSON header describes the layer graph and the network RNG state.
//! Every scalar is stored as `f64`, so `f32` models round-trip exactly.
//! Momentum buffers are not stored: a loaded model restarts SGD from rest.

use std::collections::BTreeMap;
use std::path::Path;

use fastfood::fastfood::{FastfoodBlock, FastfoodLayer, Mode};
use fastfood::nn::{Conv2d, Dense, Dropout, FastfoodNode, Layer, MaxPool2d, Network, Param};
use fastfood::Real;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"FFCK";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U32: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Dense {
        d_in: usize,
        d_out: usize,
        has_bias: bool,
    },
    Fastfood {
        d_in: usize,
        n_out: usize,
        d_pad: usize,
        blocks: usize,
        mode: String,
        dropout_pi: f64,
        dropout_s: f64,
    },
    Relu,
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte ChaCha seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Decimal string: the position is a `u128`.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDesc>,
    pub rng: RngState,
    /// Free-form provenance, e.g. the experiment config that produced the model.
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
enum Array {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

fn format_err(msg: impl Into<String>) -> CliError {
    CliError::Core(fastfood::Error::Format(msg.into()))
}

fn widen<T: Real>(v: &[T]) -> Array {
    Array::F64(v.iter().map(|x| x.to_f64_lossy()).collect())
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(state: &RngState) -> Result<ChaCha8Rng, CliError> {
    use rand::SeedableRng;
    let bad = || format_err("malformed rng state");
    if state.seed.len() != 64 || !state.seed.is_ascii() {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, byte) in seed.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&state.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

fn describe<T: Real>(net: &Network<T>, meta: serde_json::Value) -> (Header, Vec<(String, Array)>) {
    let mut descs = Vec::new();
    let mut arrays = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let name = |s: &str| format!("{i}.{s}");
        let desc = match layer {
            Layer::Conv(c) => {
                arrays.push((name("weight"), widen(&c.weight.value)));
                arrays.push((name("bias"), widen(&c.bias.value)));
                LayerDesc::Conv {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    pad: c.pad,
                }
            }
            Layer::MaxPool(p) => LayerDesc::Maxpool {
                kernel: p.kernel,
                stride: p.stride,
            },
            Layer::Dense(d) => {
                arrays.push((name("weight"), widen(&d.weight.value)));
                if let Some(b) = &d.bias {
                    arrays.push((name("bias"), widen(&b.value)));
                }
                LayerDesc::Dense {
                    d_in: d.d_in,
                    d_out: d.d_out,
                    has_bias: d.bias.is_some(),
                }
            }
            Layer::Fastfood(node) => {
                let ff = &node.layer;
                for (j, b) in ff.blocks().iter().enumerate() {
                    arrays.push((name(&format!("block{j}.perm")), Array::U32(b.perm().to_vec())));
                    arrays.push((name(&format!("block{j}.S")), widen(b.scale())));
                    arrays.push((name(&format!("block{j}.G")), widen(b.gaussian())));
                    arrays.push((name(&format!("block{j}.B")), widen(b.signs())));
                    arrays.push((name(&format!("block{j}.c")), widen(&[b.norm_const()])));
                }
                let (dropout_pi, dropout_s) = ff.dropout();
                LayerDesc::Fastfood {
                    d_in: ff.d_in(),
                    n_out: ff.n_out(),
                    d_pad: ff.d_pad(),
                    blocks: ff.num_blocks(),
                    mode: ff.mode().as_str().to_string(),
                    dropout_pi,
                    dropout_s,
                }
            }
            Layer::Relu => LayerDesc::Relu,
            Layer::Dropout(d) => LayerDesc::Dropout { rate: d.rate },
        };
        descs.push(desc);
    }
    let header = Header {
        input_shape: net.input_shape().to_vec(),
        layers: descs,
        rng: rng_state(net.rng()),
        meta,
    };
    (header, arrays)
}

/// Serialises `net` with an arbitrary JSON `meta` record.
pub fn to_bytes<T: Real>(net: &Network<T>, meta: serde_json::Value) -> Vec<u8> {
    let (header, arrays) = describe(net, meta);
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, arr) in &arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match arr {
            Array::F64(v) => {
                out.push(DTYPE_F64);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            Array::U32(v) => {
                out.push(DTYPE_U32);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Arrays(BTreeMap<String, Array>);

impl Arrays {
    fn f64<T: Real>(&mut self, name: &str, len: usize) -> Result<Vec<T>, CliError> {
        match self.0.remove(name) {
            Some(Array::F64(v)) if v.len() == len => Ok(v.into_iter().map(T::from_f64_lossy).collect()),
            Some(Array::F64(v)) => Err(format_err(format!(
                "array `{name}` has {} values, graph needs {len}",
                v.len()
            ))),
            Some(Array::U32(_)) => Err(format_err(format!("array `{name}` should be f64"))),
            None => Err(format_err(format!("array `{name}` missing"))),
        }
    }

    fn u32(&mut self, name: &str, len: usize) -> Result<Vec<u32>, CliError> {
        match self.0.remove(name) {
            Some(Array::U32(v)) if v.len() == len => Ok(v),
            Some(_) => Err(format_err(format!("array `{name}` should be u32 of length {len}"))),
            None => Err(format_err(format!("array `{name}` missing"))),
        }
    }
}

/// A parsed checkpoint: the network plus its header.
pub struct Checkpoint<T> {
    pub header: Header,
    pub network: Network<T>,
}

fn core_to_format(e: fastfood::Error) -> CliError {
    match e {
        fastfood::Error::Io(e) => CliError::Core(fastfood::Error::Io(e)),
        other => format_err(format!("checkpoint does not describe a valid network: {other}")),
    }
}

fn build_layer<T: Real>(i: usize, desc: &LayerDesc, arrays: &mut Arrays) -> Result<Layer<T>, CliError> {
    let name = |s: &str| format!("{i}.{s}");
    Ok(match *desc {
        LayerDesc::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            let n = out_channels * in_channels * kernel * kernel;
            Layer::Conv(Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                weight: Param::new(arrays.f64(&name("weight"), n)?),
                bias: Param::new(arrays.f64(&name("bias"), out_channels)?),
            })
        }
        LayerDesc::Maxpool { kernel, stride } => Layer::MaxPool(MaxPool2d::new(kernel, stride).map_err(core_to_format)?),
        LayerDesc::Dense { d_in, d_out, has_bias } => {
            let weight = arrays.f64(&name("weight"), d_in * d_out)?;
            let bias = if has_bias {
                Some(arrays.f64(&name("bias"), d_out)?)
            } else {
                None
            };
            Layer::Dense(Dense::from_weights(d_in, d_out, weight, bias).map_err(core_to_format)?)
        }
        LayerDesc::Fastfood {
            d_in,
            n_out,
            d_pad,
            blocks,
            ref mode,
            dropout_pi,
            dropout_s,
        } => {
            let mode: Mode = mode.parse().map_err(core_to_format)?;
            let mut parts = Vec::with_capacity(blocks);
            for j in 0..blocks {
                let b = |s: &str| name(&format!("block{j}.{s}"));
                let c = arrays.f64::<T>(&b("c"), 1)?[0];
                let block = FastfoodBlock::from_parts(
                    arrays.f64(&b("S"), d_pad)?,
                    arrays.f64(&b("G"), d_pad)?,
                    arrays.f64(&b("B"), d_pad)?,
                    arrays.u32(&b("perm"), d_pad)?,
                    c,
                )
                .map_err(core_to_format)?;
                parts.push(block);
            }
            let mut layer = FastfoodLayer::from_blocks(d_in, n_out, mode, parts).map_err(core_to_format)?;
            if layer.d_pad() != d_pad {
                return Err(format_err(format!("layer {i}: d_pad {d_pad} inconsistent with d_in {d_in}")));
            }
            layer.set_dropout(dropout_pi, dropout_s).map_err(core_to_format)?;
            Layer::Fastfood(FastfoodNode::new(layer))
        }
        LayerDesc::Relu => Layer::Relu,
        LayerDesc::Dropout { rate } => Layer::Dropout(Dropout::new(rate).map_err(core_to_format)?),
    })
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, CliError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| format_err(format!("bad checkpoint header: {e}")))?;
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err("array name is not UTF-8"))?
            .to_string();
        let dtype = r.u8()?;
        let len = usize::try_from(r.u64()?).map_err(|_| format_err("array too long"))?;
        let arr = match dtype {
            DTYPE_F64 => Array::F64(
                r.take(len.checked_mul(8).ok_or_else(|| format_err("array too long"))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_U32 => Array::U32(
                r.take(len.checked_mul(4).ok_or_else(|| format_err("array too long"))?)?
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(format_err(format!("array `{name}` has unknown dtype {other}"))),
        };
        if arrays.insert(name.clone(), arr).is_some() {
            return Err(format_err(format!("array `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes after the last array"));
    }

    let mut arrays = Arrays(arrays);
    let layers = header
        .layers
        .iter()
        .enumerate()
        .map(|(i, desc)| build_layer(i, desc, &mut arrays))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = arrays.0.keys().next() {
        return Err(format_err(format!("array `{extra}` is not used by the graph")));
    }
    let mut network = Network::new(header.input_shape.clone(), layers, 0).map_err(core_to_format)?;
    network.set_rng(restore_rng(&header.rng)?);
    Ok(Checkpoint { header, network })
}

pub fn save<T: Real>(path: &Path, net: &Network<T>, meta: serde_json::Value) -> Result<(), CliError> {
    std::fs::write(path, to_bytes(net, meta)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fastfood::nn::gradcheck::tiny_network;
    use fastfood::nn::Tensor;

    #[test]
    fn rng_state_round_trips_mid_stream() {
        use rand::{RngCore, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(7);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut back = restore_rng(&rng_state(&rng)).unwrap();
        assert_eq!(back.next_u64(), rng.next_u64());
    }

    #[test]
    fn tiny_network_round_trips() {
        let (net, x, _) = tiny_network(3).unwrap();
        let bytes = to_bytes(&net, serde_json::json!({"note": "t"}));
        let ck = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(ck.network.layers(), net.layers());
        assert_eq!(ck.header.meta["note"], "t");
        let a: Tensor<f64> = net.predict(&x).unwrap();
        let b = ck.network.predict(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(to_bytes(&ck.network, ck.header.meta.clone()), bytes);
    }

    #[test]
    fn rejects_damage() {
        let (net, _, _) = tiny_network(1).unwrap();
        let bytes = to_bytes(&net, serde_json::Value::Null);
        let is_format = |b: &[u8]| matches!(from_bytes::<f64>(b), Err(CliError::Core(fastfood::Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] ^= 0xff;
        assert!(is_format(&magic));
        assert!(is_format(&bytes[..bytes.len() - 3]));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(is_format(&trailing));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(is_format(&version));
    }
}
