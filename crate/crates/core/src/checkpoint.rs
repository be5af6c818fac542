//! Model/mask persistence and sparse-storage size estimation.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "ECRP"  magic
//! u16     format version (1)
//! u32     architecture descriptor length, then that many UTF-8 bytes
//! u8      flags (bit 0: detector state present)
//! u32     layer count
//! per layer:
//!   u64 + f32[..]   weight values
//!   u64 + f32[..]   bias values
//!   u64 + bytes     weight mask bit count + packed bits (LSB first)
//!   u64 + bytes     bias mask
//!   u8              gate present; if 1: u64 + f32[..]
//! optional detector state (see encode_detector)
//! ```
//!
//! Weights persist at 32-bit (the core computes at 64-bit); masks persist
//! bit-exactly. The mask sidecar file is an "ECMK" header with per-layer
//! bit counts followed by one packed bitset.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::lifecycle::{DetectorNorm, DetectorSnapshot};
use crate::model::{Activation, Head, Layer, LayerKind, Model};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECRP";
pub const MASK_MAGIC: &[u8; 4] = b"ECMK";
pub const FORMAT_VERSION: u16 = 1;

// ---- CSR size estimate ----------------------------------------------------

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct DiskEstimate {
    /// 16-bit values + 16-bit column indices + 16-bit row pointers.
    pub csr16_bytes: u64,
    /// 16-bit values with 32-bit indices/pointers, for comparison.
    pub csr16_idx32_bytes: u64,
    /// Dense float32 storage of the same weight matrices.
    pub dense32_bytes: u64,
}

/// Estimate on-disk size of all weight matrices in CSR form.
///
/// Each layer's weight is treated as a matrix with `out_dim` rows; an entry
/// is nonzero when its mask bit survives. Bytes per matrix:
/// `2*nnz (values) + 2*nnz (column indices) + 2*(rows+1) (row pointers)`.
pub fn csr_disk_estimate(model: &Model) -> DiskEstimate {
    let mut csr16 = 0u64;
    let mut csr16_idx32 = 0u64;
    let mut dense32 = 0u64;
    for layer in &model.layers {
        let rows = layer.out_dim as u64;
        let nnz = layer.weight_mask.iter().filter(|&&m| m != 0.0).count() as u64;
        csr16 += 2 * nnz + 2 * nnz + 2 * (rows + 1);
        csr16_idx32 += 2 * nnz + 4 * nnz + 4 * (rows + 1);
        dense32 += 4 * layer.weight.numel() as u64;
    }
    DiskEstimate {
        csr16_bytes: csr16,
        csr16_idx32_bytes: csr16_idx32,
        dense32_bytes: dense32,
    }
}

// ---- bit packing ------------------------------------------------------------

pub fn pack_bits(mask: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    if bytes.len() != count.div_ceil(8) {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!(
                "bitset payload is {} bytes, {count} bits need {}",
                bytes.len(),
                count.div_ceil(8)
            ),
        });
    }
    Ok((0..count)
        .map(|i| ((bytes[i / 8] >> (i % 8)) & 1) as f64)
        .collect())
}

// ---- byte cursor ------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format {
                offset: self.pos as u64,
                reason: format!(
                    "truncated while reading {what}: expected {n} bytes, got {}",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32_array(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)? as usize;
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn f64_array(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)? as usize;
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bitset(&mut self, what: &str) -> Result<Vec<f64>> {
        let count = self.u64(what)? as usize;
        let bytes = self.take(count.div_ceil(8), what)?;
        unpack_bits(bytes, count)
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CoreError::Format {
                offset: self.pos as u64,
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn put_f32_array(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_f64_array(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_bitset(out: &mut Vec<u8>, mask: &[f64]) {
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    out.extend_from_slice(&pack_bits(mask));
}

// ---- architecture descriptor -------------------------------------------------

fn activation_tag(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => Err(CoreError::Format {
            offset: 0,
            reason: format!("unknown activation {other:?} in descriptor"),
        }),
    }
}

fn arch_descriptor(model: &Model) -> String {
    let head = match model.head {
        Head::Classification => "classification",
        Head::Regression => "regression",
    };
    let input = model
        .input_shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x");
    let layers = model
        .layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Dense => format!(
                "dense:{}:{}:{}",
                l.in_dim,
                l.out_dim,
                activation_tag(l.activation)
            ),
            LayerKind::Conv2d { kernel, stride } => format!(
                "conv:{}:{}:{}:{}:{}:{}",
                kernel,
                stride,
                l.in_dim,
                l.out_dim,
                activation_tag(l.activation),
                "valid"
            ),
        })
        .collect::<Vec<_>>()
        .join(",");
    format!("head={head};input={input};layers={layers}")
}

struct ArchInfo {
    head: Head,
    input_shape: Vec<usize>,
    layers: Vec<(LayerKind, usize, usize, Activation)>,
}

fn parse_arch(desc: &str) -> Result<ArchInfo> {
    let bad = |reason: String| CoreError::Format { offset: 0, reason };
    let mut head = None;
    let mut input = None;
    let mut layers = None;
    for part in desc.split(';') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("descriptor field {part:?} has no '='")))?;
        match k {
            "head" => {
                head = Some(match v {
                    "classification" => Head::Classification,
                    "regression" => Head::Regression,
                    other => return Err(bad(format!("unknown head {other:?}"))),
                })
            }
            "input" => {
                input = Some(
                    v.split('x')
                        .map(|d| d.parse::<usize>().map_err(|e| bad(format!("bad input dim: {e}"))))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "layers" => {
                let mut ls = Vec::new();
                for spec in v.split(',') {
                    let fields: Vec<&str> = spec.split(':').collect();
                    match fields.as_slice() {
                        ["dense", i, o, act] => ls.push((
                            LayerKind::Dense,
                            i.parse().map_err(|e| bad(format!("bad dense dim: {e}")))?,
                            o.parse().map_err(|e| bad(format!("bad dense dim: {e}")))?,
                            parse_activation(act)?,
                        )),
                        ["conv", k, s, i, o, act, "valid"] => ls.push((
                            LayerKind::Conv2d {
                                kernel: k.parse().map_err(|e| bad(format!("bad kernel: {e}")))?,
                                stride: s.parse().map_err(|e| bad(format!("bad stride: {e}")))?,
                            },
                            i.parse().map_err(|e| bad(format!("bad conv dim: {e}")))?,
                            o.parse().map_err(|e| bad(format!("bad conv dim: {e}")))?,
                            parse_activation(act)?,
                        )),
                        _ => return Err(bad(format!("unknown layer spec {spec:?}"))),
                    }
                }
                layers = Some(ls);
            }
            other => return Err(bad(format!("unknown descriptor field {other:?}"))),
        }
    }
    Ok(ArchInfo {
        head: head.ok_or_else(|| bad("descriptor missing head".into()))?,
        input_shape: input.ok_or_else(|| bad("descriptor missing input".into()))?,
        layers: layers.ok_or_else(|| bad("descriptor missing layers".into()))?,
    })
}

// ---- checkpoint ------------------------------------------------------------

pub fn encode_checkpoint(model: &Model, detector: Option<&DetectorSnapshot>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let desc = arch_descriptor(model);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.push(detector.is_some() as u8);
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        put_f32_array(&mut out, layer.weight.data());
        put_f32_array(&mut out, layer.bias.data());
        put_bitset(&mut out, &layer.weight_mask);
        put_bitset(&mut out, &layer.bias_mask);
        match &layer.gate {
            Some(g) => {
                out.push(1);
                put_f32_array(&mut out, g.data());
            }
            None => out.push(0),
        }
    }
    if let Some(d) = detector {
        put_f32_array(&mut out, &d.theta0);
        put_f32_array(&mut out, &d.prev_theta);
        out.extend_from_slice(&d.prev_delta.to_le_bytes());
        match d.delta1 {
            Some(v) => {
                out.push(1);
                out.extend_from_slice(&v.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0f64.to_le_bytes());
            }
        }
        out.extend_from_slice(&d.th.to_le_bytes());
        out.push(match d.norm {
            DetectorNorm::Delta1 => 0,
            DetectorNorm::Theta0 => 1,
        });
        put_f64_array(&mut out, &d.delta_history);
        put_f64_array(&mut out, &d.score_history);
        put_f64_array(&mut out, &d.bound_history);
        match d.triggered_epoch {
            Some(e) => {
                out.push(1);
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0u32.to_le_bytes());
            }
        }
        out.extend_from_slice(&(d.last_epoch as u32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Option<DetectorSnapshot>)> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!("bad checkpoint magic {magic:02x?}"),
        });
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let desc_len = c.u32("descriptor length")? as usize;
    let desc = std::str::from_utf8(c.take(desc_len, "descriptor")?)
        .map_err(|e| CoreError::Format {
            offset: 10,
            reason: format!("descriptor is not UTF-8: {e}"),
        })?
        .to_string();
    let arch = parse_arch(&desc)?;
    let has_detector = c.u8("flags")? & 1 == 1;
    let layer_count = c.u32("layer count")? as usize;
    if layer_count != arch.layers.len() {
        return Err(CoreError::Format {
            offset: c.pos as u64,
            reason: format!(
                "descriptor lists {} layers, file stores {layer_count}",
                arch.layers.len()
            ),
        });
    }
    let mut layers = Vec::with_capacity(layer_count);
    for (kind, in_dim, out_dim, activation) in arch.layers {
        let weight = c.f32_array("weight")?;
        let bias = c.f32_array("bias")?;
        let weight_mask = c.bitset("weight mask")?;
        let bias_mask = c.bitset("bias mask")?;
        let gate = if c.u8("gate flag")? == 1 {
            Some(Tensor::new(vec![out_dim], c.f32_array("gate")?)?)
        } else {
            None
        };
        let wshape = match kind {
            LayerKind::Dense => vec![in_dim, out_dim],
            LayerKind::Conv2d { kernel, .. } => vec![kernel * kernel * in_dim, out_dim],
        };
        layers.push(Layer {
            kind,
            weight: Tensor::new(wshape, weight)?,
            bias: Tensor::new(vec![out_dim], bias)?,
            weight_mask,
            bias_mask,
            gate,
            activation,
            in_dim,
            out_dim,
        });
    }
    let detector = if has_detector {
        let theta0 = c.f32_array("detector theta0")?;
        let prev_theta = c.f32_array("detector prev")?;
        let prev_delta = c.f64("detector prev delta")?;
        let has_d1 = c.u8("delta1 flag")? == 1;
        let d1 = c.f64("delta1")?;
        let th = c.f64("threshold")?;
        let norm = match c.u8("norm")? {
            0 => DetectorNorm::Delta1,
            1 => DetectorNorm::Theta0,
            other => {
                return Err(CoreError::Format {
                    offset: c.pos as u64 - 1,
                    reason: format!("unknown detector norm tag {other}"),
                })
            }
        };
        let delta_history = c.f64_array("delta history")?;
        let score_history = c.f64_array("score history")?;
        let bound_history = c.f64_array("bound history")?;
        let has_trig = c.u8("trigger flag")? == 1;
        let trig = c.u32("trigger epoch")? as usize;
        let last_epoch = c.u32("last epoch")? as usize;
        Some(DetectorSnapshot {
            theta0,
            prev_theta,
            prev_delta,
            delta1: has_d1.then_some(d1),
            th,
            norm,
            delta_history,
            score_history,
            bound_history,
            triggered_epoch: has_trig.then_some(trig),
            last_epoch,
        })
    } else {
        None
    };
    c.done()?;
    let model = Model {
        layers,
        head: arch.head,
        input_shape: arch.input_shape,
    };
    model.validate()?;
    Ok((model, detector))
}

pub fn save_checkpoint(model: &Model, detector: Option<&DetectorSnapshot>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, detector);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<DetectorSnapshot>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

// ---- mask sidecar ------------------------------------------------------------

pub fn encode_masks(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&(layer.weight_mask.len() as u64).to_le_bytes());
        out.extend_from_slice(&(layer.bias_mask.len() as u64).to_le_bytes());
    }
    let mut all_bits = Vec::new();
    for layer in &model.layers {
        all_bits.extend_from_slice(&layer.weight_mask);
        all_bits.extend_from_slice(&layer.bias_mask);
    }
    out.extend_from_slice(&pack_bits(&all_bits));
    out
}

/// Per-layer (weight mask, bias mask) pairs from a sidecar file.
pub fn decode_masks(bytes: &[u8]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != MASK_MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!("bad mask sidecar magic {magic:02x?}"),
        });
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let layer_count = c.u32("layer count")? as usize;
    let mut counts = Vec::with_capacity(layer_count);
    let mut total = 0usize;
    for _ in 0..layer_count {
        let w = c.u64("weight bits")? as usize;
        let b = c.u64("bias bits")? as usize;
        counts.push((w, b));
        total += w + b;
    }
    let payload = c.take(total.div_ceil(8), "mask payload")?;
    c.done()?;
    let bits = unpack_bits(payload, total)?;
    let mut out = Vec::with_capacity(layer_count);
    let mut off = 0;
    for (w, b) in counts {
        out.push((bits[off..off + w].to_vec(), bits[off + w..off + w + b].to_vec()));
        off += w + b;
    }
    Ok(out)
}

pub fn save_masks(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_masks(model))?;
    Ok(())
}

pub fn load_masks(path: &Path) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_masks(&bytes)
}
