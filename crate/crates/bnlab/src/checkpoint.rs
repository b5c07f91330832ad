//! Network checkpoints: a small versioned binary format.
//!
//! Layout: `"BNCK"` magic, u32 version, u8 mode, u32 layer count, then one
//! record per layer. All integers are little-endian; all floats are f64
//! little-endian bit patterns, so a save/load round trip is bit-exact.

use crate::batchnorm::{BnParams, BnStats};
use crate::error::{Error, Result};
use crate::nn::{Layer, Mode, Network};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"BNCK";
const VERSION: u32 = 1;

const KIND_AFFINE: u8 = 0;
const KIND_BATCHNORM: u8 = 1;
const KIND_SIGMOID: u8 = 2;
const KIND_RELU: u8 = 3;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64_slice(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    out.push(match net.mode {
        Mode::Train => 0,
        Mode::Inference => 1,
    });
    push_u32(&mut out, net.layers.len() as u32);
    for layer in &net.layers {
        match layer {
            Layer::Affine { w, b } => {
                out.push(KIND_AFFINE);
                push_u32(&mut out, w.rows() as u32);
                push_u32(&mut out, w.cols() as u32);
                push_f64_slice(&mut out, w.data());
                match b {
                    Some(bias) => {
                        out.push(1);
                        push_f64_slice(&mut out, bias.data());
                    }
                    None => out.push(0),
                }
            }
            Layer::BatchNorm { params, stats, eps } => {
                out.push(KIND_BATCHNORM);
                push_u32(&mut out, params.dim() as u32);
                push_f64_slice(&mut out, &[*eps]);
                push_f64_slice(&mut out, params.gamma.data());
                push_f64_slice(&mut out, params.beta.data());
                push_f64_slice(&mut out, stats.mean.data());
                push_f64_slice(&mut out, stats.var.data());
                push_u64(&mut out, stats.batches_seen as u64);
                push_f64_slice(&mut out, stats.ema_mean.data());
                push_f64_slice(&mut out, stats.ema_var.data());
                push_u64(&mut out, stats.ema_updates as u64);
                match stats.accum_m {
                    Some(m) => {
                        out.push(1);
                        push_u64(&mut out, m as u64);
                    }
                    None => out.push(0),
                }
            }
            Layer::Sigmoid => out.push(KIND_SIGMOID),
            Layer::Relu => out.push(KIND_RELU),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {field}"
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64_vec(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, field)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn vector(&mut self, n: usize, field: &str) -> Result<Tensor> {
        Ok(Tensor::vector(self.f64_vec(n, field)?))
    }
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mode = match r.u8("mode")? {
        0 => Mode::Train,
        1 => Mode::Inference,
        other => return Err(Error::Format(format!("invalid mode byte {other}"))),
    };
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let kind = r.u8("layer kind")?;
        let layer = match kind {
            KIND_AFFINE => {
                let rows = r.u32("affine rows")? as usize;
                let cols = r.u32("affine cols")? as usize;
                let w = Tensor::from_vec(&[rows, cols], r.f64_vec(rows * cols, "weights")?)?;
                let b = if r.u8("bias flag")? == 1 {
                    Some(r.vector(cols, "bias")?)
                } else {
                    None
                };
                Layer::Affine { w, b }
            }
            KIND_BATCHNORM => {
                let d = r.u32("bn dim")? as usize;
                let eps = r.f64_vec(1, "bn eps")?[0];
                let gamma = r.vector(d, "gamma")?;
                let beta = r.vector(d, "beta")?;
                let mean = r.vector(d, "mean")?;
                let var = r.vector(d, "var")?;
                let batches_seen = r.u64("batches_seen")? as usize;
                let ema_mean = r.vector(d, "ema_mean")?;
                let ema_var = r.vector(d, "ema_var")?;
                let ema_updates = r.u64("ema_updates")? as usize;
                let accum_m = if r.u8("accum_m flag")? == 1 {
                    Some(r.u64("accum_m")? as usize)
                } else {
                    None
                };
                Layer::BatchNorm {
                    params: BnParams::new(gamma, beta)?,
                    stats: BnStats {
                        mean,
                        var,
                        batches_seen,
                        ema_mean,
                        ema_var,
                        ema_updates,
                        accum_m,
                    },
                    eps,
                }
            }
            KIND_SIGMOID => Layer::Sigmoid,
            KIND_RELU => Layer::Relu,
            other => {
                return Err(Error::Format(format!(
                    "invalid layer kind {other} at layer {i}"
                )))
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Network { layers, mode })
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode_network(net))?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    decode_network(&std::fs::read(path)?)
}
