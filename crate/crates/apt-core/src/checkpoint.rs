//! Binary checkpoint of a network's trainable state.
//!
//! The training state of a quantized layer is nothing but its k-bit
//! codes, its affine parameters, and its real bias; there is no
//! full-precision shadow of the weights to store. Layout, all
//! little-endian except the magic:
//!
//! ```text
//! "APT1"                          4-byte magic
//! u32    layer count              parameterized layers, network order
//! per layer:
//!   u8     k                      bitwidth, 2..=32
//!   f64    scale
//!   u32    zero_point
//!   u8     ndim, then ndim x u32  weight tensor dims
//!   codes                         prod(dims) codes, ceil(k/8) bytes each
//!   u32    bias length, then that many f64
//! ```
//!
//! Layers held in real storage (the unquantized reference mode) are
//! snapshotted at 32-bit. Loading restores weights into an existing
//! network of matching architecture; momentum buffers reset to zero.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerState, Network, WeightStore};
use crate::quant::{max_code, QuantParams, QuantizedTensor};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"APT1";

/// Bytes used per stored code at bitwidth `k`.
pub fn code_bytes(k: u8) -> usize {
    (k as usize).div_ceil(8)
}

fn quantized_view(state: &LayerState) -> Result<QuantizedTensor> {
    match &state.weights {
        WeightStore::Quantized(q) => Ok(q.clone()),
        WeightStore::Real(t) => QuantizedTensor::quantize_fit(t, 32),
    }
}

/// Serialize the network's trainable state.
pub fn network_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(net.param_layer_count() as u32).to_le_bytes());
    for state in net.param_layers() {
        let q = quantized_view(state)?;
        let p = q.params();
        out.push(p.bitwidth);
        out.extend_from_slice(&p.scale.to_le_bytes());
        out.extend_from_slice(&p.zero_point.to_le_bytes());
        out.push(q.shape().len() as u8);
        for &d in q.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let nb = code_bytes(p.bitwidth);
        for &c in q.codes() {
            out.extend_from_slice(&c.to_le_bytes()[..nb]);
        }
        out.extend_from_slice(&(state.bias.len() as u32).to_le_bytes());
        for &b in &state.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), network_to_bytes(net)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let s = self.take(8, what)?;
        Ok(f64::from_le_bytes(s.try_into().expect("8 bytes")))
    }
}

/// Restore weights, affine parameters and biases into a network of
/// matching architecture.
pub fn load_network_into(net: &mut Network, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path.as_ref())?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an APT1 checkpoint".into()));
    }
    let count = cur.u32("layer count")? as usize;
    if count != net.param_layer_count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} layers, network has {}",
            net.param_layer_count()
        )));
    }
    for (layer_id, state) in net.param_layers_mut().enumerate() {
        let k = cur.u8("bitwidth")?;
        let scale = cur.f64("scale")?;
        let zero_point = cur.u32("zero point")?;
        let ndim = cur.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dim")? as usize);
        }
        let expect_shape = state.weight_values().shape().to_vec();
        if shape != expect_shape {
            return Err(Error::Checkpoint(format!(
                "layer {layer_id}: shape {shape:?} does not match network {expect_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let nb = code_bytes(k);
        let raw = cur.take(n * nb, "codes")?;
        let limit = max_code(k);
        let mut codes = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(nb) {
            let mut word = [0u8; 4];
            word[..nb].copy_from_slice(chunk);
            let c = u32::from_le_bytes(word);
            if c > limit {
                return Err(Error::Checkpoint(format!(
                    "layer {layer_id}: code {c} exceeds {limit} at {k} bits"
                )));
            }
            codes.push(c);
        }
        let bias_len = cur.u32("bias length")? as usize;
        if bias_len != state.bias.len() {
            return Err(Error::Checkpoint(format!(
                "layer {layer_id}: bias length {bias_len} does not match {}",
                state.bias.len()
            )));
        }
        let mut bias = Vec::with_capacity(bias_len);
        for _ in 0..bias_len {
            bias.push(cur.f64("bias")?);
        }
        let params = QuantParams {
            scale,
            zero_point,
            bitwidth: k,
        };
        let q = QuantizedTensor::from_parts(codes, params, shape.clone())
            .map_err(|e| Error::Checkpoint(format!("layer {layer_id}: {e}")))?;
        state.weights = WeightStore::Quantized(q);
        state.bias = bias;
        state.momentum_buf = Tensor::zeros(shape);
        state.gavg_ema = None;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(())
}
