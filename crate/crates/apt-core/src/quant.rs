//! Affine quantization of real tensors to k-bit integer codes.
//!
//! A tensor is stored as unsigned codes `q` in `[0, 2^k - 1]` together with
//! a shared scale `S` and zero point `Z`; the real value of a code is
//! `S * (q - Z)`. The scale is the tensor's minimum resolution: the real
//! gap between adjacent codes, `(max - min) / (2^k - 1)`, clamped below by
//! [`EPS_MIN`] for degenerate ranges. After computing the scale the zero
//! point is nudged to the nearest integer code so that 0.0 is always
//! exactly representable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp for the scale when a tensor has zero value range. Keeps the
/// resolution finite so downstream ratios (gradient / resolution) stay
/// well defined, and lets constant tensors move once gradients arrive.
pub const EPS_MIN: f64 = 1e-8;

/// Smallest supported bitwidth.
pub const K_MIN: u8 = 2;
/// Largest supported bitwidth.
pub const K_MAX: u8 = 32;

/// Largest code representable at bitwidth `k`, i.e. `2^k - 1`.
pub fn max_code(k: u8) -> u32 {
    debug_assert!((K_MIN..=K_MAX).contains(&k));
    ((1u64 << k) - 1) as u32
}

fn check_bitwidth(k: u8) -> Result<()> {
    if (K_MIN..=K_MAX).contains(&k) {
        Ok(())
    } else {
        Err(Error::InvalidBitwidth(k))
    }
}

/// Shared affine parameters of one quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Real units per code step. Always > 0.
    pub scale: f64,
    /// Integer code that maps to real 0.0. Lies in `[0, 2^k - 1]`.
    pub zero_point: u32,
    /// Bits per code, in `[2, 32]`.
    pub bitwidth: u8,
}

impl QuantParams {
    pub fn max_code(&self) -> u32 {
        max_code(self.bitwidth)
    }

    /// Real value of a single code.
    pub fn dequant_one(&self, code: u32) -> f64 {
        (code as i64 - self.zero_point as i64) as f64 * self.scale
    }

    /// Code for a single real value: `clamp(round(x / S) + Z, 0, 2^k - 1)`.
    ///
    /// Rounding is half-away-from-zero applied to `x / S` before the zero
    /// point is added; this keeps the mapping deterministic across
    /// platforms and makes 0.0 land exactly on the zero point.
    pub fn quant_one(&self, x: f64) -> u32 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(0.0, self.max_code() as f64) as u32
    }
}

/// A tensor held as integer codes plus shared affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u32>,
    params: QuantParams,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_parts(codes: Vec<u32>, params: QuantParams, shape: Vec<usize>) -> Result<Self> {
        check_bitwidth(params.bitwidth)?;
        let expected: usize = shape.iter().product();
        if codes.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} codes for shape {:?}",
                codes.len(),
                shape
            )));
        }
        let max = max_code(params.bitwidth);
        if params.zero_point > max {
            return Err(Error::ShapeMismatch(format!(
                "zero point {} outside [0, {}]",
                params.zero_point, max
            )));
        }
        if codes.iter().any(|&c| c > max) {
            return Err(Error::ShapeMismatch(format!("code outside [0, {max}]")));
        }
        Ok(Self {
            codes,
            params,
            shape,
        })
    }

    /// Fit parameters on `x` and quantize it in one step.
    pub fn quantize_fit(x: &Tensor, k: u8) -> Result<Self> {
        let params = fit_params(x, k)?;
        quantize(x, params)
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn bitwidth(&self) -> u8 {
        self.params.bitwidth
    }
}

/// Fit affine parameters for `x` at bitwidth `k`.
///
/// The scale is `(max(x) - min(x)) / (2^k - 1)` clamped below by
/// [`EPS_MIN`]; the zero point is the integer code nearest `-min / scale`,
/// clamped into the code range, so that 0.0 is exactly representable.
pub fn fit_params(x: &Tensor, k: u8) -> Result<QuantParams> {
    check_bitwidth(k)?;
    if x.is_empty() {
        return Err(Error::EmptyTensor);
    }
    x.check_finite("fit_params")?;
    let (min, max) = x.min_max()?;
    let levels = max_code(k) as f64;
    let scale = ((max - min) / levels).max(EPS_MIN);
    let zero_point = (-min / scale).round().clamp(0.0, levels) as u32;
    Ok(QuantParams {
        scale,
        zero_point,
        bitwidth: k,
    })
}

/// Quantize `x` under the given parameters.
pub fn quantize(x: &Tensor, params: QuantParams) -> Result<QuantizedTensor> {
    check_bitwidth(params.bitwidth)?;
    x.check_finite("quantize")?;
    let codes = x.data().iter().map(|&v| params.quant_one(v)).collect();
    QuantizedTensor::from_parts(codes, params, x.shape().to_vec())
}

/// Recover the real values `S * (q - Z)` of a quantized tensor.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q
        .codes
        .iter()
        .map(|&c| q.params.dequant_one(c))
        .collect::<Vec<_>>();
    Tensor::new(data, q.shape.clone()).expect("codes/shape invariant")
}

/// The tensor's minimum resolution: the real gap between adjacent codes.
pub fn epsilon(q: &QuantizedTensor) -> f64 {
    q.params.scale
}

/// Re-code a tensor at a new bitwidth.
///
/// Parameters are refit from the current dequantized values, so the
/// representable range tracks the live tensor. Each element moves by at
/// most half the new scale; at an unchanged bitwidth a tensor whose codes
/// span the full code range round-trips bit-for-bit.
pub fn requantize(q: &QuantizedTensor, k_new: u8) -> Result<QuantizedTensor> {
    let values = dequantize(q);
    QuantizedTensor::quantize_fit(&values, k_new)
}
