//! Training-cost accounting as a function of per-layer bitwidth.
//!
//! Energy is counted in abstract bit-operation units: each training
//! iteration charges `3 * macs * batch * cost(k)` per layer, the factor 3
//! covering the forward product and the two backward products. `cost(k)`
//! is pluggable: linear in the bitwidth (so normalized numbers read as
//! mean-bitwidth fractions) or quadratic (multiplier area/energy scales
//! superlinearly in operand width). Memory counts the packed weight bits
//! plus the 32-bit bias and per-tensor parameter overhead. Both are
//! reported normalized to the same model held entirely at 32-bit.

use crate::error::{Error, Result};

/// Energy cost of one multiply-accumulate at bitwidth `k`, in units of
/// the chosen model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostFn {
    #[default]
    BitLinear,
    BitQuadratic,
}

impl CostFn {
    pub fn cost(&self, k: u8) -> f64 {
        match self {
            CostFn::BitLinear => k as f64,
            CostFn::BitQuadratic => (k as f64) * (k as f64),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bit-linear" => Some(CostFn::BitLinear),
            "bit-quadratic" => Some(CostFn::BitQuadratic),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CostFn::BitLinear => "bit-linear",
            CostFn::BitQuadratic => "bit-quadratic",
        }
    }
}

/// Size/bitwidth summary of one layer, all the cost model needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub weight_count: usize,
    pub bias_count: usize,
    /// Multiply-accumulates per sample.
    pub mac_count: usize,
    pub bitwidth: u8,
}

/// Bits charged per weight tensor for its affine parameters: scale, zero
/// point and bitwidth at one 32-bit word each.
pub const PARAM_OVERHEAD_BITS: u64 = 3 * 32;

const REFERENCE_BITWIDTH: u8 = 32;

/// Energy of one training iteration: `sum_i 3 * mac_i * batch * cost(k_i)`.
pub fn iteration_energy(layers: &[LayerCost], batch: usize, f: CostFn) -> f64 {
    layers
        .iter()
        .map(|l| 3.0 * l.mac_count as f64 * batch as f64 * f.cost(l.bitwidth))
        .sum()
}

/// Energy the same iteration would cost with every layer at 32-bit.
pub fn iteration_energy_ref32(layers: &[LayerCost], batch: usize, f: CostFn) -> f64 {
    layers
        .iter()
        .map(|l| 3.0 * l.mac_count as f64 * batch as f64 * f.cost(REFERENCE_BITWIDTH))
        .sum()
}

/// Parameter-memory footprint in bits, and the same normalized to a
/// uniform 32-bit representation. Weights are charged at their packed
/// bitwidth; bias and affine parameters at 32-bit in both numerator and
/// normalizer.
pub fn memory_footprint(layers: &[LayerCost]) -> (u64, f64) {
    let mut bits = 0u64;
    let mut bits32 = 0u64;
    for l in layers {
        let shared = 32 * l.bias_count as u64 + PARAM_OVERHEAD_BITS;
        bits += l.weight_count as u64 * l.bitwidth as u64 + shared;
        bits32 += l.weight_count as u64 * REFERENCE_BITWIDTH as u64 + shared;
    }
    let norm = if bits32 == 0 {
        1.0
    } else {
        bits as f64 / bits32 as f64
    };
    (bits, norm)
}

/// Cumulative normalized energy at the first epoch whose test accuracy
/// reaches `target`; `None` when the run never gets there. `history`
/// holds `(test_accuracy, cumulative_normalized_energy)` per epoch.
pub fn energy_to_accuracy(history: &[(f64, f64)], target: f64) -> Option<f64> {
    history
        .iter()
        .find(|(acc, _)| *acc >= target)
        .map(|(_, energy)| *energy)
}

/// Running energy account for one training run.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    cumulative_energy: f64,
    cumulative_energy_32: f64,
    memory_bits: u64,
    memory_bits_32: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charge one iteration at the layers' current bitwidths.
    pub fn charge_iteration(&mut self, layers: &[LayerCost], batch: usize, f: CostFn) {
        self.cumulative_energy += iteration_energy(layers, batch, f);
        self.cumulative_energy_32 += iteration_energy_ref32(layers, batch, f);
    }

    /// Refresh the memory footprint from the layers' current bitwidths.
    pub fn update_memory(&mut self, layers: &[LayerCost]) {
        let mut bits32 = 0u64;
        for l in layers {
            let shared = 32 * l.bias_count as u64 + PARAM_OVERHEAD_BITS;
            bits32 += l.weight_count as u64 * REFERENCE_BITWIDTH as u64 + shared;
        }
        self.memory_bits = memory_footprint(layers).0;
        self.memory_bits_32 = bits32;
    }

    pub fn cumulative_energy(&self) -> f64 {
        self.cumulative_energy
    }

    /// Cumulative energy as a fraction of the all-32-bit run. Exactly 1.0
    /// for a run held at uniform 32-bit.
    pub fn energy_norm(&self) -> f64 {
        if self.cumulative_energy_32 == 0.0 {
            1.0
        } else {
            self.cumulative_energy / self.cumulative_energy_32
        }
    }

    pub fn memory_bits(&self) -> u64 {
        self.memory_bits
    }

    pub fn memory_norm(&self) -> f64 {
        if self.memory_bits_32 == 0 {
            1.0
        } else {
            self.memory_bits as f64 / self.memory_bits_32 as f64
        }
    }
}

/// Validation helper shared by config parsers.
pub fn parse_cost_fn(s: &str) -> Result<CostFn> {
    CostFn::parse(s).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "unknown cost function {s:?} (expected bit-linear or bit-quadratic)"
        ))
    })
}
