//! Per-epoch precision adjustment.
//!
//! Between epochs, every layer whose smoothed underflow metric sits below
//! `t_min` gains one bit of precision (it is struggling to register
//! updates) and every layer above `t_max` loses one bit (it updates so
//! easily that precision is wasted), both within hard bitwidth bounds.
//! Single-bit steps keep the requantization error bounded per epoch.

use crate::error::{Error, Result};
use crate::nn::{Network, WeightStore};
use crate::quant::{self, K_MAX, K_MIN};

/// Thresholds and bitwidth bounds for the adjustment policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    t_min: f64,
    t_max: f64,
    k_min: u8,
    k_max: u8,
}

impl PolicyConfig {
    /// Build a config with the default bitwidth bounds `[2, 32]`.
    /// Rejects `t_min > t_max` (the two branches would overlap).
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        Self::with_bounds(t_min, t_max, K_MIN, K_MAX)
    }

    pub fn with_bounds(t_min: f64, t_max: f64, k_min: u8, k_max: u8) -> Result<Self> {
        if t_min.is_nan() || t_max.is_nan() {
            return Err(Error::InvalidPolicy("thresholds must not be NaN".into()));
        }
        if t_min > t_max {
            return Err(Error::InvalidPolicy(format!(
                "t_min {t_min} > t_max {t_max}"
            )));
        }
        if k_min < K_MIN || k_max > K_MAX || k_min > k_max {
            return Err(Error::InvalidPolicy(format!(
                "bitwidth bounds [{k_min}, {k_max}] outside [{K_MIN}, {K_MAX}]"
            )));
        }
        Ok(Self {
            t_min,
            t_max,
            k_min,
            k_max,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn k_min(&self) -> u8 {
        self.k_min
    }

    pub fn k_max(&self) -> u8 {
        self.k_max
    }
}

impl Default for PolicyConfig {
    /// `(t_min, t_max) = (6.0, inf)`: push precision up wherever updates
    /// struggle to register, never take bits away.
    fn default() -> Self {
        Self {
            t_min: 6.0,
            t_max: f64::INFINITY,
            k_min: K_MIN,
            k_max: K_MAX,
        }
    }
}

/// One adjustment step for a single layer: raise the bitwidth by one when
/// the metric is below `t_min`, lower it by one when above `t_max`,
/// subject to the bounds. Exactly one branch can fire.
pub fn adjust(k: u8, gavg: f64, cfg: &PolicyConfig) -> u8 {
    if gavg < cfg.t_min && k < cfg.k_max {
        k + 1
    } else if gavg > cfg.t_max && k > cfg.k_min {
        k - 1
    } else {
        k
    }
}

/// A bitwidth change applied to one layer at an epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitwidthChange {
    pub layer_id: usize,
    pub old: u8,
    pub new: u8,
}

/// Apply [`adjust`] to every quantized layer independently, re-coding the
/// weights of each changed layer at its new bitwidth. Layers that have no
/// smoothed metric yet are skipped this round. A changed layer's moving
/// average is reset: its resolution jumped, so old samples no longer
/// describe it.
pub fn adjust_all(net: &mut Network, cfg: &PolicyConfig) -> Result<Vec<BitwidthChange>> {
    let mut changes = Vec::new();
    for (layer_id, state) in net.param_layers_mut().enumerate() {
        let WeightStore::Quantized(q) = &state.weights else {
            continue;
        };
        let Some(gavg) = state.gavg_ema else {
            continue;
        };
        let old = q.bitwidth();
        let new = adjust(old, gavg, cfg);
        if new != old {
            state.weights = WeightStore::Quantized(quant::requantize(q, new)?);
            state.gavg_ema = None;
            changes.push(BitwidthChange { layer_id, old, new });
        }
    }
    Ok(changes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Network, WeightInit};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(t_min: f64, t_max: f64) -> PolicyConfig {
        PolicyConfig::new(t_min, t_max).unwrap()
    }

    #[test]
    fn paper_default_raises_starving_layer() {
        let c = cfg(6.0, f64::INFINITY);
        assert_eq!(adjust(6, 0.5, &c), 7);
    }

    #[test]
    fn upper_guard_holds_at_32() {
        let c = cfg(6.0, f64::INFINITY);
        assert_eq!(adjust(32, 0.001, &c), 32);
    }

    #[test]
    fn lower_guard_holds_at_2() {
        let c = cfg(6.0, 100.0);
        assert_eq!(adjust(2, 1000.0, &c), 2);
    }

    #[test]
    fn boundary_is_strict() {
        let c = cfg(6.0, 100.0);
        assert_eq!(adjust(8, 6.0, &c), 8);
        assert_eq!(adjust(8, 100.0, &c), 8);
    }

    #[test]
    fn truth_table_matches_pseudocode() {
        // All nine (metric region x bitwidth boundary) cases.
        let c = cfg(1.0, 10.0);
        let cases = [
            (2u8, 0.5, 3u8),   // below t_min, at k_min: increase
            (8, 0.5, 9),       // below t_min, interior: increase
            (32, 0.5, 32),     // below t_min, at k_max: guard
            (2, 5.0, 2),       // within band, at k_min: hold
            (8, 5.0, 8),       // within band, interior: hold
            (32, 5.0, 32),     // within band, at k_max: hold
            (2, 50.0, 2),      // above t_max, at k_min: guard
            (8, 50.0, 7),      // above t_max, interior: decrease
            (32, 50.0, 31),    // above t_max, at k_max: decrease
        ];
        for (k, g, expect) in cases {
            assert_eq!(adjust(k, g, &c), expect, "k={k} gavg={g}");
        }
    }

    #[test]
    fn misconfigured_thresholds_rejected() {
        assert!(PolicyConfig::new(10.0, 5.0).is_err());
        assert!(PolicyConfig::new(f64::NAN, 5.0).is_err());
        assert!(PolicyConfig::with_bounds(1.0, 2.0, 1, 32).is_err());
        assert!(PolicyConfig::with_bounds(1.0, 2.0, 4, 33).is_err());
        assert!(PolicyConfig::with_bounds(1.0, 2.0, 8, 4).is_err());
    }

    #[test]
    fn adjust_all_applies_per_layer_and_requantizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Network::mlp(6, &[5, 4], 3, WeightInit::Quantized(8), &mut rng).unwrap();
        // Layer 0 starving, layer 1 over-provisioned, layer 2 in band.
        let emas = [Some(0.2), Some(500.0), Some(50.0)];
        for (state, ema) in net.param_layers_mut().zip(emas) {
            state.gavg_ema = ema;
        }
        let c = cfg(1.0, 100.0);
        let changes = adjust_all(&mut net, &c).unwrap();
        assert_eq!(
            changes,
            vec![
                BitwidthChange { layer_id: 0, old: 8, new: 9 },
                BitwidthChange { layer_id: 1, old: 8, new: 7 },
            ]
        );
        assert_eq!(net.bitwidths(), vec![9, 7, 8]);
        // Moving averages of changed layers were reset.
        assert_eq!(net.gavg_emas(), vec![None, None, Some(50.0)]);
    }

    #[test]
    fn adjust_all_skips_layers_without_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = Network::mlp(6, &[4], 3, WeightInit::Quantized(8), &mut rng).unwrap();
        let changes = adjust_all(&mut net, &cfg(1.0, 10.0)).unwrap();
        assert!(changes.is_empty());
        assert_eq!(net.bitwidths(), vec![8, 8]);
    }

    #[test]
    fn repeated_starvation_ramps_one_bit_per_round_to_cap() {
        let c = cfg(6.0, f64::INFINITY);
        let mut k = 6;
        for round in 0..40 {
            let next = adjust(k, 0.0, &c);
            assert!(next == k + 1 || (k == 32 && next == 32), "round {round}");
            k = next;
        }
        assert_eq!(k, 32);
    }

    proptest! {
        #[test]
        fn prop_output_always_in_bounds(
            k in 2u8..=32,
            gavg in 0.0f64..1e6,
            t_min in 0.0f64..100.0,
            spread in 0.0f64..100.0,
        ) {
            let c = cfg(t_min, t_min + spread);
            let out = adjust(k, gavg, &c);
            prop_assert!((2..=32).contains(&out));
            prop_assert!((out as i16 - k as i16).abs() <= 1);
        }

        // Higher metric never yields a higher bitwidth.
        #[test]
        fn prop_monotone_response(
            k in 2u8..=32,
            g1 in 0.0f64..1e4,
            g2 in 0.0f64..1e4,
            t_min in 0.0f64..50.0,
            spread in 0.0f64..50.0,
        ) {
            let c = cfg(t_min, t_min + spread);
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            prop_assert!(adjust(k, lo, &c) >= adjust(k, hi, &c));
        }
    }
}
