//! The per-layer underflow metric and its moving average.
//!
//! `gavg` measures how large a layer's gradients are relative to the
//! layer's minimum representable resolution: the mean of `|g| / eps` over
//! all weights. Values near zero mean most proposed updates fall below
//! the resolution and the layer has stopped moving. Samples are taken a
//! few times per epoch and smoothed with an exponential moving average;
//! the smoothed value is what the precision policy compares against its
//! thresholds.

use crate::error::{Error, Result};
use crate::nn::{LayerGrads, Network};
use crate::tensor::Tensor;

/// One raw metric measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GavgSample {
    pub layer_id: usize,
    pub value: f64,
    pub iteration: usize,
}

/// Mean of `|g| / eps` over a gradient tensor.
///
/// Deliberately excludes learning rate, momentum and weight decay so the
/// metric stays comparable across optimizer settings.
pub fn gavg(grad_w: &Tensor, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::NonPositiveEpsilon(eps));
    }
    if grad_w.is_empty() {
        return Err(Error::EmptyTensor);
    }
    grad_w.check_finite("gavg")?;
    let sum: f64 = grad_w.data().iter().map(|g| (g / eps).abs()).sum();
    Ok(sum / grad_w.len() as f64)
}

/// Fold one sample into an exponential moving average.
/// A `None` state initializes to the sample itself.
pub fn ema_update(prev: Option<f64>, sample: f64, beta: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&beta));
    match prev {
        None => sample,
        Some(p) => beta * p + (1.0 - beta) * sample,
    }
}

/// On iterations where `iter % interval == 0`, compute `gavg` for every
/// quantized layer from this step's raw weight gradients and fold it into
/// the layer's moving average. Returns the samples taken (empty off the
/// trigger iterations). Layers with real-valued storage have no
/// resolution and are skipped.
pub fn maybe_collect(
    iter: usize,
    interval: usize,
    net: &mut Network,
    grads: &[LayerGrads],
    beta: f64,
) -> Result<Vec<GavgSample>> {
    let interval = interval.max(1);
    if iter % interval != 0 {
        return Ok(Vec::new());
    }
    let mut samples = Vec::new();
    for (layer_id, (state, g)) in net.param_layers_mut().zip(grads).enumerate() {
        let Some(eps) = state.epsilon() else {
            continue;
        };
        let value = gavg(&g.weights, eps)?;
        state.gavg_ema = Some(ema_update(state.gavg_ema, value, beta));
        samples.push(GavgSample {
            layer_id,
            value,
            iteration: iter,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Network, WeightInit};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gavg_of_eps_sized_gradients_is_one() {
        let eps = 0.37;
        let g = Tensor::from_vec(vec![eps, eps, eps]);
        assert!((gavg(&g, eps).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gavg_zero_gradients_signal_total_underflow() {
        let g = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(gavg(&g, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn gavg_mixed_signs() {
        let g = Tensor::from_vec(vec![0.2, -0.4]);
        assert!((gavg(&g, 0.1).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gavg_rejects_nonpositive_eps() {
        let g = Tensor::from_vec(vec![1.0]);
        assert!(matches!(
            gavg(&g, 0.0),
            Err(Error::NonPositiveEpsilon(_))
        ));
        assert!(gavg(&g, -1.0).is_err());
    }

    #[test]
    fn ema_initializes_from_first_sample() {
        assert_eq!(ema_update(None, 4.2, 0.9), 4.2);
    }

    #[test]
    fn ema_blends() {
        assert_eq!(ema_update(Some(1.0), 3.0, 0.5), 2.0);
    }

    #[test]
    fn ema_beta_zero_tracks_sample() {
        assert_eq!(ema_update(Some(100.0), 3.0, 0.0), 3.0);
    }

    fn grads_like(net: &Network, fill: f64) -> Vec<LayerGrads> {
        net.param_layers()
            .map(|s| LayerGrads {
                weights: {
                    let shape = s.weight_values().shape().to_vec();
                    let len: usize = shape.iter().product();
                    Tensor::new(vec![fill; len], shape).unwrap()
                },
                bias: vec![fill; s.bias.len()],
            })
            .collect()
    }

    #[test]
    fn collect_fires_only_on_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::mlp(4, &[3], 2, WeightInit::Quantized(8), &mut rng).unwrap();
        let grads = grads_like(&net, 0.01);
        let mut count = 0;
        for iter in 0..400 {
            let s = maybe_collect(iter, 100, &mut net, &grads, 0.9).unwrap();
            if !s.is_empty() {
                count += 1;
                assert_eq!(s.len(), net.param_layer_count());
            }
        }
        assert_eq!(count, 4); // iterations 0, 100, 200, 300
    }

    #[test]
    fn collect_interval_one_samples_every_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::mlp(4, &[], 2, WeightInit::Quantized(8), &mut rng).unwrap();
        let grads = grads_like(&net, 0.5);
        for iter in 0..5 {
            assert!(!maybe_collect(iter, 1, &mut net, &grads, 0.9).unwrap().is_empty());
        }
    }

    #[test]
    fn collect_zero_gradients_drives_ema_down_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::mlp(4, &[], 2, WeightInit::Quantized(8), &mut rng).unwrap();
        // One nonzero sample to initialize, then zeros all epoch.
        let warm = grads_like(&net, 0.1);
        maybe_collect(0, 1, &mut net, &warm, 0.9).unwrap();
        let zeros = grads_like(&net, 0.0);
        let first = net.gavg_emas()[0].unwrap();
        let mut prev = first;
        assert!(first > 0.0);
        for iter in 1..50 {
            maybe_collect(iter, 1, &mut net, &zeros, 0.9).unwrap();
            let cur = net.gavg_emas()[0].unwrap();
            assert!(cur < prev);
            prev = cur;
        }
        // beta^49 of the initial value remains.
        assert!(prev < 0.01 * first);
    }

    #[test]
    fn collect_skips_real_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Network::mlp(4, &[], 2, WeightInit::Real, &mut rng).unwrap();
        let grads = grads_like(&net, 0.1);
        assert!(maybe_collect(0, 1, &mut net, &grads, 0.9).unwrap().is_empty());
        assert_eq!(net.gavg_emas(), vec![None]);
    }

    proptest! {
        // Eq-homogeneity: doubling eps exactly halves the metric.
        #[test]
        fn prop_scale_covariance(
            values in proptest::collection::vec(-10.0f64..10.0, 1..64),
            eps in 1e-6f64..10.0,
        ) {
            let g = Tensor::from_vec(values);
            let a = gavg(&g, eps).unwrap();
            let b = gavg(&g, 2.0 * eps).unwrap();
            prop_assert_eq!(2.0 * b, a);
        }

        // The module output equals a brute-force elementwise loop.
        #[test]
        fn prop_matches_bruteforce_loop(
            values in proptest::collection::vec(-100.0f64..100.0, 1..128),
            eps in 1e-8f64..100.0,
        ) {
            let g = Tensor::from_vec(values.clone());
            let fast = gavg(&g, eps).unwrap();
            let mut acc = 0.0;
            for v in &values {
                acc += (v / eps).abs();
            }
            let slow = acc / values.len() as f64;
            prop_assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
        }

        // The EMA stays within the hull of the samples seen so far.
        #[test]
        fn prop_ema_within_sample_hull(
            samples in proptest::collection::vec(0.0f64..100.0, 1..32),
            beta in 0.0f64..0.999,
        ) {
            let mut ema = None;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &s in &samples {
                lo = lo.min(s);
                hi = hi.max(s);
                let next = ema_update(ema, s, beta);
                prop_assert!(next >= lo - 1e-12 && next <= hi + 1e-12);
                ema = Some(next);
            }
        }
    }
}
