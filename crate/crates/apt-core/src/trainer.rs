//! The adaptive-precision training loop.
//!
//! Per iteration: forward, backward, metric collection on the interval
//! grid, quantized SGD step, energy charge. Per epoch boundary: evaluate,
//! log one record, then (in adaptive mode) adjust per-layer precision and
//! requantize changed layers. Precision never changes mid-epoch. The
//! whole run is deterministic given the config seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{CostFn, CostLedger};
use crate::data::{batches, batches_per_epoch, DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{maybe_collect, GavgSample};
use crate::nn::{sgd_step_quantized, Network, Rounding, WeightInit};
use crate::policy::{adjust_all, BitwidthChange, PolicyConfig};

/// What the run adapts, if anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Layer-wise precision adjustment between epochs.
    Apt,
    /// Quantized at the initial bitwidth for the whole run.
    FixedK,
    /// Real-valued weights; the unquantized baseline.
    Fp32Reference,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "apt" => Some(Mode::Apt),
            "fixed-k" => Some(Mode::FixedK),
            "fp32-reference" => Some(Mode::Fp32Reference),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Apt => "apt",
            Mode::FixedK => "fixed-k",
            Mode::Fp32Reference => "fp32-reference",
        }
    }
}

/// Full run configuration. Defaults follow the reference recipe: start
/// at 6 bits with thresholds (6.0, inf), SGD momentum 0.9, weight decay
/// 1e-4, batch 128, learning rate 0.1 divided by 10 at epochs 100 and
/// 150, 200 epochs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    pub initial_bitwidth: u8,
    pub policy: PolicyConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations between metric samples; `None` derives one eighth of
    /// an epoch.
    pub interval: Option<usize>,
    pub ema_beta: f64,
    pub rounding: Rounding,
    pub cost_fn: CostFn,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Apt,
            initial_bitwidth: 6,
            policy: PolicyConfig::default(),
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            lr_decay_epochs: vec![100, 150],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            interval: None,
            ema_beta: 0.9,
            rounding: Rounding::Nearest,
            cost_fn: CostFn::BitLinear,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// The desk-scale recipe used by the bundled examples and tests: the
    /// reference schedule shrunk to 20 epochs with decays at 10 and 15.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            lr_decay_epochs: vec![10, 15],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(2..=32).contains(&self.initial_bitwidth) {
            return Err(Error::InvalidBitwidth(self.initial_bitwidth));
        }
        if let Some(&e) = self.lr_decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(Error::InvalidConfig(format!(
                "decay epoch {e} outside 0..{}",
                self.epochs
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::InvalidConfig("ema beta must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if self.interval == Some(0) {
            return Err(Error::InvalidConfig("interval must be >= 1".into()));
        }
        Ok(())
    }

    fn weight_init(&self) -> WeightInit {
        match self.mode {
            Mode::Fp32Reference => WeightInit::Real,
            _ => WeightInit::Quantized(self.initial_bitwidth),
        }
    }
}

/// Piecewise-constant schedule: the base rate times the decay factor for
/// every decay epoch already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(decays as i32)
}

/// One log row per epoch; the per-layer columns are ordered like
/// [`Network::param_layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub bitwidths: Vec<u8>,
    pub gavg_emas: Vec<Option<f64>>,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Cumulative energy as a fraction of the all-32-bit run.
    pub energy_norm: f64,
    /// Current parameter memory as a fraction of 32-bit storage.
    pub mem_norm: f64,
    pub lr: f64,
}

/// Things that happened at a known point in the run, for auditing the
/// loop structure and reconstructing trajectories.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Gavg {
        epoch: usize,
        iter: usize,
        sample: GavgSample,
    },
    Bitwidth {
        epoch: usize,
        /// Iterations completed in the epoch when the change applied;
        /// always the full epoch length, adjustment is never mid-epoch.
        iter: usize,
        change: BitwidthChange,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub iter: usize,
}

/// Outcome of a training run: the per-epoch history, the event trace,
/// and whether the run aborted on a non-finite loss.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<TrainRecord>,
    pub events: Vec<Event>,
    pub diverged: Option<DivergenceInfo>,
}

impl RunResult {
    /// `(test_accuracy, cumulative normalized energy)` pairs for the
    /// energy-to-accuracy scan.
    pub fn accuracy_energy_history(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.test_accuracy, r.energy_norm))
            .collect()
    }
}

/// Fraction of argmax-correct predictions over the test set, evaluated
/// without augmentation. Ties resolve to the lowest class index.
pub fn evaluate(net: &Network, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    let mut correct = 0usize;
    for (x, y) in batches(test, 256, 0, false) {
        let logits = net.forward(&x)?;
        let classes = logits.shape()[1];
        for (b, &label) in y.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Run the full training loop on an already-initialized network.
///
/// Returns the per-epoch history; a non-finite loss (or a blown-up
/// gradient) aborts the run and is reported in
/// [`RunResult::diverged`] together with the history up to that point.
pub fn run_training(cfg: &TrainConfig, net: &mut Network, data: &DataSplit) -> Result<RunResult> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let iters_per_epoch = batches_per_epoch(data.train.len(), cfg.batch_size);
    let interval = cfg
        .interval
        .unwrap_or_else(|| iters_per_epoch.div_ceil(8))
        .max(1);

    let mut ledger = CostLedger::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut diverged = None;

    'run: for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (iter, (x, y)) in
            batches(&data.train, cfg.batch_size, epoch_seed(cfg.seed, epoch), cfg.shuffle)
                .enumerate()
        {
            let (loss, grads) = net.forward_backward(&x, &y)?;
            if !loss.is_finite() {
                diverged = Some(DivergenceInfo { epoch, iter });
                break 'run;
            }
            loss_sum += loss * y.len() as f64;
            seen += y.len();

            if cfg.mode != Mode::Fp32Reference {
                for sample in maybe_collect(iter, interval, net, &grads, cfg.ema_beta)? {
                    events.push(Event::Gavg {
                        epoch,
                        iter,
                        sample,
                    });
                }
            }

            let mut blew_up = false;
            for (layer_id, (state, g)) in net.param_layers_mut().zip(&grads).enumerate() {
                match sgd_step_quantized(
                    state,
                    layer_id,
                    &g.weights,
                    &g.bias,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                    cfg.rounding,
                ) {
                    Ok(()) => {}
                    Err(Error::GradientBlowUp { .. }) => {
                        blew_up = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if blew_up {
                diverged = Some(DivergenceInfo { epoch, iter });
                break 'run;
            }

            ledger.charge_iteration(&net.layer_costs(), y.len(), cfg.cost_fn);
        }

        let test_accuracy = evaluate(net, &data.test)?;
        ledger.update_memory(&net.layer_costs());
        records.push(TrainRecord {
            epoch,
            bitwidths: net.bitwidths(),
            gavg_emas: net.gavg_emas(),
            train_loss: loss_sum / seen.max(1) as f64,
            test_accuracy,
            energy_norm: ledger.energy_norm(),
            mem_norm: ledger.memory_norm(),
            lr,
        });

        if cfg.mode == Mode::Apt {
            for change in adjust_all(net, &cfg.policy)? {
                events.push(Event::Bitwidth {
                    epoch,
                    iter: iters_per_epoch,
                    change,
                });
            }
        }
        // Metric windows restart each epoch so the next adjustment sees
        // only samples taken at the current precision configuration.
        for state in net.param_layers_mut() {
            state.gavg_ema = None;
        }
    }

    Ok(RunResult {
        records,
        events,
        diverged,
    })
}

/// Network architecture selector for dataset-driven construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchSpec {
    Mlp { hidden: Vec<usize> },
    Cnn { channels: usize, kernel: usize },
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::Mlp { hidden: vec![128] }
    }
}

/// Build a network matching the dataset's sample shape and class count,
/// initialized deterministically from the config seed.
pub fn build_network(arch: &ArchSpec, train: &Dataset, cfg: &TrainConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match arch {
        ArchSpec::Mlp { hidden } => Network::mlp(
            train.sample_len(),
            hidden,
            train.class_count,
            cfg.weight_init(),
            &mut rng,
        ),
        ArchSpec::Cnn { channels, kernel } => {
            let (c, h, w) = match train.sample_shape() {
                [c, h, w] => (*c, *h, *w),
                other => {
                    return Err(Error::ShapeMismatch(format!(
                        "conv front end needs [channels, h, w] samples, got {other:?}"
                    )))
                }
            };
            Network::cnn(
                (c, h, w),
                *channels,
                *kernel,
                train.class_count,
                cfg.weight_init(),
                &mut rng,
            )
        }
    }
}

/// Build the network from the config seed and run training on it.
pub fn run_one(cfg: &TrainConfig, arch: &ArchSpec, data: &DataSplit) -> Result<(Network, RunResult)> {
    let mut net = build_network(arch, &data.train, cfg)?;
    let result = run_training(cfg, &mut net, data)?;
    Ok((net, result))
}
