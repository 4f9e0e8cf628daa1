//! Threshold sweeps and cross-run energy comparison.

use crate::cost::energy_to_accuracy;
use crate::data::DataSplit;
use crate::error::Result;
use crate::policy::PolicyConfig;
use crate::trainer::{run_one, ArchSpec, RunResult, TrainConfig, TrainRecord};

/// Summary of one sweep run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub t_min: f64,
    pub final_acc: f64,
    pub energy_norm: f64,
    pub mem_norm: f64,
    pub diverged: bool,
}

/// One full training run per `t_min` value, identical otherwise
/// (same seed, data and architecture). A diverged run is recorded with
/// its partial totals and the sweep continues.
pub fn sweep_tmin(
    base: &TrainConfig,
    arch: &ArchSpec,
    data: &DataSplit,
    t_mins: &[f64],
) -> Result<Vec<(SweepRow, RunResult)>> {
    let mut out = Vec::with_capacity(t_mins.len());
    for &t_min in t_mins {
        let cfg = TrainConfig {
            policy: PolicyConfig::with_bounds(
                t_min,
                base.policy.t_max().max(t_min),
                base.policy.k_min(),
                base.policy.k_max(),
            )?,
            ..base.clone()
        };
        let (_, result) = run_one(&cfg, arch, data)?;
        let last = result.records.last();
        out.push((
            SweepRow {
                t_min,
                final_acc: last.map_or(0.0, |r| r.test_accuracy),
                energy_norm: last.map_or(0.0, |r| r.energy_norm),
                mem_norm: last.map_or(0.0, |r| r.mem_norm),
                diverged: result.diverged.is_some(),
            },
            result,
        ));
    }
    Ok(out)
}

pub const SWEEP_CSV_HEADER: &str = "tmin,final_acc,energy_norm,mem_norm,status";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t_min,
            r.final_acc,
            r.energy_norm,
            r.mem_norm,
            if r.diverged { "diverged" } else { "ok" }
        ));
    }
    out
}

/// Count adjacent-pair decreases of each tracked quantity as `t_min`
/// rises. A higher threshold demands more headroom, so accuracy, energy
/// and memory should all be non-decreasing; stochastic runs are allowed
/// a stray inversion, which the caller can tolerate.
pub fn sweep_inversions(rows: &[SweepRow]) -> usize {
    let mut count = 0;
    for pair in rows.windows(2) {
        if pair[1].final_acc < pair[0].final_acc {
            count += 1;
        }
        if pair[1].energy_norm < pair[0].energy_norm {
            count += 1;
        }
        if pair[1].mem_norm < pair[0].mem_norm {
            count += 1;
        }
    }
    count
}

/// One cell of the energy-to-target table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub target: f64,
    pub run: String,
    /// Cumulative normalized energy at the first epoch reaching the
    /// target, or `None` when the run never got there.
    pub energy: Option<f64>,
}

/// For each target accuracy, the energy each run spent to first reach
/// it.
pub fn compare(histories: &[(String, Vec<TrainRecord>)], targets: &[f64]) -> Vec<CompareRow> {
    let mut rows = Vec::new();
    for &target in targets {
        for (name, records) in histories {
            let history: Vec<(f64, f64)> = records
                .iter()
                .map(|r| (r.test_accuracy, r.energy_norm))
                .collect();
            rows.push(CompareRow {
                target,
                run: name.clone(),
                energy: energy_to_accuracy(&history, target),
            });
        }
    }
    rows
}

/// Five evenly spaced targets between the worst and best final accuracy.
pub fn default_targets(histories: &[(String, Vec<TrainRecord>)]) -> Vec<f64> {
    let finals: Vec<f64> = histories
        .iter()
        .filter_map(|(_, r)| r.last().map(|x| x.test_accuracy))
        .collect();
    if finals.is_empty() {
        return Vec::new();
    }
    let lo = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![lo];
    }
    (0..5).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

pub const COMPARE_CSV_HEADER: &str = "target_acc,run,energy_norm";

pub fn compare_to_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let cell = r
            .energy
            .map(|e| e.to_string())
            .unwrap_or_else(|| "unreached".into());
        out.push_str(&format!("{},{},{}\n", r.target, r.run, cell));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, acc: f64, energy: f64) -> TrainRecord {
        TrainRecord {
            epoch,
            bitwidths: vec![6],
            gavg_emas: vec![None],
            train_loss: 1.0,
            test_accuracy: acc,
            energy_norm: energy,
            mem_norm: 0.2,
            lr: 0.1,
        }
    }

    #[test]
    fn compare_finds_first_crossing_per_run() {
        let histories = vec![
            ("fast".to_string(), vec![record(0, 0.6, 1.0), record(1, 0.9, 2.0)]),
            ("slow".to_string(), vec![record(0, 0.3, 1.0), record(1, 0.7, 2.0)]),
        ];
        let rows = compare(&histories, &[0.65]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].energy, Some(2.0));
        assert_eq!(rows[1].energy, Some(2.0));
        let rows = compare(&histories, &[0.95]);
        assert!(rows.iter().all(|r| r.energy.is_none()));
    }

    #[test]
    fn compare_single_epoch_degenerates_to_first_values() {
        let histories = vec![("one".to_string(), vec![record(0, 0.5, 1.0)])];
        let rows = compare(&histories, &[0.4]);
        assert_eq!(rows[0].energy, Some(1.0));
    }

    #[test]
    fn unreached_marker_in_csv() {
        let rows = vec![CompareRow {
            target: 0.9,
            run: "a".into(),
            energy: None,
        }];
        let text = compare_to_csv(&rows);
        assert!(text.contains("0.9,a,unreached"));
    }

    #[test]
    fn inversion_counting() {
        let mk = |t, a, e, m| SweepRow {
            t_min: t,
            final_acc: a,
            energy_norm: e,
            mem_norm: m,
            diverged: false,
        };
        let rows = vec![
            mk(0.1, 0.5, 0.2, 0.2),
            mk(1.0, 0.7, 0.3, 0.3),
            mk(10.0, 0.9, 0.4, 0.4),
        ];
        assert_eq!(sweep_inversions(&rows), 0);
        let rows = vec![mk(0.1, 0.5, 0.2, 0.2), mk(1.0, 0.4, 0.3, 0.1)];
        assert_eq!(sweep_inversions(&rows), 2);
    }

    #[test]
    fn default_targets_span_finals() {
        let histories = vec![
            ("a".to_string(), vec![record(0, 0.5, 1.0)]),
            ("b".to_string(), vec![record(0, 0.9, 1.0)]),
        ];
        let t = default_targets(&histories);
        assert_eq!(t.len(), 5);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[4], 0.9);
    }
}
