//! CSV serialization of training histories.
//!
//! Schema, one file per run: the header line is fixed byte-for-byte.
//! Each epoch emits one row per parameterized layer carrying the
//! per-layer columns (`bitwidth`, `gavg_ema`), then one aggregate row
//! with `layer_id = -1` carrying the epoch columns (`train_loss`,
//! `test_acc`, `energy_norm`, `mem_norm`, `lr`). Cells that do not apply
//! to a row kind are left empty. Floats print in shortest round-trip
//! form, so identical runs serialize to identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TrainRecord;

/// The exact header line.
pub const CSV_HEADER: &str =
    "epoch,layer_id,bitwidth,gavg_ema,train_loss,test_acc,energy_norm,mem_norm,lr";

/// Render a run history to CSV text.
pub fn records_to_csv(records: &[TrainRecord]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        for (layer_id, (&k, ema)) in r.bitwidths.iter().zip(&r.gavg_emas).enumerate() {
            let ema_cell = ema.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},,,,,", r.epoch, layer_id, k, ema_cell);
        }
        let _ = writeln!(
            out,
            "{},-1,,,{},{},{},{},{}",
            r.epoch, r.train_loss, r.test_accuracy, r.energy_norm, r.mem_norm, r.lr
        );
    }
    out
}

pub fn write_csv(records: &[TrainRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), records_to_csv(records))?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| {
        Error::InvalidConfig(format!("line {line}: cannot parse {what} from {s:?}"))
    })
}

/// Parse a history back from CSV text (the inverse of
/// [`records_to_csv`]).
pub fn records_from_csv(text: &str) -> Result<Vec<TrainRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "bad CSV header: {:?}",
                other.map(|(_, h)| h)
            )))
        }
    }
    let mut records: Vec<TrainRecord> = Vec::new();
    let mut bitwidths = Vec::new();
    let mut emas = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let n = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(Error::InvalidConfig(format!(
                "line {n}: expected 9 cells, got {}",
                cells.len()
            )));
        }
        let epoch: usize = parse_field(cells[0], "epoch", n)?;
        let layer_id: i64 = parse_field(cells[1], "layer_id", n)?;
        if layer_id >= 0 {
            if layer_id as usize != bitwidths.len() {
                return Err(Error::InvalidConfig(format!(
                    "line {n}: layer rows out of order"
                )));
            }
            bitwidths.push(parse_field(cells[2], "bitwidth", n)?);
            emas.push(if cells[3].is_empty() {
                None
            } else {
                Some(parse_field(cells[3], "gavg_ema", n)?)
            });
        } else {
            records.push(TrainRecord {
                epoch,
                bitwidths: std::mem::take(&mut bitwidths),
                gavg_emas: std::mem::take(&mut emas),
                train_loss: parse_field(cells[4], "train_loss", n)?,
                test_accuracy: parse_field(cells[5], "test_acc", n)?,
                energy_norm: parse_field(cells[6], "energy_norm", n)?,
                mem_norm: parse_field(cells[7], "mem_norm", n)?,
                lr: parse_field(cells[8], "lr", n)?,
            });
        }
    }
    if !bitwidths.is_empty() {
        return Err(Error::InvalidConfig(
            "layer rows without a closing aggregate row".into(),
        ));
    }
    Ok(records)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<TrainRecord>> {
    records_from_csv(&fs::read_to_string(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<TrainRecord> {
        vec![
            TrainRecord {
                epoch: 0,
                bitwidths: vec![6, 7],
                gavg_emas: vec![Some(0.53), None],
                train_loss: 1.25,
                test_accuracy: 0.5,
                energy_norm: 0.1875,
                mem_norm: 0.1875,
                lr: 0.1,
            },
            TrainRecord {
                epoch: 1,
                bitwidths: vec![7, 7],
                gavg_emas: vec![Some(1.0), Some(2.5)],
                train_loss: 0.75,
                test_accuracy: 0.625,
                energy_norm: 0.203125,
                mem_norm: 0.21875,
                lr: 0.1,
            },
        ]
    }

    #[test]
    fn header_is_byte_exact() {
        let text = records_to_csv(&[]);
        assert_eq!(
            text,
            "epoch,layer_id,bitwidth,gavg_ema,train_loss,test_acc,energy_norm,mem_norm,lr\n"
        );
    }

    #[test]
    fn layout_one_layer_row_each_plus_aggregate() {
        let text = records_to_csv(&sample_records());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[1], "0,0,6,0.53,,,,,");
        assert_eq!(lines[2], "0,1,7,,,,,,");
        assert_eq!(lines[3], "0,-1,,,1.25,0.5,0.1875,0.1875,0.1");
    }

    #[test]
    fn round_trip_preserves_records() {
        let records = sample_records();
        let parsed = records_from_csv(&records_to_csv(&records)).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(records_from_csv("epoch,nope\n").is_err());
    }

    #[test]
    fn truncated_body_rejected() {
        let text = records_to_csv(&sample_records());
        let cut = &text[..text.rfind("\n1,-1").unwrap() + 1];
        assert!(records_from_csv(cut).is_err());
    }
}
