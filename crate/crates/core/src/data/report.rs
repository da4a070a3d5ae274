//! CSV reports with fixed headers and fixed float formatting.

use std::io::Write;

use crate::compressor::SweepRow;
use crate::error::{NiceError, Result};
use crate::trainer::EpochRecord;

pub const SWEEP_HEADER: &str = "b,mean_bytes,accuracy,n_images,mask_bytes";
pub const TRAIN_HEADER: &str =
    "epoch,data_loss,capacity_loss,smoothness_loss,total_loss,masked_accuracy,gate_density";

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.3},{:.6},{},{:.3}",
            r.b, r.mean_bytes, r.accuracy, r.n_images, r.mask_bytes
        )?;
    }
    Ok(())
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(NiceError::InvalidArgument("sweep CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || NiceError::InvalidArgument(format!("bad sweep row `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(SweepRow {
                b: f[0].parse().map_err(|_| bad())?,
                mean_bytes: f[1].parse().map_err(|_| bad())?,
                accuracy: f[2].parse().map_err(|_| bad())?,
                n_images: f[3].parse().map_err(|_| bad())?,
                mask_bytes: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_train_csv(rows: &[EpochRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRAIN_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.data_loss, r.capacity_loss, r.smoothness_loss, r.total_loss, r.masked_accuracy, r.gate_density
        )?;
    }
    Ok(())
}
