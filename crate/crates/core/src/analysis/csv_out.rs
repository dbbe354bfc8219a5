use std::path::Path;

use super::redundancy::{HistogramBin, SweepPoint};
use crate::error::{DgeError, Result};

fn write_rows<S: serde::Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let err = |e: csv::Error| DgeError::Usage(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| DgeError::io(path, e))
}

/// Columns `bin_low,bin_high,count`.
pub fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    write_rows(path, bins)
}

/// Columns `threshold,replaced_frac,complexity_ratio,accuracy`.
pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    write_rows(path, points)
}
