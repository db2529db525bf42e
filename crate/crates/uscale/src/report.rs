//! CSV and JSON outputs. Floats use Rust's shortest round-trip formatting,
//! so identical runs give identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use uscale_core::model::RmsRow;
use uscale_core::numerics::QuantReport;
use uscale_core::sweep::{LrTransferReport, RunRecord};
use uscale_core::train::{MetricRow, Observer};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 5] = ["step", "split", "loss", "lr", "grad_norm"];
pub const RMS_HEADER: [&str; 5] = ["step", "tensor", "role", "rms", "abs_max"];
pub const SWEEP_HEADER: [&str; 6] = ["strategy", "phase", "hp_json", "seed", "final_loss", "diverged"];
pub const QUANT_HEADER: [&str; 6] = ["format", "input_count", "underflow_frac", "overflow_frac", "rms_before", "rms_after"];
pub const LR_TRANSFER_HEADER: [&str; 8] = ["width", "lr", "mean", "sem", "ci_lo", "ci_hi", "diverged", "losses"];

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn csv_writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    w.write_record(header)?;
    Ok(w)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn f(x: f64) -> String {
    format!("{x}")
}

pub fn metric_record(r: &MetricRow) -> [String; 5] {
    [
        r.step.to_string(),
        r.split.name().to_string(),
        f(r.loss),
        f(r.lr),
        r.grad_norm.map(f).unwrap_or_default(),
    ]
}

pub fn rms_record(r: &RmsRow) -> [String; 5] {
    [r.step.to_string(), r.tensor.clone(), r.role.name().to_string(), f(r.rms), f(r.abs_max)]
}

/// Streams training metrics and RMS rows to CSV as they arrive. The first
/// write error is kept and returned by [`CsvObserver::finish`].
pub struct CsvObserver<W: Write> {
    metrics: csv::Writer<W>,
    rms: csv::Writer<W>,
    err: Option<csv::Error>,
}

impl<W: Write> CsvObserver<W> {
    pub fn new(metrics: W, rms: W) -> Result<Self> {
        Ok(Self {
            metrics: csv_writer(metrics, &METRICS_HEADER)?,
            rms: csv_writer(rms, &RMS_HEADER)?,
            err: None,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.err.take() {
            return Err(e.into());
        }
        self.metrics.flush().map_err(csv::Error::from)?;
        self.rms.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

impl<W: Write> Observer for CsvObserver<W> {
    fn metric(&mut self, row: &MetricRow) {
        if self.err.is_none() {
            self.err = self.metrics.write_record(metric_record(row)).err();
        }
    }

    fn rms(&mut self, rows: &[RmsRow]) {
        for r in rows {
            if self.err.is_none() {
                self.err = self.rms.write_record(rms_record(r)).err();
            }
        }
    }
}

pub fn write_rms<W: Write>(w: W, rows: &[RmsRow]) -> Result<()> {
    let mut w = csv_writer(w, &RMS_HEADER)?;
    for r in rows {
        w.write_record(rms_record(r))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_sweep<W: Write>(w: W, strategy: &str, seed: u64, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv_writer(w, &SWEEP_HEADER)?;
    for r in runs {
        w.write_record([
            strategy.to_string(),
            r.phase.to_string(),
            serde_json::to_string(&r.hps)?,
            seed.to_string(),
            f(r.loss),
            r.diverged.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_quant<W: Write>(w: W, rows: &[QuantReport]) -> Result<()> {
    let mut w = csv_writer(w, &QUANT_HEADER)?;
    for r in rows {
        w.write_record([
            r.format.name().to_string(),
            r.input_count.to_string(),
            f(r.underflow_frac),
            f(r.overflow_frac),
            f(r.rms_before),
            f(r.rms_after),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A loss grid with the fixed HP down the rows and the transfer HP across.
/// The corner cell names both, as `fixed\transfer`.
pub fn write_matrix<W: Write>(w: W, fixed: (&str, &[f64]), transfer: (&str, &[f64]), grid: &[Vec<f64>]) -> Result<()> {
    let mut header = vec![format!("{}\\{}", fixed.0, transfer.0)];
    header.extend(transfer.1.iter().map(|v| f(*v)));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    w.write_record(&header)?;
    for (v, row) in fixed.1.iter().zip(grid) {
        let mut rec = vec![f(*v)];
        rec.extend(row.iter().map(|x| f(*x)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix`] (or any numeric CSV with one
/// header row and one label column).
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let mut grid = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Invalid(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        grid.push(row);
    }
    Ok(grid)
}

pub fn write_lr_transfer<W: Write>(w: W, report: &LrTransferReport) -> Result<()> {
    let mut w = csv_writer(w, &LR_TRANSFER_HEADER)?;
    for c in &report.cells {
        w.write_record([
            c.width.to_string(),
            f(c.lr),
            f(c.mean),
            f(c.sem),
            f(c.mean - 2.0 * c.sem),
            f(c.mean + 2.0 * c.sem),
            c.diverged.to_string(),
            c.losses.iter().map(|l| f(*l)).collect::<Vec<_>>().join(";"),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
