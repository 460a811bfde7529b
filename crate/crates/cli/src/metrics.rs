use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use mpogpt_core::model::LayerReport;
use mpogpt_core::train::{MetricsRecord, Observer};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

impl From<&MetricsRecord> for MetricsRow {
    fn from(r: &MetricsRecord) -> Self {
        Self { step: r.step, train_loss: r.train_loss, val_loss: r.val_loss, val_acc: r.val_accuracy, lr: r.learning_rate }
    }
}

/// Streams training records to a CSV file, one flushed row per record.
/// Wall-clock time is shown on stderr only, so the file is reproducible.
pub struct CsvObserver {
    writer: csv::Writer<BufWriter<File>>,
    start: Instant,
    error: Option<csv::Error>,
    label: String,
    quiet: bool,
}

impl CsvObserver {
    pub fn create(path: &Path, label: impl Into<String>) -> Result<Self> {
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        writer.write_record(METRICS_HEADER)?;
        writer.flush().map_err(CliError::io(path))?;
        Ok(Self { writer, start: Instant::now(), error: None, label: label.into(), quiet: false })
    }

    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.writer.flush().map_err(|e| CliError::Csv(e.into()))?;
        Ok(())
    }
}

impl Observer for CsvObserver {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn record(&mut self, r: &MetricsRecord) {
        if !self.quiet {
            eprintln!(
                "[{}] step {:>5}  train {:.4}  val {:.4}  acc {:.2}%  lr {:.2e}  {:.1}s",
                self.label,
                r.step,
                r.train_loss,
                r.val_loss,
                100.0 * r.val_accuracy,
                r.learning_rate,
                r.wall_clock
            );
        }
        if self.error.is_some() {
            return;
        }
        let res = self.writer.serialize(MetricsRow::from(r)).and_then(|_| self.writer.flush().map_err(Into::into));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub chi: usize,
    pub rel_err: f64,
    pub params_dense: usize,
    pub params_mpo: usize,
}

impl From<&LayerReport> for LayerRow {
    fn from(r: &LayerReport) -> Self {
        Self { layer: r.layer.clone(), chi: r.chi, rel_err: r.rel_err, params_dense: r.params_dense, params_mpo: r.params_mpo }
    }
}

pub const METRICS_HEADER: [&str; 5] = ["step", "train_loss", "val_loss", "val_acc", "lr"];
pub const LAYERS_HEADER: [&str; 5] = ["layer", "chi", "rel_err", "params_dense", "params_mpo"];

/// Writes `header` and `rows`; the header is present even with no rows.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    crate::write_atomic(path, &bytes)
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

