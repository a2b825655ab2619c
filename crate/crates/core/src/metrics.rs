//! Training diagnostics and result files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dew::entropy;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelParams;
use crate::types::{argmax, Dataset};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub bag_loss: f64,
    pub instance_loss: f64,
    pub total_loss: f64,
    pub pseudo_label_accuracy: f64,
    pub mean_normalized_entropy: f64,
    pub mean_weight: f64,
    pub mean_bag_weight: f64,
    pub mean_instance_weight: f64,
    pub test_accuracy: Option<f64>,
}

/// Fraction of rows whose argmax equals the true label.
pub fn pseudo_label_accuracy(weak_predictions: &Matrix, true_labels: &[usize]) -> Result<f64> {
    if weak_predictions.rows() != true_labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            weak_predictions.rows(),
            true_labels.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let hits = weak_predictions
        .iter_rows()
        .zip(true_labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    Ok(hits as f64 / true_labels.len() as f64)
}

/// Mean of `H(ŷ)/ln C` over rows.
pub fn mean_normalized_entropy(weak_predictions: &Matrix, class_count: usize) -> Result<f64> {
    if class_count < 2 {
        return Err(Error::InvalidArgument("normalized entropy needs at least 2 classes".into()));
    }
    if weak_predictions.rows() == 0 {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let norm = (class_count as f64).ln();
    let mut sum = 0.0;
    for row in weak_predictions.iter_rows() {
        sum += entropy(row)? / norm;
    }
    Ok(sum / weak_predictions.rows() as f64)
}

/// Accuracy on un-augmented inputs.
pub fn test_accuracy(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let probs = params.predict(test.features())?;
    pseudo_label_accuracy(&probs, test.labels())
}

/// Writes penultimate activations, one row per instance, with the true label last.
pub fn export_features(params: &ModelParams, dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let feats = params.penultimate(dataset.features())?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (row, label) in feats.iter_rows().zip(dataset.labels()) {
        let mut line = row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",");
        line.push(',');
        line.push_str(&label.to_string());
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one JSON object per epoch.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

/// One row of `summary.csv`: final-epoch values of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub bag_size: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub pseudo_label_accuracy: f64,
    pub mean_normalized_entropy: f64,
    pub mean_weight: f64,
}

pub const SUMMARY_HEADER: &str =
    "mode,bag_size,seed,test_accuracy,pseudo_label_accuracy,mean_normalized_entropy,mean_weight";

pub fn write_csv_rows<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv`; the header is present even with no rows.
pub fn write_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{SUMMARY_HEADER}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(path, i + 2, e.to_string())))
        .collect()
}
