//! Seeded Gaussian-blob datasets and the plain CSV dataset format
//! (comma separated, no header, integer label in the last column).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::types::{Dataset, Split};

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub class_count: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub center_scale: f64,
    pub within_class_sigma: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            feature_dim: 10,
            samples_per_class: 500,
            center_scale: 3.0,
            within_class_sigma: 1.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.feature_dim < 1 || self.samples_per_class < 1 {
            return Err(Error::InvalidArgument(format!(
                "blob counts must be positive (C ≥ 2): {self:?}"
            )));
        }
        if !(self.center_scale > 0.0) || !(self.within_class_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("blob scales out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Draws class centres in `[−s, s]^D`, samples each class around its centre,
/// and splits every class 80/20 so both splits stay balanced.
pub fn generate_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let centers: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| (0..d).map(|_| rng.random_range(-spec.center_scale..=spec.center_scale)).collect())
        .collect();

    let n_train = (spec.samples_per_class as f64 * TRAIN_FRACTION).round() as usize;
    let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut test: Vec<(Vec<f64>, usize)> = Vec::new();
    for (label, center) in centers.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&c| {
                    let z: f64 = rng.sample(StandardNormal);
                    c + spec.within_class_sigma * z
                })
                .collect();
            if i < n_train {
                train.push((x, label));
            } else {
                test.push((x, label));
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let build = |rows: Vec<(Vec<f64>, usize)>, split| {
        let (x, y): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Dataset::new(Matrix::from_rows(&x)?, y, spec.class_count, split)
    };
    Ok((build(train, Split::Train)?, build(test, Split::Test)?))
}

/// Reads a headerless CSV whose last column is the integer label.
pub fn read_csv_dataset(path: impl AsRef<Path>, class_count: usize, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;

    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::parse(path, row, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::parse(path, row, "need at least one feature and a label"));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::parse(path, row, format!("ragged row: {} fields, expected {w}", record.len())))
            }
            _ => {}
        }
        let cells: Vec<&str> = record.iter().collect();
        let (&label, feats) = cells.split_last().expect("at least two cells");
        for cell in feats {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(path, row, format!("non-numeric cell {cell:?}")))?;
            features.push(v);
        }
        let label: usize = label
            .parse()
            .map_err(|_| Error::parse(path, row, format!("label {label:?} is not a class index")))?;
        if label >= class_count {
            return Err(Error::parse(path, row, format!("label {label} outside [0, {class_count})")));
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::parse(path, 0, "no data rows"))?;
    let features = Matrix::from_vec(labels.len(), width - 1, features)?;
    Dataset::new(features, labels, class_count, split)
}

/// Writes `dataset` in the CSV format read by [`read_csv_dataset`]; values round-trip exactly.
pub fn write_csv_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (row, &label) in dataset.features().iter_rows().zip(dataset.labels()) {
        let mut line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        line.push(',');
        line.push_str(&label.to_string());
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
