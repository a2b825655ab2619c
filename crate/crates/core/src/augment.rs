//! Weak and strong perturbations of feature vectors.
//!
//! Draw order for one call to [`AugmentPolicy::apply`] on a `D`-vector:
//! `D` standard-normal draws (skipped when `noise_sigma == 0`), then, for the
//! strong policy, `D` uniform `[0, 1)` draws (skipped when `dropout_rate == 0`);
//! coordinate `d` is zeroed when its uniform draw is below `dropout_rate`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    kind: AugmentKind,
    noise_sigma: f64,
    dropout_rate: f64,
    /// Optional per-coordinate multiplier on `noise_sigma`.
    feature_scale: Option<Vec<f64>>,
}

impl AugmentPolicy {
    pub fn weak(noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        Ok(Self {
            kind: AugmentKind::Weak,
            noise_sigma,
            dropout_rate: 0.0,
            feature_scale: None,
        })
    }

    pub fn strong(noise_sigma: f64, dropout_rate: f64) -> Result<Self> {
        let mut p = Self::weak(noise_sigma)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {dropout_rate}")));
        }
        p.kind = AugmentKind::Strong;
        p.dropout_rate = dropout_rate;
        Ok(p)
    }

    /// Scales the noise of coordinate `d` by `scale[d]` (typically the training-set std).
    pub fn with_feature_scale(mut self, scale: Vec<f64>) -> Self {
        self.feature_scale = Some(scale);
        self
    }

    pub fn kind(&self) -> AugmentKind {
        self.kind
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = x.to_vec();
        self.apply_in_place(&mut out, rng);
        out
    }

    fn apply_in_place<R: Rng + ?Sized>(&self, x: &mut [f64], rng: &mut R) {
        if self.noise_sigma > 0.0 {
            for (d, v) in x.iter_mut().enumerate() {
                let scale = self.feature_scale.as_ref().map_or(1.0, |s| s[d]);
                let z: f64 = rng.sample(StandardNormal);
                *v += self.noise_sigma * scale * z;
            }
        }
        if self.kind == AugmentKind::Strong && self.dropout_rate > 0.0 {
            for v in x.iter_mut() {
                if rng.random::<f64>() < self.dropout_rate {
                    *v = 0.0;
                }
            }
        }
    }

    /// Augments every row of `batch` in row order from one stream.
    pub fn apply_batch<R: Rng + ?Sized>(&self, batch: &Matrix, rng: &mut R) -> Matrix {
        let mut out = batch.clone();
        for r in 0..out.rows() {
            self.apply_in_place(out.row_mut(r), rng);
        }
        out
    }
}

/// Population standard deviation of each feature column; zero-variance
/// columns get 1 so that relative noise never vanishes.
pub fn feature_std(features: &Matrix) -> Vec<f64> {
    let n = features.rows().max(1) as f64;
    let means: Vec<f64> = features.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; features.cols()];
    for r in features.iter_rows() {
        for ((v, x), mu) in var.iter_mut().zip(r).zip(&means) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect()
}
