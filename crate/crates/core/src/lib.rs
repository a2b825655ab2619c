//! Learning from label proportions with an auxiliary, confidence-weighted
//! instance-level self-training loss.
//!
//! Training data arrive as disjoint bags labelled only with per-class
//! counts. The objective combines the cross-entropy between each bag's
//! proportions and its mean prediction with a pseudo-label loss on strongly
//! augmented views, where every pseudo-label is weighted by how closely the
//! bag-level and instance-level prediction entropies match their ideal
//! reference values.

pub mod augment;
pub mod bagging;
pub mod config;
pub mod dew;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod synth;
pub mod trainer;
pub mod types;

pub use config::{DataConfig, DataSource, ExperimentConfig, KeyValues, TrainConfig};
pub use error::{Error, Result};
pub use experiment::{Cell, ExperimentPlan, Mode};
pub use matrix::Matrix;
pub use model::ModelParams;
pub use trainer::{train, ExecMode, TrainOptions, TrainOutcome};
pub use types::{Bag, BagCollection, Dataset, DewWeights, Prediction, PseudoLabel, Split};
