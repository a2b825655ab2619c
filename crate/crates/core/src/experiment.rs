//! Weight-mode grids over bag sizes and seeds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bagging::generate_bags;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{EpochMetrics, SummaryRow};
use crate::trainer::{train, EpochHook, ExecMode, TrainOptions, TrainOutcome};
use crate::types::Dataset;

/// Training variants compared in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Both confidence factors.
    Dew,
    /// Bag-level factor only.
    BagOnly,
    /// Instance-level factor only.
    InstanceOnly,
    /// Every pseudo-label weighted 1.
    Unweighted,
    /// Proportion loss alone (`λ = 0`).
    Dllp,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Dew, Mode::BagOnly, Mode::InstanceOnly, Mode::Unweighted, Mode::Dllp];
    /// The four weight settings of the ablation table.
    pub const WEIGHT_ABLATION: [Mode; 4] = [Mode::Unweighted, Mode::BagOnly, Mode::InstanceOnly, Mode::Dew];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dew => "dew",
            Mode::BagOnly => "bag-only",
            Mode::InstanceOnly => "instance-only",
            Mode::Unweighted => "unweighted",
            Mode::Dllp => "dllp",
        }
    }

    /// Sets the switches (or `λ`) this mode implies.
    pub fn apply(self, config: &mut TrainConfig) {
        let (bag, inst) = match self {
            Mode::Dew | Mode::Dllp => (true, true),
            Mode::BagOnly => (true, false),
            Mode::InstanceOnly => (false, true),
            Mode::Unweighted => (false, false),
        };
        config.ablation_use_bag_weight = bag;
        config.ablation_use_instance_weight = inst;
        if self == Mode::Dllp {
            config.lambda = 0.0;
        }
    }

    /// The mode a config trains in; `λ = 0` reads as DLLP regardless of switches.
    pub fn of(config: &TrainConfig) -> Mode {
        if config.lambda == 0.0 {
            return Mode::Dllp;
        }
        match (config.ablation_use_bag_weight, config.ablation_use_instance_weight) {
            (true, true) => Mode::Dew,
            (true, false) => Mode::BagOnly,
            (false, true) => Mode::InstanceOnly,
            (false, false) => Mode::Unweighted,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown mode {s:?}; expected one of dew, bag-only, instance-only, unweighted, dllp"
                ))
            })
    }
}

/// One `(mode, bag size, seed)` cell of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub mode: Mode,
    pub bag_size: usize,
    pub seed: u64,
}

impl Cell {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.bag_size = self.bag_size;
        cfg.seed = self.seed;
        self.mode.apply(&mut cfg);
        cfg
    }

    pub fn label(&self) -> String {
        format!("{}_m{}_s{}", self.mode, self.bag_size, self.seed)
    }
}

/// A list of cells sharing one base configuration.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub base: TrainConfig,
    pub cells: Vec<Cell>,
}

impl ExperimentPlan {
    pub fn grid(base: TrainConfig, modes: &[Mode], bag_sizes: &[usize], seeds: &[u64]) -> Self {
        let mut cells = Vec::with_capacity(modes.len() * bag_sizes.len() * seeds.len());
        for &mode in modes {
            for &bag_size in bag_sizes {
                for &seed in seeds {
                    cells.push(Cell { mode, bag_size, seed });
                }
            }
        }
        Self { base, cells }
    }
}

pub fn summary_row(cell: &Cell, last: &EpochMetrics) -> SummaryRow {
    SummaryRow {
        mode: cell.mode.to_string(),
        bag_size: cell.bag_size,
        seed: cell.seed,
        test_accuracy: last.test_accuracy.unwrap_or(f64::NAN),
        pseudo_label_accuracy: last.pseudo_label_accuracy,
        mean_normalized_entropy: last.mean_normalized_entropy,
        mean_weight: last.mean_weight,
    }
}

/// Trains one cell on bags generated from the cell seed.
pub fn run_cell<'a>(
    train_set: &Dataset,
    test_set: Option<&'a Dataset>,
    base: &TrainConfig,
    cell: &Cell,
    exec: ExecMode,
    on_epoch: Option<EpochHook<'a>>,
) -> Result<(SummaryRow, TrainOutcome)> {
    let cfg = cell.config(base);
    let bags = generate_bags(train_set, cfg.bag_size, cfg.seed)?;
    let outcome = train(
        train_set,
        &bags,
        &cfg,
        TrainOptions {
            exec,
            test: test_set,
            on_epoch,
        },
    )?;
    let last = outcome
        .series
        .last()
        .ok_or_else(|| Error::InvalidArgument("run produced no epochs".into()))?;
    Ok((summary_row(cell, last), outcome))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-aggregated row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: String,
    pub bag_size: usize,
    pub runs: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub pseudo_label_accuracy_mean: f64,
    pub mean_normalized_entropy_mean: f64,
    pub mean_weight_mean: f64,
}

/// Groups rows by `(mode, bag_size)` in first-appearance order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let k = (r.mode.clone(), r.bag_size);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(mode, bag_size)| {
            let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.mode == mode && r.bag_size == bag_size).collect();
            let col = |f: fn(&SummaryRow) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (acc_mean, acc_std) = mean_std(&col(|r| r.test_accuracy));
            AggregateRow {
                mode,
                bag_size,
                runs: group.len(),
                test_accuracy_mean: acc_mean,
                test_accuracy_std: acc_std,
                pseudo_label_accuracy_mean: mean_std(&col(|r| r.pseudo_label_accuracy)).0,
                mean_normalized_entropy_mean: mean_std(&col(|r| r.mean_normalized_entropy)).0,
                mean_weight_mean: mean_std(&col(|r| r.mean_weight)).0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_map_to_switches() {
        let base = TrainConfig::default();
        let mut c = base.clone();
        Mode::Dllp.apply(&mut c);
        assert_eq!(c.lambda, 0.0);
        let mut c = base.clone();
        Mode::BagOnly.apply(&mut c);
        assert!(c.ablation_use_bag_weight && !c.ablation_use_instance_weight);
        let mut c = base.clone();
        Mode::InstanceOnly.apply(&mut c);
        assert!(!c.ablation_use_bag_weight && c.ablation_use_instance_weight);
        let mut c = base;
        Mode::Unweighted.apply(&mut c);
        assert!(!c.ablation_use_bag_weight && !c.ablation_use_instance_weight);
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("fixmatch".parse::<Mode>().is_err());
    }

    #[test]
    fn mode_of_inverts_apply() {
        for mode in Mode::ALL {
            let mut cfg = TrainConfig::default();
            mode.apply(&mut cfg);
            assert_eq!(Mode::of(&cfg), mode);
        }
    }

    #[test]
    fn grid_size() {
        let plan = ExperimentPlan::grid(TrainConfig::default(), &Mode::WEIGHT_ABLATION, &[16, 32], &[0, 1, 2, 3, 4]);
        assert_eq!(plan.cells.len(), 40);
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
