//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; values
//! are validated before any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dew::WeightSwitches;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::synth::BlobSpec;

/// Raw key/value pairs, remembering where each came from.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, String)>,
}

impl KeyValues {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected key = value", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("{source}:{}: empty key", i + 1)));
            }
            if kv.entries.contains_key(&key) {
                return Err(Error::Config(format!("{source}:{}: duplicate key `{key}`", i + 1)));
            }
            kv.entries.insert(key, (v.trim().to_string(), format!("{source}:{}", i + 1)));
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    /// Applies a `key=value` override, replacing any existing entry.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.entries
            .insert(k.trim().to_string(), (v.trim().to_string(), "--set".to_string()));
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.entries
            .insert(key.to_string(), (value.to_string(), "<default>".to_string()));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn take_raw(&mut self, key: &str) -> Option<(String, String)> {
        self.entries.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((v, at)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{at}: `{key}` has invalid value {v:?}"))),
        }
    }

    fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((v, _)) if v.is_empty() => Ok(Some(Vec::new())),
            Some((v, at)) => v
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("{at}: `{key}` must be a comma-separated list of integers"))),
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, at))) => Err(Error::Config(format!("{at}: unknown key `{k}`"))),
        }
    }
}

/// Every training hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta_b: f64,
    pub beta_i: f64,
    pub bag_size: usize,
    /// Bags per optimisation step; derived from `batch_instances` when unset.
    pub bags_per_step: Option<usize>,
    /// Target instances per step used to derive `bags_per_step`.
    pub batch_instances: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Overrides the schedule horizon `K`; training stops once `K` steps are taken.
    pub total_steps: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub ablation_use_bag_weight: bool,
    pub ablation_use_instance_weight: bool,
    /// Weak-view noise, as a multiple of each feature's training-set std.
    pub weak_noise_sigma: f64,
    /// Strong-view noise, as a multiple of each feature's training-set std.
    pub strong_noise_sigma: f64,
    pub strong_dropout_rate: f64,
    pub hidden_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta_b: 1.0,
            beta_i: 1.0,
            bag_size: 16,
            bags_per_step: None,
            batch_instances: 1024,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            total_steps: None,
            epochs: 200,
            seed: 0,
            ablation_use_bag_weight: true,
            ablation_use_instance_weight: true,
            weak_noise_sigma: 0.05,
            strong_noise_sigma: 0.5,
            strong_dropout_rate: 0.5,
            hidden_sizes: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 18] = [
        "lambda",
        "beta_b",
        "beta_i",
        "bag_size",
        "bags_per_step",
        "batch_instances",
        "lr0",
        "momentum",
        "weight_decay",
        "total_steps",
        "epochs",
        "seed",
        "ablation_use_bag_weight",
        "ablation_use_instance_weight",
        "weak_noise_sigma",
        "strong_noise_sigma",
        "strong_dropout_rate",
        "hidden_sizes",
    ];

    /// Consumes the training keys from `kv`, starting from the defaults.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            lambda: kv.take_or("lambda", d.lambda)?,
            beta_b: kv.take_or("beta_b", d.beta_b)?,
            beta_i: kv.take_or("beta_i", d.beta_i)?,
            bag_size: kv.take_or("bag_size", d.bag_size)?,
            bags_per_step: kv.take("bags_per_step")?.or(d.bags_per_step),
            batch_instances: kv.take_or("batch_instances", d.batch_instances)?,
            lr0: kv.take_or("lr0", d.lr0)?,
            momentum: kv.take_or("momentum", d.momentum)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            total_steps: kv.take("total_steps")?.or(d.total_steps),
            epochs: kv.take_or("epochs", d.epochs)?,
            seed: kv.take_or("seed", d.seed)?,
            ablation_use_bag_weight: kv.take_or("ablation_use_bag_weight", d.ablation_use_bag_weight)?,
            ablation_use_instance_weight: kv
                .take_or("ablation_use_instance_weight", d.ablation_use_instance_weight)?,
            weak_noise_sigma: kv.take_or("weak_noise_sigma", d.weak_noise_sigma)?,
            strong_noise_sigma: kv.take_or("strong_noise_sigma", d.strong_noise_sigma)?,
            strong_dropout_rate: kv.take_or("strong_dropout_rate", d.strong_dropout_rate)?,
            hidden_sizes: kv.take_list("hidden_sizes")?.unwrap_or(d.hidden_sizes),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("`{field}` {why}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be >= 0, got {}", self.lambda));
        }
        if !(self.beta_b > 0.0 && self.beta_b.is_finite()) {
            return bad("beta_b", format!("must be > 0, got {}", self.beta_b));
        }
        if !(self.beta_i > 0.0 && self.beta_i.is_finite()) {
            return bad("beta_i", format!("must be > 0, got {}", self.beta_i));
        }
        if self.bag_size == 0 {
            return bad("bag_size", "must be >= 1".into());
        }
        if self.bags_per_step == Some(0) {
            return bad("bags_per_step", "must be >= 1".into());
        }
        if self.batch_instances == 0 {
            return bad("batch_instances", "must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if !(self.weak_noise_sigma >= 0.0) {
            return bad("weak_noise_sigma", format!("must be >= 0, got {}", self.weak_noise_sigma));
        }
        if !(self.strong_noise_sigma >= 0.0) {
            return bad("strong_noise_sigma", format!("must be >= 0, got {}", self.strong_noise_sigma));
        }
        if !(0.0..1.0).contains(&self.strong_dropout_rate) {
            return bad("strong_dropout_rate", format!("must be in [0, 1), got {}", self.strong_dropout_rate));
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes", "entries must be positive".into());
        }
        Ok(())
    }

    pub fn effective_bags_per_step(&self) -> usize {
        self.bags_per_step
            .unwrap_or_else(|| (self.batch_instances / self.bag_size).max(1))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            beta_b: self.beta_b,
            beta_i: self.beta_i,
            switches: WeightSwitches {
                use_bag_weight: self.ablation_use_bag_weight,
                use_instance_weight: self.ablation_use_instance_weight,
            },
        }
    }

    /// Renders every field in the config file format.
    pub fn render(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("lambda", self.lambda.to_string());
        put("beta_b", self.beta_b.to_string());
        put("beta_i", self.beta_i.to_string());
        put("bag_size", self.bag_size.to_string());
        if let Some(b) = self.bags_per_step {
            put("bags_per_step", b.to_string());
        }
        put("batch_instances", self.batch_instances.to_string());
        put("lr0", self.lr0.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        if let Some(k) = self.total_steps {
            put("total_steps", k.to_string());
        }
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put("ablation_use_bag_weight", self.ablation_use_bag_weight.to_string());
        put("ablation_use_instance_weight", self.ablation_use_instance_weight.to_string());
        put("weak_noise_sigma", self.weak_noise_sigma.to_string());
        put("strong_noise_sigma", self.strong_noise_sigma.to_string());
        put("strong_dropout_rate", self.strong_dropout_rate.to_string());
        put("hidden_sizes", list(&self.hidden_sizes));
        s
    }
}

/// Where the training (and optional test) data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs(BlobSpec),
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        class_count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Pre-generated bag file; bags are generated from the seed when absent.
    pub bags: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs(BlobSpec::default()),
            bags: None,
        }
    }
}

impl DataConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let source: String = kv.take_or("data.source", "blobs".to_string())?;
        let d = BlobSpec::default();
        let blobs = BlobSpec {
            class_count: kv.take_or("blobs.class_count", d.class_count)?,
            feature_dim: kv.take_or("blobs.feature_dim", d.feature_dim)?,
            samples_per_class: kv.take_or("blobs.samples_per_class", d.samples_per_class)?,
            center_scale: kv.take_or("blobs.center_scale", d.center_scale)?,
            within_class_sigma: kv.take_or("blobs.within_class_sigma", d.within_class_sigma)?,
            seed: kv.take_or("blobs.seed", d.seed)?,
        };
        let train: Option<PathBuf> = kv.take("data.train_csv")?;
        let test: Option<PathBuf> = kv.take("data.test_csv")?;
        let class_count: Option<usize> = kv.take("data.class_count")?;
        let bags: Option<PathBuf> = kv.take("data.bags")?;
        let source = match source.as_str() {
            "blobs" => {
                blobs.validate().map_err(|e| Error::Config(e.to_string()))?;
                DataSource::Blobs(blobs)
            }
            "csv" => DataSource::Csv {
                train: train.ok_or_else(|| Error::Config("`data.train_csv` is required for csv data".into()))?,
                test,
                class_count: class_count
                    .ok_or_else(|| Error::Config("`data.class_count` is required for csv data".into()))?,
            },
            other => return Err(Error::Config(format!("`data.source` must be blobs or csv, got {other:?}"))),
        };
        Ok(Self { source, bags })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        match &self.source {
            DataSource::Blobs(b) => {
                put("data.source", "blobs".into());
                put("blobs.class_count", b.class_count.to_string());
                put("blobs.feature_dim", b.feature_dim.to_string());
                put("blobs.samples_per_class", b.samples_per_class.to_string());
                put("blobs.center_scale", b.center_scale.to_string());
                put("blobs.within_class_sigma", b.within_class_sigma.to_string());
                put("blobs.seed", b.seed.to_string());
            }
            DataSource::Csv {
                train,
                test,
                class_count,
            } => {
                put("data.source", "csv".into());
                put("data.train_csv", train.display().to_string());
                if let Some(t) = test {
                    put("data.test_csv", t.display().to_string());
                }
                put("data.class_count", class_count.to_string());
            }
        }
        if let Some(b) = &self.bags {
            put("data.bags", b.display().to_string());
        }
        s
    }
}

/// A whole config file: training hyperparameters plus data selection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let train = TrainConfig::from_kv(&mut kv)?;
        let data = DataConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(Self { train, data })
    }

    /// Every resolved key, readable back by [`ExperimentConfig::from_kv`].
    pub fn render(&self) -> String {
        format!("{}{}", self.train.render(), self.data.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let cfg = TrainConfig::default();
        let mut kv = KeyValues::parse("mem", &cfg.render()).unwrap();
        assert_eq!(TrainConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
    }

    #[test]
    fn comments_overrides_and_lists() {
        let text = "# header\nlambda = 0.25  # inline\nhidden_sizes = 8,4\n\n";
        let mut kv = KeyValues::parse("mem", text).unwrap();
        kv.set_override("epochs=3").unwrap();
        let cfg = ExperimentConfig::from_kv(kv).unwrap();
        assert_eq!(cfg.train.lambda, 0.25);
        assert_eq!(cfg.train.hidden_sizes, vec![8, 4]);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn experiment_config_round_trips() {
        let text = "data.source = csv\ndata.train_csv = a.csv\ndata.class_count = 3\ndata.bags = b.tsv\nseed = 9\n";
        let cfg = ExperimentConfig::from_kv(KeyValues::parse("mem", text).unwrap()).unwrap();
        let again = ExperimentConfig::from_kv(KeyValues::parse("mem", &cfg.render()).unwrap()).unwrap();
        assert_eq!(again, cfg);
        let blobs = ExperimentConfig::default();
        let again = ExperimentConfig::from_kv(KeyValues::parse("mem", &blobs.render()).unwrap()).unwrap();
        assert_eq!(again, blobs);
    }

    #[test]
    fn unknown_key_rejected() {
        let kv = KeyValues::parse("mem", "lambda = 0.5\nlamda = 1\n").unwrap();
        let err = ExperimentConfig::from_kv(kv).unwrap_err();
        assert!(err.to_string().contains("unknown key `lamda`"), "{err}");
    }

    #[test]
    fn non_positive_beta_rejected() {
        let mut kv = KeyValues::parse("mem", "beta_b = 0\n").unwrap();
        let err = TrainConfig::from_kv(&mut kv).unwrap_err();
        assert!(err.to_string().contains("beta_b"));
        let mut kv = KeyValues::parse("mem", "beta_i = -1\n").unwrap();
        assert!(TrainConfig::from_kv(&mut kv).is_err());
    }

    #[test]
    fn bad_value_names_field_and_line() {
        let mut kv = KeyValues::parse("cfg.txt", "\nmomentum = fast\n").unwrap();
        let err = TrainConfig::from_kv(&mut kv).unwrap_err().to_string();
        assert!(err.contains("cfg.txt:2") && err.contains("momentum"), "{err}");
    }

    #[test]
    fn bags_per_step_derivation() {
        let mut cfg = TrainConfig {
            bag_size: 128,
            batch_instances: 1024,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_bags_per_step(), 8);
        cfg.bag_size = 2048;
        assert_eq!(cfg.effective_bags_per_step(), 1);
        cfg.bags_per_step = Some(3);
        assert_eq!(cfg.effective_bags_per_step(), 3);
    }

    #[test]
    fn csv_source_requires_paths() {
        let kv = KeyValues::parse("mem", "data.source = csv\n").unwrap();
        assert!(ExperimentConfig::from_kv(kv).is_err());
        let kv = KeyValues::parse("mem", "data.source = csv\ndata.train_csv = a.csv\ndata.class_count = 3\n").unwrap();
        let cfg = ExperimentConfig::from_kv(kv).unwrap();
        assert!(matches!(cfg.data.source, DataSource::Csv { class_count: 3, .. }));
    }
}
