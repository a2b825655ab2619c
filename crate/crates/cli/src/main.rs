//! `llp-ahil`: train, ablate, sweep and self-check from the command line.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for invalid
//! configuration or arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use llp_ahil::bagging::{generate_bags, read_bags, write_bags};
use llp_ahil::experiment::{aggregate, run_cell, summary_row, Cell, ExperimentPlan, Mode};
use llp_ahil::metrics::{export_features, write_csv_rows, write_summary, EpochMetrics, MetricsWriter, SummaryRow};
use llp_ahil::oracle::{dew_equivalence, gradient_check, OracleReport, DEW_TOLERANCE, GRADIENT_TOLERANCE};
use llp_ahil::synth::{generate_blobs, read_csv_dataset, write_csv_dataset};
use llp_ahil::{
    train, BagCollection, DataConfig, DataSource, Dataset, Error, ExecMode, ExperimentConfig, KeyValues, ModelParams,
    Split, TrainConfig, TrainOptions,
};

const SEED_ENV: &str = "LLP_DEW_SEED";
const CONFIG_FILE: &str = "config.txt";
const METRICS_FILE: &str = "metrics.jsonl";
const SUMMARY_FILE: &str = "summary.csv";
const CHECKPOINT_FILE: &str = "checkpoint.txt";
const ABLATION_FILE: &str = "ablation.csv";
const SWEEP_FILE: &str = "sweep.csv";
const FAILURES_FILE: &str = "failures.csv";
const CELLS_DIR: &str = "cells";

#[derive(Parser)]
#[command(name = "llp-ahil", version, about = "Learning from label proportions with confidence-weighted pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, summary and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Weight mode; overrides the switches (and λ for dllp) in the config.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run a mode × bag size × seed grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Bag sizes (default: the configured bag_size).
        #[arg(long, value_delimiter = ',')]
        bag_sizes: Vec<usize>,
        /// Seeds (default: five consecutive seeds from the configured seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Modes (default: unweighted, bag-only, instance-only, dew).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
    },
    /// Train once per (beta_b, beta_i) pair on a fixed bag collection.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2", allow_negative_numbers = true)]
        beta_b: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2", allow_negative_numbers = true)]
        beta_i: Vec<f64>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Compare the weight engine and gradients against independent oracles.
    OracleCheck {
        /// Seed for case generation (falls back to LLP_DEW_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Random bags for the weight oracle.
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
        /// Random networks for the finite-difference check (capped at --cases).
        #[arg(long, default_value_t = 100)]
        gradient_cases: usize,
    },
    /// Write the configured dataset and its bags to files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Write penultimate-layer features of a trained model.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace results already present in the output directory.
    #[arg(long)]
    overwrite: bool,
    /// Single worker, sequential reductions: byte-identical reruns.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train { common, mode } => cmd_train(&common, mode),
        Command::Ablate {
            common,
            bag_sizes,
            seeds,
            modes,
        } => cmd_ablate(&common, bag_sizes, seeds, modes),
        Command::SweepBeta {
            common,
            beta_b,
            beta_i,
            mode,
        } => cmd_sweep_beta(&common, &beta_b, &beta_i, mode),
        Command::OracleCheck {
            seed,
            cases,
            gradient_cases,
        } => cmd_oracle_check(seed, cases, gradient_cases),
        Command::GenData { common } => cmd_gen_data(&common),
        Command::ExportFeatures {
            common,
            checkpoint,
            split,
        } => cmd_export_features(&common, &checkpoint, split),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
    }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut kv = match &common.config {
        Some(path) => KeyValues::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => KeyValues::default(),
    };
    for assignment in &common.set {
        kv.set_override(assignment)?;
    }
    if !kv.contains("seed") {
        if let Some(seed) = env_seed()? {
            kv.insert("seed", &seed.to_string());
        }
    }
    Ok(ExperimentConfig::from_kv(kv)?)
}

fn load_data(data: &DataConfig) -> CliResult<(Dataset, Option<Dataset>)> {
    match &data.source {
        DataSource::Blobs(spec) => {
            let (train, test) = generate_blobs(spec)?;
            Ok((train, Some(test)))
        }
        DataSource::Csv {
            train,
            test,
            class_count,
        } => {
            let train_set = read_csv_dataset(train, *class_count, Split::Train)?;
            let test_set = test
                .as_ref()
                .map(|t| read_csv_dataset(t, *class_count, Split::Test))
                .transpose()?;
            Ok((train_set, test_set))
        }
    }
}

fn load_bags(cfg: &ExperimentConfig, train_set: &Dataset) -> CliResult<BagCollection> {
    match &cfg.data.bags {
        None => Ok(generate_bags(train_set, cfg.train.bag_size, cfg.train.seed)?),
        Some(path) => {
            let bags = read_bags(path, train_set)?;
            if bags.bag_size() != Some(cfg.train.bag_size) {
                return Err(Failure::Usage(format!(
                    "`bag_size` is {} but {} holds bags of size {}",
                    cfg.train.bag_size,
                    path.display(),
                    bags.bag_size().map_or("?".to_string(), |m| m.to_string())
                )));
            }
            Ok(bags)
        }
    }
}

/// Creates `dir`, refusing to replace any of `outputs` unless `overwrite`.
fn prepare_out(dir: &Path, outputs: &[&str], overwrite: bool) -> CliResult {
    let existing: Vec<&str> = outputs.iter().copied().filter(|n| dir.join(n).exists()).collect();
    if !existing.is_empty() {
        if !overwrite {
            return Err(Failure::Runtime(format!(
                "{} already holds {}; pass --overwrite to replace",
                dir.display(),
                existing.join(", ")
            )));
        }
        for name in existing {
            let p = dir.join(name);
            let removed = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else {
                fs::remove_file(&p)
            };
            removed.map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn exec_mode(common: &Common) -> ExecMode {
    if common.deterministic {
        ExecMode::Deterministic
    } else {
        ExecMode::Parallel
    }
}

/// Runs `f` on one worker under `--deterministic`, on the global pool otherwise.
fn with_pool<T: Send>(common: &Common, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    if common.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(pool.install(f))
    } else {
        Ok(f())
    }
}

/// Trains `cfg` on `bags`, streaming metrics into `dir` and saving the checkpoint there.
fn train_into(
    dir: &Path,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    bags: &BagCollection,
    cfg: &TrainConfig,
    exec: ExecMode,
) -> llp_ahil::Result<(Vec<EpochMetrics>, ModelParams)> {
    let mut writer = MetricsWriter::create(dir.join(METRICS_FILE))?;
    let mut on_epoch = |m: &EpochMetrics| writer.write(m);
    let outcome = train(
        train_set,
        bags,
        cfg,
        TrainOptions {
            exec,
            test: test_set,
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    writer.finish()?;
    outcome.params.save(dir.join(CHECKPOINT_FILE))?;
    Ok((outcome.series, outcome.params))
}

fn cmd_train(common: &Common, mode: Option<Mode>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        m.apply(&mut cfg.train);
    }
    let (train_set, test_set) = load_data(&cfg.data)?;
    let bags = load_bags(&cfg, &train_set)?;
    let out = &common.out;
    prepare_out(out, &[CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, CHECKPOINT_FILE], common.overwrite)?;
    write_text(&out.join(CONFIG_FILE), &cfg.render())?;

    let exec = exec_mode(common);
    let (series, _) = with_pool(common, || {
        train_into(out, &train_set, test_set.as_ref(), &bags, &cfg.train, exec)
    })??;
    let cell = Cell {
        mode: Mode::of(&cfg.train),
        bag_size: cfg.train.bag_size,
        seed: cfg.train.seed,
    };
    let rows: Vec<SummaryRow> = series.last().map(|m| summary_row(&cell, m)).into_iter().collect();
    write_summary(&rows, out.join(SUMMARY_FILE))?;
    match rows.first() {
        Some(r) => println!(
            "{}: {} epochs, test accuracy {:.4}, pseudo-label accuracy {:.4}; results in {}",
            cell.mode,
            series.len(),
            r.test_accuracy,
            r.pseudo_label_accuracy,
            out.display()
        ),
        None => println!("{}: no epochs run; results in {}", cell.mode, out.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct FailureRow {
    cell: String,
    error: String,
}

fn write_failures(out: &Path, failures: &[FailureRow]) -> CliResult {
    if failures.is_empty() {
        return Ok(());
    }
    write_csv_rows(failures, out.join(FAILURES_FILE))?;
    for f in failures {
        eprintln!("cell {} failed: {}", f.cell, f.error);
    }
    Err(Failure::Runtime(format!(
        "{} cell(s) failed; see {}",
        failures.len(),
        out.join(FAILURES_FILE).display()
    )))
}

fn cmd_ablate(common: &Common, bag_sizes: Vec<usize>, seeds: Vec<u64>, modes: Vec<Mode>) -> CliResult {
    let cfg = load_config(common)?;
    if cfg.data.bags.is_some() {
        return Err(Failure::Usage(
            "`data.bags` fixes one grouping; ablate generates bags per cell".into(),
        ));
    }
    let bag_sizes = if bag_sizes.is_empty() { vec![cfg.train.bag_size] } else { bag_sizes };
    if bag_sizes.contains(&0) {
        return Err(Failure::Usage("bag sizes must be positive".into()));
    }
    let seeds = if seeds.is_empty() {
        (0..5).map(|k| cfg.train.seed.wrapping_add(k)).collect()
    } else {
        seeds
    };
    let modes = if modes.is_empty() { Mode::WEIGHT_ABLATION.to_vec() } else { modes };
    let (train_set, test_set) = load_data(&cfg.data)?;
    let plan = ExperimentPlan::grid(cfg.train.clone(), &modes, &bag_sizes, &seeds);

    let out = &common.out;
    prepare_out(
        out,
        &[CONFIG_FILE, SUMMARY_FILE, ABLATION_FILE, FAILURES_FILE, CELLS_DIR],
        common.overwrite,
    )?;
    write_text(&out.join(CONFIG_FILE), &cfg.render())?;

    let run_one = |cell: &Cell| -> llp_ahil::Result<SummaryRow> {
        let dir = out.join(CELLS_DIR).join(cell.label());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut writer = MetricsWriter::create(dir.join(METRICS_FILE))?;
        let mut on_epoch = |m: &EpochMetrics| writer.write(m);
        let (row, outcome) = run_cell(
            &train_set,
            test_set.as_ref(),
            &plan.base,
            cell,
            ExecMode::Deterministic,
            Some(&mut on_epoch),
        )?;
        writer.finish()?;
        outcome.params.save(dir.join(CHECKPOINT_FILE))?;
        Ok(row)
    };
    let results: Vec<(Cell, llp_ahil::Result<SummaryRow>)> =
        with_pool(common, || plan.cells.par_iter().map(|c| (*c, run_one(c))).collect())?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in results {
        match result {
            Ok(r) => rows.push(r),
            Err(e) => failures.push(FailureRow {
                cell: cell.label(),
                error: e.to_string(),
            }),
        }
    }
    write_summary(&rows, out.join(SUMMARY_FILE))?;
    let agg = aggregate(&rows);
    write_csv_rows(&agg, out.join(ABLATION_FILE))?;
    for a in &agg {
        println!(
            "{:<14} M={:<4} test accuracy {:.4} ± {:.4} over {} seed(s)",
            a.mode, a.bag_size, a.test_accuracy_mean, a.test_accuracy_std, a.runs
        );
    }
    write_failures(out, &failures)
}

#[derive(Serialize)]
struct SweepRow {
    beta_b: f64,
    beta_i: f64,
    test_accuracy: f64,
    pseudo_label_accuracy: f64,
    mean_normalized_entropy: f64,
    mean_weight: f64,
}

fn cmd_sweep_beta(common: &Common, beta_b: &[f64], beta_i: &[f64], mode: Option<Mode>) -> CliResult {
    for (name, grid) in [("beta_b", beta_b), ("beta_i", beta_i)] {
        if grid.is_empty() {
            return Err(Failure::Usage(format!("`{name}` grid is empty")));
        }
        if let Some(b) = grid.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Failure::Usage(format!("`{name}` must be > 0, got {b}")));
        }
    }
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        m.apply(&mut cfg.train);
    }
    let (train_set, test_set) = load_data(&cfg.data)?;
    let bags = load_bags(&cfg, &train_set)?;
    let pairs: Vec<(f64, f64)> = beta_b
        .iter()
        .flat_map(|&b| beta_i.iter().map(move |&i| (b, i)))
        .collect();

    let out = &common.out;
    prepare_out(out, &[CONFIG_FILE, SWEEP_FILE, FAILURES_FILE, CELLS_DIR], common.overwrite)?;
    write_text(&out.join(CONFIG_FILE), &cfg.render())?;

    let run_one = |&(bb, bi): &(f64, f64)| -> llp_ahil::Result<SweepRow> {
        let mut c = cfg.train.clone();
        c.beta_b = bb;
        c.beta_i = bi;
        let dir = out.join(CELLS_DIR).join(format!("bb{bb}_bi{bi}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (series, _) = train_into(&dir, &train_set, test_set.as_ref(), &bags, &c, ExecMode::Deterministic)?;
        let last = series
            .last()
            .ok_or_else(|| Error::InvalidArgument("run produced no epochs".into()))?;
        Ok(SweepRow {
            beta_b: bb,
            beta_i: bi,
            test_accuracy: last.test_accuracy.unwrap_or(f64::NAN),
            pseudo_label_accuracy: last.pseudo_label_accuracy,
            mean_normalized_entropy: last.mean_normalized_entropy,
            mean_weight: last.mean_weight,
        })
    };
    let results: Vec<((f64, f64), llp_ahil::Result<SweepRow>)> =
        with_pool(common, || pairs.par_iter().map(|p| (*p, run_one(p))).collect())?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((bb, bi), result) in results {
        match result {
            Ok(r) => {
                println!(
                    "beta_b={bb:<6} beta_i={bi:<6} test accuracy {:.4}, mean weight {:.4}",
                    r.test_accuracy, r.mean_weight
                );
                rows.push(r);
            }
            Err(e) => failures.push(FailureRow {
                cell: format!("bb{bb}_bi{bi}"),
                error: e.to_string(),
            }),
        }
    }
    write_csv_rows(&rows, out.join(SWEEP_FILE))?;
    write_failures(out, &failures)
}

fn report_line(name: &str, report: &OracleReport, tolerance: f64, unit: &str) -> bool {
    let ok = report.passed(tolerance);
    println!(
        "{name}: {} case(s), max {unit} error {:.3e} (tolerance {tolerance:e}) {}",
        report.cases,
        report.max_error,
        if ok { "ok" } else { "FAILED" }
    );
    if !ok {
        if let Some(case) = &report.worst_case {
            eprintln!("{name} worst case: {case}");
        }
    }
    ok
}

fn cmd_oracle_check(seed: Option<u64>, cases: usize, gradient_cases: usize) -> CliResult {
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let dew = dew_equivalence(seed, cases)?;
    let grad = gradient_check(seed, gradient_cases.min(cases))?;
    let dew_ok = report_line("weight oracle", &dew, DEW_TOLERANCE, "absolute");
    let grad_ok = report_line("gradient check", &grad, GRADIENT_TOLERANCE, "relative");
    if dew_ok && grad_ok {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("oracle disagreement (seed {seed})")))
    }
}

fn cmd_gen_data(common: &Common) -> CliResult {
    let cfg = load_config(common)?;
    let (train_set, test_set) = load_data(&cfg.data)?;
    let bags = load_bags(&cfg, &train_set)?;
    let out = &common.out;
    prepare_out(out, &[CONFIG_FILE, "train.csv", "test.csv", "bags.tsv"], common.overwrite)?;
    write_text(&out.join(CONFIG_FILE), &cfg.render())?;
    write_csv_dataset(&train_set, out.join("train.csv"))?;
    if let Some(t) = &test_set {
        write_csv_dataset(t, out.join("test.csv"))?;
    }
    write_bags(&bags, out.join("bags.tsv"))?;
    println!(
        "{} training rows in {} bags of {}, {} test rows; written to {}",
        train_set.len(),
        bags.len(),
        cfg.train.bag_size,
        test_set.as_ref().map_or(0, Dataset::len),
        out.display()
    );
    Ok(())
}

fn cmd_export_features(common: &Common, checkpoint: &Path, split: SplitArg) -> CliResult {
    let cfg = load_config(common)?;
    let (train_set, test_set) = load_data(&cfg.data)?;
    let (name, dataset) = match split {
        SplitArg::Train => ("features_train.csv", train_set),
        SplitArg::Test => (
            "features_test.csv",
            test_set.ok_or_else(|| Failure::Usage("no test set configured (`data.test_csv`)".into()))?,
        ),
    };
    let params = ModelParams::load(checkpoint)?;
    let out = &common.out;
    prepare_out(out, &[name], common.overwrite)?;
    export_features(&params, &dataset, out.join(name))?;
    println!("{} rows written to {}", dataset.len(), out.join(name).display());
    Ok(())
}
