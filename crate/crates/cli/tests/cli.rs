use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use llp_ahil::metrics::{read_csv_rows, read_metrics, SummaryRow, SUMMARY_HEADER};
use llp_ahil::{ExperimentConfig, KeyValues};

const BIN: &str = env!("CARGO_BIN_EXE_llp-ahil");

/// Small blobs so every run takes a fraction of a second.
const SMALL: &[&str] = &["--set", "blobs.samples_per_class=40", "--set", "epochs=2", "--set", "bag_size=8"];

fn llp(args: &[&str]) -> Output {
    llp_env(args, None)
}

fn llp_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("LLP_DEW_SEED");
    if let Some(s) = seed {
        cmd.env("LLP_DEW_SEED", s);
    }
    cmd.output().expect("spawn llp-ahil")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn args<'a>(head: &[&'a str], out: &'a Path, tail: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(SMALL);
    v.push("--out");
    v.push(out.to_str().unwrap());
    v.extend_from_slice(tail);
    v
}

fn resolved(dir: &Path) -> ExperimentConfig {
    let kv = KeyValues::load(dir.join("config.txt")).unwrap();
    ExperimentConfig::from_kv(kv).unwrap()
}

#[test]
fn train_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = llp(&args(&["train"], &out, &["--set", "epochs=1"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_metrics(out.join("metrics.jsonl")).unwrap().len(), 1);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some(SUMMARY_HEADER));
    let rows: Vec<SummaryRow> = read_csv_rows(out.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mode, "dew");
    assert!(out.join("checkpoint.txt").exists());
    assert_eq!(resolved(&out).train.epochs, 1);
}

#[test]
fn missing_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = llp(&["train", "--config", "/nonexistent/llp.conf", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn invalid_values_exit_2_with_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    for (set, field) in [("momentum=1.5", "momentum"), ("beta_i=0", "beta_i"), ("epochs=many", "epochs"), ("lamda=1", "lamda")] {
        let o = llp(&["train", "--set", set, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{set}");
        assert!(stderr(&o).contains(field), "{set}: {}", stderr(&o));
    }
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    fs::write(&conf, "# desk run\nlambda = 0.25\nhidden_sizes = 8\nblobs.samples_per_class = 40\nepochs = 3\n").unwrap();
    let out = tmp.path().join("run");
    let o = llp(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--set",
        "epochs=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = resolved(&out);
    assert_eq!(cfg.train.lambda, 0.25);
    assert_eq!(cfg.train.hidden_sizes, vec![8]);
    assert_eq!(cfg.train.epochs, 1);
}

#[test]
fn dllp_mode_zeroes_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = llp(&args(&["train", "--mode", "dllp"], &out, &[]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(resolved(&out).train.lambda, 0.0);
    let rows: Vec<SummaryRow> = read_csv_rows(out.join("summary.csv")).unwrap();
    assert_eq!(rows[0].mode, "dllp");
    for m in read_metrics(out.join("metrics.jsonl")).unwrap() {
        assert_eq!(m.total_loss, m.bag_loss);
    }
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&llp(&args(&["train"], &out, &[]))), 0);
    let before = fs::read(out.join("metrics.jsonl")).unwrap();
    let o = llp(&args(&["train"], &out, &["--set", "seed=3"]));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--overwrite"));
    assert_eq!(fs::read(out.join("metrics.jsonl")).unwrap(), before);
    let o = llp(&args(&["train"], &out, &["--set", "seed=3", "--overwrite"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(resolved(&out).train.seed, 3);
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env");
    assert_eq!(code(&llp_env(&args(&["train"], &out, &[]), Some("42"))), 0);
    assert_eq!(resolved(&out).train.seed, 42);

    let out = tmp.path().join("explicit");
    assert_eq!(code(&llp_env(&args(&["train"], &out, &["--set", "seed=5"]), Some("42"))), 0);
    assert_eq!(resolved(&out).train.seed, 5);

    let out = tmp.path().join("bad");
    assert_eq!(code(&llp_env(&args(&["train"], &out, &[]), Some("minus one"))), 2);
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&llp(&args(&["train", "--deterministic"], &a, &[]))), 0);
    assert_eq!(code(&llp(&args(&["train", "--deterministic"], &b, &[]))), 0);
    for f in ["metrics.jsonl", "summary.csv", "checkpoint.txt", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablate_grid_rows_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("grid");
    let o = llp(&args(&["ablate", "--bag-sizes", "4,8", "--seeds", "0,1"], &out, &[]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<SummaryRow> = read_csv_rows(out.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 4 * 2 * 2);
    let aggregate = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(aggregate.lines().count(), 1 + 4 * 2);
    assert!(out.join("cells/dew_m8_s1/metrics.jsonl").exists());
    assert!(!out.join("failures.csv").exists());
}

#[test]
fn ablate_records_failed_cells_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("grid");
    // 40 samples per class, 80% train: 128 training rows, so M=500 cannot form a bag
    let o = llp(&args(&["ablate", "--bag-sizes", "8,500", "--seeds", "0", "--modes", "dew,dllp"], &out, &[]));
    assert_eq!(code(&o), 1);
    let rows: Vec<SummaryRow> = read_csv_rows(out.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.bag_size == 8));
    let failures = fs::read_to_string(out.join("failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 3);
    assert!(failures.contains("bag size 500 exceeds dataset"), "{failures}");
}

#[test]
fn sweep_beta_grid_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = llp(&args(&["sweep-beta", "--beta-b", "0.5,2", "--beta-i", "1,4"], &out, &[]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("beta_b,beta_i,test_accuracy,pseudo_label_accuracy,mean_normalized_entropy,mean_weight"));
    assert_eq!(text.lines().count(), 5);

    let bad = tmp.path().join("bad");
    for grid in [["--beta-b", "1,0"], ["--beta-i", "-2"]] {
        let mut a = args(&["sweep-beta"], &bad, &[]);
        a.extend_from_slice(&grid);
        let o = llp(&a);
        assert_eq!(code(&o), 2, "{grid:?}");
    }
    assert!(!bad.join("sweep.csv").exists());
}

#[test]
fn oracle_check_passes_and_reports() {
    let o = llp(&["oracle-check", "--cases", "0"]);
    assert_eq!(code(&o), 0);
    let o = llp(&["oracle-check", "--seed", "3", "--cases", "500", "--gradient-cases", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("500 case(s)"), "{stdout}");
    assert!(stdout.contains("5 case(s)"), "{stdout}");
}

#[test]
fn generated_data_round_trips_through_csv_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = llp(&args(&["gen-data"], &data, &["--set", "seed=9"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bags_text = fs::read_to_string(data.join("bags.tsv")).unwrap();
    assert!(bags_text.starts_with("#llp-bags v1 C=4 M=8"));
    assert_eq!(bags_text.lines().count(), 1 + 128 / 8);

    let csv_sets = [
        "data.source=csv".to_string(),
        format!("data.train_csv={}", data.join("train.csv").display()),
        format!("data.test_csv={}", data.join("test.csv").display()),
        format!("data.bags={}", data.join("bags.tsv").display()),
        "data.class_count=4".to_string(),
        "bag_size=8".to_string(),
        "epochs=2".to_string(),
        "seed=9".to_string(),
    ];
    let run = |out: &Path, extra: &[String]| {
        let mut a: Vec<String> = vec!["train".into(), "--deterministic".into(), "--out".into(), out.display().to_string()];
        for s in extra {
            a.push("--set".into());
            a.push(s.clone());
        }
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        llp(&refs)
    };
    let from_csv = tmp.path().join("csv");
    let o = run(&from_csv, &csv_sets);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // the blob run that generated the files trains on the same rows and bags
    let from_blobs = tmp.path().join("blobs");
    let blob_sets: Vec<String> = ["blobs.samples_per_class=40", "bag_size=8", "epochs=2", "seed=9"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(code(&run(&from_blobs, &blob_sets)), 0);
    assert_eq!(
        fs::read(from_csv.join("metrics.jsonl")).unwrap(),
        fs::read(from_blobs.join("metrics.jsonl")).unwrap()
    );

    let mut mismatched = csv_sets.clone();
    mismatched[5] = "bag_size=16".into();
    assert_eq!(code(&run(&tmp.path().join("mismatch"), &mismatched)), 2);
}

#[test]
fn export_features_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&llp(&args(&["train"], &run, &["--set", "hidden_sizes=6,5"]))), 0);
    let out = tmp.path().join("feat");
    let ckpt = run.join("checkpoint.txt");
    let o = llp(&args(&["export-features", "--checkpoint", ckpt.to_str().unwrap()], &out, &[]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("features_test.csv")).unwrap();
    assert_eq!(text.lines().count(), 32);
    assert!(text.lines().all(|l| l.split(',').count() == 5 + 1));

    let o = llp(&args(&["export-features", "--checkpoint", "/nonexistent.ckpt"], &tmp.path().join("x"), &[]));
    assert_eq!(code(&o), 1);
}
