//! Drives the `dbtnet` binary end to end on a small configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbtnet::data::{generate_dataset, read_dataset};
use dbtnet::train::{read_metrics, TrainConfig};

fn config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join(format!("run-{epochs}.toml"));
    let text = format!(
        r#"
arch = "dbtnet-tiny"
epochs = {epochs}
batch_size = 8
train_fraction = 0.5
seed = 11
deterministic = true
output_dir = {out:?}

[dataset]
classes = 8
samples_per_class = 10
image_size = 32
seed = 4
"#,
        out = dir.join(format!("out-{epochs}")).display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn dbtnet(args: &[&str], cfg: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dbtnet"));
    cmd.args(args);
    if let Some(c) = cfg {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn assert_single_line_error(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} message=")), "{err}");
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|w| w.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .parse()
        .unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(dbtnet(&["--help"], None).status.code(), Some(0));
    assert_single_line_error(&dbtnet(&[], None), 2, "usage");
    assert_single_line_error(&dbtnet(&["train"], None), 2, "usage");
    assert_single_line_error(&dbtnet(&["train", "--config", "x.toml", "--stages"], None), 2, "usage");
}

#[test]
fn missing_and_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    assert_single_line_error(&dbtnet(&["eval"], Some(&dir.path().join("absent.toml"))), 1, "io");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epochs = \"many\"\n").unwrap();
    assert_single_line_error(&dbtnet(&["train"], Some(&bad)), 1, "parse");
    let cfg = config(dir.path(), 1);
    assert_single_line_error(&dbtnet(&["train", "--stages", "VII"], Some(&cfg)), 1, "config");
    assert_single_line_error(&dbtnet(&["train", "--lambda=-1"], Some(&cfg)), 1, "config");
}

#[test]
fn zero_epochs_writes_initial_state_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0);
    let o = dbtnet(&["train"], Some(&cfg));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out-0");
    assert!(out.join("initial.dbtc").exists());
    assert!(!out.join("final.dbtc").exists());
    assert!(!out.join("best.dbtc").exists());
    assert_eq!(
        std::fs::read_to_string(out.join("metrics.csv")).unwrap(),
        format!("{}\n", dbtnet::train::METRICS_HEADER)
    );

    // An untrained network sits near chance on eight classes.
    let init = out.join("initial.dbtc");
    let o = dbtnet(&["eval", "--checkpoint", init.to_str().unwrap()], Some(&cfg));
    assert!(o.status.success());
    for line in stdout(&o).lines() {
        let acc = field(line, "accuracy");
        assert!((0.0..=0.4).contains(&acc), "{line}");
    }
}

#[test]
fn train_eval_and_interactions_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let o = dbtnet(&["train"], Some(&cfg));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out-2");
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);

    // Default checkpoint is final.dbtc; its accuracies are the last logged ones.
    let o = dbtnet(&["eval"], Some(&cfg));
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    let (train_line, test_line) = (lines.next().unwrap(), lines.next().unwrap());
    assert!((field(train_line, "accuracy") - rows[1].train_acc).abs() < 1e-4, "{train_line}");
    assert!((field(test_line, "accuracy") - rows[1].test_acc).abs() < 1e-4, "{test_line}");
    assert!(field(train_line, "sum_l_g").is_finite());

    let csv = dir.path().join("m.csv");
    let pgm = dir.path().join("m.pgm");
    let o = dbtnet(
        &["interactions", "--stage", "IV", "--out", csv.to_str().unwrap(), "--out", pgm.to_str().unwrap()],
        Some(&cfg),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("stage=IV block=IV.1 channels=16 groups=4 samples=80 "));
    let m = dbtnet::train::matrix_from_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(m.shape(), &[16, 16]);
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5\n16 16\n255\n"));

    let bad_out = dir.path().join("m.png");
    assert_single_line_error(
        &dbtnet(&["interactions", "--out", bad_out.to_str().unwrap()], Some(&cfg)),
        1,
        "config",
    );
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0);
    assert!(dbtnet(&["train"], Some(&cfg)).status.success());
    let init = dir.path().join("out-0/initial.dbtc");
    let mut bytes = std::fs::read(&init).unwrap();
    bytes.truncate(bytes.len() - 3);
    let cut = dir.path().join("cut.dbtc");
    std::fs::write(&cut, &bytes).unwrap();
    assert_single_line_error(&dbtnet(&["eval", "--checkpoint", cut.to_str().unwrap()], Some(&cfg)), 1, "checkpoint");

    // A plain-network checkpoint does not fit the DBT architecture.
    let o = dbtnet(&["eval", "--checkpoint", init.to_str().unwrap(), "--stages", "V"], Some(&cfg));
    assert_single_line_error(&o, 1, "checkpoint_mismatch");
}

#[test]
fn cost_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0);
    let o = dbtnet(&["cost", "--format", "toml", "--input", "64"], Some(&cfg));
    assert!(o.status.success());
    let v: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(v["input"].as_integer(), Some(64));
    assert!(v["params"].as_integer().unwrap() > 0);
    let o = dbtnet(&["cost"], Some(&cfg));
    assert!(o.status.success());
    assert!(stdout(&o).contains("total"));
}

#[test]
fn gen_data_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = config(dir.path(), 0);
    let file = dir.path().join("data.dbtd");
    let o = dbtnet(&["gen-data", "--out", file.to_str().unwrap()], Some(&cfg_path));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (samples, classes) = read_dataset(&file).unwrap();
    let cfg = TrainConfig::load(&cfg_path).unwrap();
    let expected = generate_dataset(&cfg.dataset).unwrap();
    assert_eq!(classes, 8);
    assert_eq!(samples.len(), expected.len());
    for (a, b) in samples.iter().zip(&expected) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.image, b.image);
    }
}
