use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn das(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_das"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn das")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_SPEC: &str = r#"{
    "num_items": 45, "num_classes": 3, "t_min": 4, "t_max": 6,
    "height": 5, "width": 5, "signal_frames": 2, "seed": 9
}"#;

const TINY_CONFIG: &str = r#"{
    "dataset": "data.dasdata", "output_dir": "out", "lr": 0.003, "batch_size": 8,
    "max_epochs": 2, "patience": 2, "heads": 2, "sampler_hidden": 4,
    "embed": 4, "classifier_hidden": 4, "seeds": [0]
}"#;

fn setup(dir: &Path) {
    fs::write(dir.join("spec.json"), TINY_SPEC).unwrap();
    fs::write(dir.join("config.json"), TINY_CONFIG).unwrap();
    let o = das(&["generate", "--spec", "spec.json", "--out", "data.dasdata"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_exits_zero_and_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = das(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["generate", "train", "eval", "compare", "inspect", "grad-check"] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from help");
    }
    let o = das(&["train", "--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for flag in ["--config", "--lr", "--seeds", "--patience", "--deterministic-eval"] {
        assert!(text.contains(flag), "{flag} missing");
    }
    assert!(text.contains("default: 0.0001"));
    let o = das(&["grad-check", "--help"], dir.path());
    assert!(stdout(&o).contains("[default: 0]"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = das(&["train", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bogus"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"lrr": 0.01}"#).unwrap();
    let o = das(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lrr"), "{}", stderr(&o));
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = das(&["train", "--config", "nope.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.json"));
    let o = das(&["eval", "--checkpoint", "x.ckpt", "--data", "y"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x.ckpt"));
}

#[test]
fn corrupted_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    fs::write(dir.path().join("data.dasdata"), b"NOTADATASET").unwrap();
    let o = das(&["train", "--config", "config.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"));
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = das(&["train", "--config", "config.json", "--strategy", "das"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("out/metrics.csv").exists());
    let ckpt = d.join("out/das-seed0.ckpt");
    assert!(ckpt.exists());

    let args = ["eval", "--checkpoint", "out/das-seed0.ckpt", "--data", "data.dasdata", "--deterministic"];
    let a = das(&args, d);
    let b = das(&args, d);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("strategy,seed,split,loss"));

    let o = das(
        &["inspect", "--checkpoint", "out/das-seed0.ckpt", "--data", "data.dasdata", "--out", "dump.jsonl"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dump = fs::read_to_string(d.join("dump.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    for key in ["item_id", "temperature", "selected_indices", "soft_rows"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn overrides_take_precedence_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = das(
        &["train", "--config", "config.json", "--strategy", "uniform", "--seeds", "3,4", "--output-dir", "alt"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("alt/uniform-seed3.ckpt").exists());
    assert!(d.join("alt/uniform-seed4.ckpt").exists());
    let o = das(&["train", "--config", "config.json", "--sample-ratio", "2"], d);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = das(&["compare", "--config", "config.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(d.join("out/comparison.csv")).unwrap();
    let metrics = fs::read(d.join("out/compare_metrics.csv")).unwrap();
    let o = das(&["compare", "--config", "config.json"], d);
    assert!(o.status.success());
    assert_eq!(fs::read(d.join("out/comparison.csv")).unwrap(), first);
    assert_eq!(fs::read(d.join("out/compare_metrics.csv")).unwrap(), metrics);
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("strategy,metric,mean,std,is_best"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5 * 3);
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = das(&["grad-check", "--seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("end-to-end"));
}
