use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn calib(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calib"))
        .args(args)
        .current_dir(dir)
        .env_remove("SOFI_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_deterministic_and_logs_config() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        let o = calib(&["gen-data", "--out", name, "--count", "5", "--seed", "3"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 5);
    let conf = fs::read_to_string(dir.path().join("a.run.conf")).unwrap();
    assert!(conf.contains("seed = 3"), "{conf}");
    assert!(conf.contains("count = 5"), "{conf}");
}

#[test]
fn zero_count_writes_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(&["gen-data", "--out", "empty.jsonl", "--count", "0"], dir.path());
    assert!(o.status.success());
    assert_eq!(fs::read(dir.path().join("empty.jsonl")).unwrap().len(), 0);
}

#[test]
fn invalid_range_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(
        &["gen-data", "--out", "x.jsonl", "--fov-min", "90", "--fov-max", "30"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fov"), "{}", stderr(&o));
    let o = calib(&["gen-data"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_calib"))
        .args(["gen-data", "--out", "env.jsonl", "--count", "2"])
        .current_dir(dir.path())
        .env("SOFI_SEED", "41")
        .output()
        .unwrap();
    assert!(o.status.success());
    let conf = fs::read_to_string(dir.path().join("env.run.conf")).unwrap();
    assert!(conf.contains("seed = 41"), "{conf}");
    let o = calib(&["gen-data", "--out", "flag.jsonl", "--count", "2", "--seed", "41"], dir.path());
    assert!(o.status.success());
    assert_eq!(
        fs::read(dir.path().join("env.jsonl")).unwrap(),
        fs::read(dir.path().join("flag.jsonl")).unwrap()
    );
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("gen.conf"),
        "# small set\ncount = 4\nseed = 9\nimage-size = 32\n",
    )
    .unwrap();
    let o = calib(
        &["gen-data", "--config", "gen.conf", "--out", "c.jsonl", "--seed", "10"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let conf = fs::read_to_string(dir.path().join("c.run.conf")).unwrap();
    assert!(conf.contains("count = 4"), "{conf}");
    assert!(conf.contains("image-size = 32"), "{conf}");
    assert!(conf.contains("seed = 10"), "{conf}");

    fs::write(dir.path().join("bad.conf"), "colour = red\n").unwrap();
    let o = calib(&["gen-data", "--config", "bad.conf", "--out", "d.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn ground_truth_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(&["gen-data", "--out", "d.jsonl", "--count", "6"], dir.path());
    assert!(o.status.success());
    let o = calib(&["eval", "--data", "d.jsonl", "--ground-truth", "--out", "gt"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gt/summary.json")).unwrap()).unwrap();
    for key in ["up_mean", "pitch_mean", "roll_mean", "fov_mean", "up_med"] {
        assert!(summary[key].as_f64().unwrap() < 1e-9, "{key}: {summary}");
    }
    for key in ["auc_010", "auc_015", "auc_025"] {
        assert_eq!(summary[key].as_f64().unwrap(), 100.0, "{key}");
    }
    assert_eq!(summary["n_records"], 6);
    assert_eq!(summary["n_excluded"], 0);
    assert!(dir.path().join("gt/records.csv").exists());
    assert!(dir.path().join("gt/curve.csv").exists());
    assert!(dir.path().join("gt/run.conf").exists());
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(&["eval", "--data", "absent.jsonl", "--ground-truth", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.jsonl"), "{}", stderr(&o));
    let o = calib(&["gen-data", "--out", "d.jsonl", "--count", "1"], dir.path());
    assert!(o.status.success());
    let o = calib(&["eval", "--data", "d.jsonl", "--ckpt", "gone.json", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gone.json"), "{}", stderr(&o));
}

#[test]
fn train_zero_epochs_then_eval_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(&["gen-data", "--out", "d.jsonl", "--count", "2", "--lines", "8"], dir.path());
    assert!(o.status.success());
    let o = calib(
        &["train", "--data", "d.jsonl", "--out", "m/init.json", "--epochs", "0", "--seed", "5"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("m/init.json").exists());
    let curve = fs::read_to_string(dir.path().join("m/init.losses.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1);
    assert!(dir.path().join("m/init.run.conf").exists());

    let o = calib(&["eval", "--data", "d.jsonl", "--ckpt", "m/init.json", "--out", "ev"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    // A 32-pixel dataset does not fit a 64-pixel checkpoint.
    let o = calib(
        &["gen-data", "--out", "small.jsonl", "--count", "1", "--image-size", "32"],
        dir.path(),
    );
    assert!(o.status.success());
    let o = calib(&["eval", "--data", "small.jsonl", "--ckpt", "m/init.json", "--out", "ev2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("image_size"), "{}", stderr(&o));
}

#[test]
fn short_training_writes_loss_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(
        &["gen-data", "--out", "d.jsonl", "--count", "2", "--image-size", "32", "--lines", "4"],
        dir.path(),
    );
    assert!(o.status.success());
    let args = [
        "train", "--data", "d.jsonl", "--out", "t.json", "--epochs", "2", "--d", "16", "--n-lines", "4",
        "--encoder-layers", "1", "--decoder-layers", "1", "--k-enc", "2", "--k-dec", "2", "--heads", "2",
        "--ffn", "16", "--equal-weights",
    ];
    let o = calib(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(dir.path().join("t.losses.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "epoch,l_zvp,l_hl,l_fov,l_class,l_score,total");
    assert_eq!(lines.len(), 3);
    let conf = fs::read_to_string(dir.path().join("t.run.conf")).unwrap();
    assert!(conf.contains("equal-weights = true"), "{conf}");
}

#[test]
fn gradcheck_attention_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(&["gradcheck", "--scope", "attention"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("reference points"), "{table}");
    assert!(!table.contains("FAIL"));
}

#[test]
fn bench_writes_one_row_per_size_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let o = calib(
        &["bench-attn", "--sizes", "8,16", "--d", "8", "--k", "2", "--repeats", "1", "--out", "b.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("resolution,h,w,d,k,mode,flops,wall_ns"));
    let o = calib(&["bench-attn", "--sizes", "8", "--out", "c.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
