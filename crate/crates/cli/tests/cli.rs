use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentgan::data::{encode_idx, IdxKind, RawImageSet};
use latentgan::evaluation::read_png;

const BIN: &str = env!("CARGO_BIN_EXE_latentgan");

fn run(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env("RUST_LOG", "warn");
    match out_env {
        Some(dir) => cmd.env("LATENTGAN_OUT", dir),
        None => cmd.env_remove("LATENTGAN_OUT"),
    };
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes the four MNIST-named IDX files of a 4×4 toy set with 3 classes.
fn toy_data(dir: &Path, count: usize) {
    let mut pixels = Vec::with_capacity(count * 16);
    let labels: Vec<u8> = (0..count).map(|i| (i % 3) as u8).collect();
    for (i, &l) in labels.iter().enumerate() {
        for p in 0..16usize {
            let on = p % 3 == l as usize;
            pixels.push(if on { 200 + (i % 50) as u8 } else { (p * 3) as u8 });
        }
    }
    let images = RawImageSet {
        pixels,
        count,
        channels: 1,
        height: 4,
        width: 4,
        labels: None,
        source: String::new(),
    };
    let label_set = RawImageSet {
        pixels: Vec::new(),
        count,
        channels: 0,
        height: 0,
        width: 0,
        labels: Some(labels),
        source: String::new(),
    };
    for split in ["train", "t10k"] {
        fs::write(dir.join(format!("{split}-images-idx3-ubyte")), encode_idx(&images, IdxKind::Images)).unwrap();
        fs::write(dir.join(format!("{split}-labels-idx1-ubyte")), encode_idx(&label_set, IdxKind::Labels)).unwrap();
    }
}

/// A tiny-preset config over toy data, returning (config path, data dir).
fn tiny_config(root: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    fs::create_dir_all(&data).unwrap();
    toy_data(&data, 48);
    let config = root.join("tiny.toml");
    let o = run(
        &[
            "init-config",
            "--preset",
            "tiny",
            "--data-dir",
            data.to_str().unwrap(),
            "--seed",
            &seed.to_string(),
            "--out",
            config.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut text = fs::read_to_string(&config).unwrap();
    text = text.replace("batch_size = 128", "batch_size = 16");
    fs::write(&config, text).unwrap();
    (config, data)
}

#[test]
fn zero_epochs_writes_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = tiny_config(dir.path(), 0);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", config.to_str().unwrap(), "--epochs", "0"], Some(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("latest.ckpt").is_file());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = tiny_config(dir.path(), 5);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["train", "--config", config.to_str().unwrap(), "--epochs", "2"], Some(&out));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(String::from_utf8_lossy(&csvs[0]).lines().count(), 1 + 2 * 3);
}

#[test]
fn trained_checkpoint_evaluates_samples_and_traverses() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = tiny_config(dir.path(), 1);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", config.to_str().unwrap(), "--epochs", "1"], Some(&out))), 0);
    let ckpt = out.join("latest.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let o = run(&["eval", "--checkpoint", ckpt, "--data", data.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("eval_report.csv")).unwrap();
    assert!(report.starts_with("metric,value\ntest_error,"));
    assert!(report.contains("n_test,48"));

    let o = run(&["sample", "--checkpoint", ckpt, "--n", "5", "--seed", "3"], None);
    assert_eq!(code(&o), 0);
    let r = read_png(out.join("samples_seed3.png")).unwrap();
    assert_eq!((r.width, r.height, r.channels), (12, 8, 1));

    let o = run(&["traverse", "--checkpoint", ckpt, "--vary", "cat0", "--rows", "2", "--cols", "3"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("category round trip: "));
    let r = read_png(out.join("traverse_cat0_seed0.png")).unwrap();
    assert_eq!((r.width, r.height), (12, 8));

    let alt = dir.path().join("u1.png");
    let o = run(
        &["traverse", "--checkpoint", ckpt, "--vary", "u1", "--range", "-2", "2", "--cols", "5", "--out", alt.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_png(&alt).unwrap().width, 20);
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = tiny_config(dir.path(), 0);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", config.to_str().unwrap(), "--epochs", "0"], Some(&out))), 0);
    let ckpt = out.join("latest.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let o = run(&["sample", "--checkpoint", ckpt.to_str().unwrap()], Some(&out));
    assert_eq!(code(&o), 3);

    // resuming training from it is refused the same way
    let o = run(&["train", "--config", config.to_str().unwrap(), "--epochs", "1"], Some(&out));
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train", "--nope"], None)), 2);
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&run(&["train", "--config", missing.to_str().unwrap()], None)), 2);
    let o = run(&["oracle", "--k", "9", "--components", "8", "--steps", "1"], Some(dir.path()));
    assert_eq!(code(&o), 2);
    let (config, _) = tiny_config(dir.path(), 0);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", config.to_str().unwrap(), "--epochs", "0"], Some(&out))), 0);
    let ckpt = out.join("latest.ckpt");
    let o = run(&["traverse", "--checkpoint", ckpt.to_str().unwrap(), "--vary", "cat0", "--cols", "4"], None);
    assert_eq!(code(&o), 2);
    let o = run(&["traverse", "--checkpoint", ckpt.to_str().unwrap(), "--vary", "u7"], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_writes_its_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oracle");
    let o = run(
        &["oracle", "--steps", "50", "--eval-samples", "400", "--out-dir", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("oracle_report.csv")).unwrap();
    assert!(report.starts_with("metric,value\nmmd2,"));
    assert!(out.join("oracle_curves.csv").is_file());
    assert!(out.join("oracle_scatter.png").is_file());
}
