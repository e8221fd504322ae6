use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsenet::data::{
    generate_synthetic, load_gray_png, save_dataset, save_gray_png, Split, SynthConfig,
};
use lsenet_tensor::Tensor;

const SMALL: &str = "\
[model]
layers = 2
channels = 8
patch_size = 4

[synth]
train_count = 4
val_count = 2
test_count = 3
";

fn lsenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsenet"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the small model for `epochs` on synthetic data; returns the run dir.
fn trained(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = small_config(dir, "");
    let out = dir.join("run");
    let o = lsenet(&[
        "train",
        "--config",
        s(&cfg),
        "--synthetic",
        "--epochs",
        &epochs.to_string(),
        "--size",
        "64",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

/// Per-sample rows and the mean±sd row of a metrics CSV.
fn parse_metrics(csv: &str) -> (Vec<[f64; 6]>, [(f64, f64); 6]) {
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "dataset,sample,dice,sensitivity,specificity,accuracy,fdr,kappa"
    );
    let rows = lines[1..lines.len() - 1]
        .iter()
        .map(|l| {
            let v: Vec<f64> = l.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
            v.try_into().unwrap()
        })
        .collect();
    let agg: Vec<(f64, f64)> = lines
        .last()
        .unwrap()
        .split(',')
        .skip(2)
        .map(|x| {
            let (m, sd) = x.split_once('±').unwrap();
            (m.parse().unwrap(), sd.parse().unwrap())
        })
        .collect();
    (rows, agg.try_into().unwrap())
}

#[test]
fn synthetic_training_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), 3);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_dice");
    assert_eq!(lines.len(), 4);
    for name in [
        "config.toml",
        "model.ckpt",
        "last.ckpt",
        "best.ckpt",
        "metrics.csv",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("epochs = 3"), "{echo}");
    assert!(echo.contains("size = 64"), "{echo}");
    assert!(echo.contains("synthetic = true"), "{echo}");

    let (rows, agg) = parse_metrics(&fs::read_to_string(out.join("metrics.csv")).unwrap());
    assert_eq!(rows.len(), 3);
    for k in 0..6 {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / 3.0;
        // rows and aggregate are both printed to four decimals
        assert!(
            (agg[k].0 - mean).abs() <= 1e-4,
            "metric {k}: {} vs {mean}",
            agg[k].0
        );
    }
}

#[test]
fn resume_continues_the_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), 2);
    let cfg = small_config(dir.path(), "");
    let o = lsenet(&[
        "train",
        "--config",
        s(&cfg),
        "--synthetic",
        "--epochs",
        "3",
        "--size",
        "64",
        "--out-dir",
        s(&out),
        "--resume",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let epochs: Vec<&str> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(epochs, ["0", "1", "2"]);

    let o = lsenet(&[
        "train",
        "--config",
        s(&cfg),
        "--synthetic",
        "--epochs",
        "3",
        "--size",
        "64",
        "--out-dir",
        s(&out),
        "--resume",
        "--layers",
        "3",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.layers"), "{}", stderr(&o));
}

#[test]
fn missing_masks_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("data/train/images");
    fs::create_dir_all(&images).unwrap();
    save_gray_png(&images.join("a.png"), &Tensor::zeros([1, 16, 16])).unwrap();
    let o = lsenet(&[
        "train",
        "--data",
        s(&dir.path().join("data")),
        "--out-dir",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&o), 2);
    let masks = dir.path().join("data/train/masks");
    assert!(stderr(&o).contains(s(&masks)), "{}", stderr(&o));
}

#[test]
fn training_without_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lsenet(&["train", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--synthetic"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "\n[train]\nlr0 = 1e30\nepochs = 2\n");
    let o = lsenet(&[
        "train",
        "--config",
        s(&cfg),
        "--synthetic",
        "--size",
        "32",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

fn symbolic_pie(c: usize, p: usize) -> usize {
    2 * (c * c * 25 + c) + (c * c + c) + p * p * p * p + 3 * (c * c + c)
}

#[test]
fn summary_reports_counts_and_ablation() {
    let o = lsenet(&["summary"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let total: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("params: "))
        .and_then(|v| v.strip_suffix(" M"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((total - 2.08).abs() / 2.08 <= 0.10, "{total}");
    assert!(text.contains("total") && text.contains("2152500"), "{text}");
    assert!(text.contains("at 224x224"), "{text}");

    let o = lsenet(&["summary", "--ablate", "pie"]);
    assert_eq!(code(&o), 0);
    let expect = 2_152_500 - 4 * symbolic_pie(64, 15);
    assert!(
        stdout(&o)
            .lines()
            .any(|l| l.starts_with("total") && l.contains(&expect.to_string())),
        "{}",
        stdout(&o)
    );
    assert!(!stdout(&o).contains(".pie"));

    let o = lsenet(&["summary", "--resolution", "100"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_on_a_clean_build() {
    let o = lsenet(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    let err: f64 = text
        .split("max relative error ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{text}");
}

#[test]
fn eval_with_masks_as_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let o = lsenet(&[
        "eval",
        "--synthetic",
        "--mask-as-prediction",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (rows, agg) = parse_metrics(&stdout(&o));
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r[0] == 1.0));
    assert_eq!(agg[0], (1.0, 0.0));
    assert_eq!(
        fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        stdout(&o)
    );
}

#[test]
fn eval_rejects_an_empty_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(data.join("test")).unwrap();
    let o = lsenet(&[
        "eval",
        "--data",
        s(&data),
        "--mask-as-prediction",
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn eval_of_a_trained_model_on_disk_data() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), 1);
    let data = dir.path().join("data");
    let pairs = generate_synthetic(
        &SynthConfig {
            size: 32,
            seed: 3,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    save_dataset(&data, Split::Val, &pairs).unwrap();
    let ckpt = run.join("model.ckpt");

    let eval = |threads: &str| {
        let o = lsenet(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--split",
            "val",
            "--device-threads",
            threads,
            "--out-dir",
            s(&dir.path().join("e")),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o)
    };
    let one = eval("1");
    assert_eq!(eval("3"), one);
    let (rows, agg) = parse_metrics(&one);
    assert_eq!(rows.len(), 5);
    for k in 0..6 {
        let xs: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((agg[k].0 - mean).abs() <= 1e-4, "metric {k}");
        assert!((agg[k].1 - sd).abs() <= 2e-4, "metric {k}");
    }

    let o = lsenet(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "val",
        "--layers",
        "3",
    ]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("model.layers is 2 in the checkpoint but 3"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn predict_writes_maps_and_handles_blank_input() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), 1);
    let blank = dir.path().join("blank.png");
    save_gray_png(&blank, &Tensor::zeros([1, 90, 97])).unwrap();
    let out = dir.path().join("pred");
    let o = lsenet(&[
        "predict",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--heatmaps",
        "--out-dir",
        s(&out),
        s(&blank),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let probs = load_gray_png(&out.join("blank_prob.png")).unwrap();
    assert_eq!(probs.shape(), &[1, 90, 97]);
    let mask = load_gray_png(&out.join("blank_mask.png")).unwrap();
    assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(out.join("blank_pie0.png").exists() && out.join("blank_pie1.png").exists());

    // zero padding perturbs a band along the border; the interior is flat
    let interior: Vec<f32> = (30..60)
        .flat_map(|i| (30..67).map(move |j| (i, j)))
        .map(|(i, j)| probs.at(&[0, i, j]))
        .collect();
    let (lo, hi) = interior
        .iter()
        .fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
    println!("blank interior probability range [{lo}, {hi}]");
    assert!(hi - lo <= 1.0 / 255.0, "{lo}..{hi}");
    assert!(
        stdout(&o).starts_with("blank: probability range"),
        "{}",
        stdout(&o)
    );

    let o = lsenet(&[
        "predict",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        s(&dir.path().join("nope.png")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.png"));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nlayers = 2\nlayer_count = 3\n").unwrap();
    let o = lsenet(&["summary", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(
        err.contains("bad.toml") && err.contains("line 3") && err.contains("layer_count"),
        "{err}"
    );

    let o = lsenet(&["summary", "--patch-size", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("patch_size"), "{}", stderr(&o));

    assert_eq!(code(&lsenet(&["summary", "--no-such-flag"])), 2);
    assert_eq!(code(&lsenet(&["summary", "--device-threads", "0"])), 2);
}

#[test]
fn synth_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let write = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = lsenet(&[
            "synth",
            "--config",
            s(&cfg),
            "--seed",
            seed,
            "--size",
            "32",
            "--out-dir",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b, c) = (write("a", "5"), write("b", "5"), write("c", "6"));
    let img = "train/images/synth_00001.png";
    assert_eq!(
        fs::read(a.join(img)).unwrap(),
        fs::read(b.join(img)).unwrap()
    );
    assert_ne!(
        fs::read(a.join(img)).unwrap(),
        fs::read(c.join(img)).unwrap()
    );
    assert_eq!(fs::read_dir(a.join("test/masks")).unwrap().count(), 3);
}
