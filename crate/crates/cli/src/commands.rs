use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use lsenet::checkpoint::{load_checkpoint, save_checkpoint};
use lsenet::data::{
    load_dataset, load_gray_png, save_dataset, save_gray_png, synthetic_splits, SamplePair, Split,
};
use lsenet::loss::combined_loss_from_logits;
use lsenet::metrics::{confusion_counts, metrics_csv, metrics_from_counts, MetricRow, THRESHOLD};
use lsenet::seed::rng_for;
use lsenet::train::{
    evaluate, fit_with, history_csv, FitOptions, HistoryRow, SampleEval, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};
use lsenet::{count_flops, count_params, Bound, LsenetConfig, LsenetError, LsenetModel};
use lsenet_tensor::{grad_check_with, GradCheckOptions, Graph, Tensor, TensorError};

use crate::config::RunConfig;
use crate::CliError;

pub const CONFIG_ECHO: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STREAM: u64 = 0x6763;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates the output directory and records the effective configuration.
fn prepare_out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg.run.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join(CONFIG_ECHO), &cfg.to_toml())?;
    Ok(dir)
}

fn dataset_name(cfg: &RunConfig) -> String {
    match &cfg.run.data {
        Some(root) => root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string()),
        None => "synthetic".into(),
    }
}

/// One split, min-max normalized. A missing optional split on disk is empty.
fn load_split(cfg: &RunConfig, split: Split, required: bool) -> Result<Vec<SamplePair>, CliError> {
    let pairs = if cfg.run.synthetic {
        let mut counts = [0; 3];
        let i = Split::ALL.iter().position(|&s| s == split).expect("listed");
        counts[i] = cfg.split_counts()[i];
        let [a, b, c] = synthetic_splits(&cfg.synth(), cfg.run.seed, counts)?;
        [a, b, c].into_iter().nth(i).expect("three splits")
    } else {
        let Some(root) = &cfg.run.data else {
            return Err(CliError::usage(
                "no dataset: pass --data DIR or --synthetic",
            ));
        };
        if !required && !root.join(split.as_str()).exists() {
            Vec::new()
        } else {
            load_dataset(root, split)?
        }
    };
    Ok(pairs.iter().map(SamplePair::normalized).collect())
}

/// Evaluates contiguous chunks on separate threads; results keep input order.
fn evaluate_parallel(
    model: &LsenetModel<f32>,
    pairs: &[SamplePair],
    threads: usize,
) -> lsenet::Result<Vec<SampleEval>> {
    let threads = threads.clamp(1, pairs.len().max(1));
    if threads == 1 {
        return evaluate(model, pairs);
    }
    let chunk = pairs.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| s.spawn(move || evaluate(model, c)))
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().expect("evaluation thread panicked")?);
        }
        Ok(out)
    })
}

fn mean_dice(evals: &[SampleEval]) -> f64 {
    evals.iter().map(|e| e.report.dice).sum::<f64>() / evals.len() as f64
}

/// Fails on the first architecture field where the two disagree. The seed
/// only affects initialization and is not compared.
pub fn check_compatible(ckpt: &LsenetConfig, want: &LsenetConfig) -> Result<(), CliError> {
    for ((key, have), (_, expect)) in ckpt.to_pairs().into_iter().zip(want.to_pairs()) {
        if key != "seed" && have != expect {
            return Err(CliError::usage(format!(
                "checkpoint does not match the configuration: model.{key} is {have} in the checkpoint but {expect} in the configuration"
            )));
        }
    }
    Ok(())
}

pub fn load_model(
    path: &Path,
    cfg: &RunConfig,
    pinned: bool,
) -> Result<LsenetModel<f32>, CliError> {
    let (model, _) = load_checkpoint(path)?;
    if pinned {
        check_compatible(&model.config, &cfg.model())?;
    }
    Ok(model)
}

fn report_metrics(cfg: &RunConfig, dir: &Path, evals: &[SampleEval]) -> Result<(), CliError> {
    let dataset = dataset_name(cfg);
    let rows: Vec<MetricRow> = evals
        .iter()
        .map(|e| MetricRow {
            dataset: dataset.clone(),
            sample: e.id.clone(),
            report: e.report,
        })
        .collect();
    let csv = metrics_csv(&rows)?;
    print!("{csv}");
    write(&dir.join(METRICS_FILE), &csv)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let dir = prepare_out_dir(cfg)?;
    let train = load_split(cfg, Split::Train, true)?;
    if train.is_empty() {
        return Err(CliError::usage("the training split is empty"));
    }
    let val = load_split(cfg, Split::Val, false)?;
    let test = load_split(cfg, Split::Test, false)?;
    let tc = cfg.train();

    let (mut model, state) = if resume {
        let path = dir.join(LAST_CHECKPOINT);
        let (model, state) = load_checkpoint(&path)?;
        check_compatible(&model.config, &cfg.model())?;
        let state = state.ok_or_else(|| {
            CliError::usage(format!("{}: holds no training state", path.display()))
        })?;
        (model, Some(state))
    } else {
        // a fresh run must not pick up an older run's selection
        for name in [BEST_CHECKPOINT, LAST_CHECKPOINT, FINAL_CHECKPOINT] {
            let path = dir.join(name);
            if path.exists() {
                fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
            }
        }
        (LsenetModel::build(&cfg.model())?, None)
    };
    eprintln!(
        "training {} parameters on {} samples ({} val, {} test)",
        model.param_count(),
        train.len(),
        val.len(),
        test.len()
    );

    let threads = cfg.run.device_threads;
    let epochs = tc.epochs;
    let mut progress = |r: &HistoryRow| {
        eprintln!(
            "epoch {:>4}/{epochs}  lr {:.3e}  loss {:.4}  val_dice {:.4}",
            r.epoch + 1,
            r.lr,
            r.train_loss,
            r.val_dice
        )
    };
    let opts = FitOptions {
        checkpoint_dir: Some(dir.to_path_buf()),
        resume: state,
        max_epochs: None,
        on_epoch: Some(&mut progress),
    };
    let outcome = fit_with(&mut model, &train, &tc, opts, |m| {
        if val.is_empty() {
            return Ok(None);
        }
        Ok(Some(mean_dice(&evaluate_parallel(m, &val, threads)?)))
    })?;
    write(&dir.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    if outcome.stopped_early {
        eprintln!(
            "stopped early: no validation improvement for {} epochs",
            tc.patience
        );
    }

    // best.ckpt may predate a resume, so read it back rather than trusting
    // this call's in-memory copy
    let best = dir.join(BEST_CHECKPOINT);
    if best.exists() {
        model = load_checkpoint(&best)?.0;
        eprintln!(
            "selected epoch {} (val dice {:.4})",
            outcome.state.best_epoch.map_or(0, |e| e + 1),
            outcome.state.best_val_dice
        );
    }
    save_checkpoint(&dir.join(FINAL_CHECKPOINT), &model, None)?;
    if !test.is_empty() {
        let evals = evaluate_parallel(&model, &test, threads)?;
        report_metrics(cfg, dir, &evals)?;
    }
    eprintln!("outputs in {}", dir.display());
    Ok(())
}

pub enum Predictor {
    Model(LsenetModel<f32>),
    /// The ground-truth mask stands in for the prediction.
    Masks,
}

pub fn eval(cfg: &RunConfig, split: Split, predictor: &Predictor) -> Result<(), CliError> {
    let pairs = load_split(cfg, split, true)?;
    if pairs.is_empty() {
        return Err(CliError::usage(format!("split `{split}` is empty")));
    }
    let dir = prepare_out_dir(cfg)?;
    let evals = match predictor {
        Predictor::Model(m) => evaluate_parallel(m, &pairs, cfg.run.device_threads)?,
        Predictor::Masks => pairs
            .iter()
            .map(|p| {
                let counts = confusion_counts(p.mask.data(), p.mask.data(), THRESHOLD)?;
                Ok(SampleEval {
                    id: p.id.clone(),
                    counts,
                    report: metrics_from_counts(counts)?,
                })
            })
            .collect::<lsenet::Result<_>>()?,
    };
    report_metrics(cfg, dir, &evals)
}

fn min_max(values: impl Iterator<Item = f32> + Clone) -> (f32, f32) {
    values
        .clone()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}

/// Channel-mean magnitude of a `[1,C,H,W]` map, scaled to `[0,1]`.
fn heatmap(map: &Tensor<f32>) -> Tensor<f32> {
    let s = map.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = vec![0.0f32; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&map.data()[ch * hw..(ch + 1) * hw]) {
            *o += v.abs() / c as f32;
        }
    }
    let (lo, hi) = min_max(out.iter().copied());
    if hi > lo {
        out.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        out.fill(0.0);
    }
    Tensor::new([1, s[2], s[3]], out).expect("sized above")
}

struct Prediction {
    probs: Tensor<f32>,
    heatmaps: Vec<Tensor<f32>>,
}

fn predict_one(model: &LsenetModel<f32>, image: &Tensor<f32>) -> lsenet::Result<Prediction> {
    let s = image.shape();
    let x = Tensor::new([1, s[0], s[1], s[2]], image.data().to_vec())?;
    let (logits, maps) = model.infer_traced(&x)?;
    let probs = Tensor::new(
        [1, s[1], s[2]],
        logits
            .data()
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect(),
    )?;
    Ok(Prediction {
        probs,
        heatmaps: maps.iter().flatten().map(heatmap).collect(),
    })
}

pub fn predict(
    cfg: &RunConfig,
    model: &LsenetModel<f32>,
    images: &[PathBuf],
    heatmaps: bool,
) -> Result<(), CliError> {
    let mut stems = HashSet::new();
    let mut inputs = Vec::with_capacity(images.len());
    for path in images {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::usage(format!("{}: not a file name", path.display())))?;
        if !stems.insert(stem.clone()) {
            return Err(CliError::usage(format!(
                "two inputs share the name `{stem}`"
            )));
        }
        let image = load_gray_png(path)?;
        let pair = SamplePair::new(image.clone(), image.map(|_| 0.0), stem)?;
        inputs.push(pair.normalized());
    }
    let dir = prepare_out_dir(cfg)?;
    let threads = cfg.run.device_threads.clamp(1, inputs.len());
    let chunk = inputs.len().div_ceil(threads);
    let results: Vec<Prediction> = thread::scope(|s| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|c| {
                s.spawn(move || {
                    c.iter()
                        .map(|p| predict_one(model, &p.image))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction thread panicked"))
            .collect::<lsenet::Result<_>>()
    })?;
    for (input, pred) in inputs.iter().zip(&results) {
        let id = &input.id;
        save_gray_png(&dir.join(format!("{id}_prob.png")), &pred.probs)?;
        let mask = pred
            .probs
            .map(|p| if p as f64 >= THRESHOLD { 1.0 } else { 0.0 });
        save_gray_png(&dir.join(format!("{id}_mask.png")), &mask)?;
        if heatmaps {
            for (l, h) in pred.heatmaps.iter().enumerate() {
                save_gray_png(&dir.join(format!("{id}_pie{l}.png")), h)?;
            }
        }
        let (lo, hi) = min_max(pred.probs.data().iter().copied());
        println!("{id}: probability range [{lo:.4}, {hi:.4}]");
    }
    eprintln!("outputs in {}", dir.display());
    Ok(())
}

pub fn summary(cfg: &RunConfig) -> Result<(), CliError> {
    let model = LsenetModel::<f32>::build(&cfg.model())?;
    let size = cfg.run.flop_size;
    let params = count_params(&model);
    let flops = count_flops(&model, size, size)?;
    let modules: BTreeSet<&String> = params
        .by_module
        .keys()
        .chain(flops.by_module.keys())
        .collect();
    println!("{:<14} {:>12} {:>12}", "module", "params", "GFLOPs");
    for m in modules {
        let p = params.by_module.get(m).copied().unwrap_or(0);
        let f = flops.by_module.get(m).map_or(0, |t| t.total());
        println!("{m:<14} {p:>12} {:>12.3}", f as f64 / 1e9);
    }
    println!(
        "{:<14} {:>12} {:>12.3}",
        "total",
        params.total,
        flops.total.total() as f64 / 1e9
    );
    println!("params: {:.4} M", params.total as f64 / 1e6);
    println!("flops: {flops}");
    Ok(())
}

/// `dims` is `[layers, channels, patch_size]`; module switches and the seed
/// come from the configuration.
pub fn gradcheck(
    cfg: &RunConfig,
    dims: [usize; 3],
    input_size: usize,
    coords: usize,
) -> Result<(), CliError> {
    let [layers, channels, patch_size] = dims;
    let mc = LsenetConfig {
        layers,
        channels,
        patch_size,
        ..cfg.model()
    };
    let mut model = LsenetModel::<f64>::build(&mc)?;
    model
        .params
        .randomize(&mut rng_for(cfg.run.seed, GRADCHECK_STREAM), 0.3);
    let sample = synthetic_splits(
        &lsenet::data::SynthConfig {
            size: input_size,
            ..cfg.synth()
        },
        cfg.run.seed,
        [1, 0, 0],
    )
    .map_err(|e| CliError::usage(format!("--input-size: {e}")))?;
    let pair = &sample[0][0];
    let shape = [1, 1, input_size, input_size];
    let image: Tensor<f64> = Tensor::new(shape, pair.image.data().to_vec())?.cast();
    let target: Tensor<f64> = Tensor::new(shape, pair.mask.data().to_vec())?.cast();

    let n = model.params.len();
    let mut inputs = model.params.values();
    inputs.push(image);
    let report = grad_check_with(
        |g, vars| {
            let p = Bound::from_vars(vars[..n].to_vec());
            let t = g.constant(target.clone());
            let run = |g: &mut Graph<f64>| -> lsenet::Result<_> {
                let y = model.forward(g, &p, vars[n])?;
                combined_loss_from_logits(g, y, t)
            };
            run(g).map_err(|e| match e {
                LsenetError::Tensor(t) => t,
                other => TensorError::Argument(other.to_string()),
            })
        },
        &inputs,
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: (coords > 0).then_some(coords),
            ..Default::default()
        },
    )
    .map_err(LsenetError::from)?;

    println!(
        "model: layers={layers} channels={channels} patch_size={patch_size} input {input_size}x{input_size}, {} parameters",
        model.param_count()
    );
    println!(
        "checked {} coordinates ({} straddling a ReLU/max-pool kink left out), max relative error {:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})",
        report.checked, report.skipped, report.max_rel_error
    );
    if let Some(w) = &report.worst {
        let name = model
            .params
            .iter()
            .nth(w.param)
            .map_or("input".to_string(), |p| p.name.clone());
        println!(
            "worst: {name}[{}] analytic {:.6e} numeric {:.6e}",
            w.index, w.analytic, w.numeric
        );
    }
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:.0e}",
            report.max_rel_error
        )))
    }
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = prepare_out_dir(cfg)?;
    let splits = synthetic_splits(&cfg.synth(), cfg.run.seed, cfg.split_counts())?;
    for (split, pairs) in Split::ALL.into_iter().zip(&splits) {
        save_dataset(dir, split, pairs)?;
        println!("{split}: {} pairs", pairs.len());
    }
    eprintln!("outputs in {}", dir.display());
    Ok(())
}
