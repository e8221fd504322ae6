use std::path::PathBuf;

use lsenet_tensor::{Graph, Tensor, TensorError};
use rand::seq::SliceRandom;

use super::{adam_step, poly_lr, HistoryRow, TrainConfig, TrainState};
use crate::checkpoint::save_checkpoint;
use crate::data::{augment, SamplePair};
use crate::error::{arg_err, dim_err, LsenetError, Result};
use crate::loss::combined_loss_from_logits;
use crate::metrics::{
    confusion_counts, metrics_from_counts, ConfusionCounts, MetricReport, THRESHOLD,
};
use crate::network::LsenetModel;
use crate::params::ParamStore;
use crate::seed::{rng_for, stream};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Receives `last.ckpt` after every epoch and `best.ckpt` on improvement.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a saved state; the model must hold the matching weights.
    pub resume: Option<TrainState>,
    /// Return after this many epochs even if the schedule has more.
    pub max_epochs: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&HistoryRow)>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<HistoryRow>,
    pub state: TrainState,
    /// Weights of the best validation epoch seen during this call.
    pub best: Option<ParamStore<f32>>,
    pub stopped_early: bool,
}

/// Stacks `[1,H,W]` images and masks into `[B,1,H,W]` batches.
pub fn stack_batch(pairs: &[SamplePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let Some(first) = pairs.first() else {
        return arg_err("empty batch");
    };
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(pairs.len() * h * w);
    let mut msk = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if (p.height(), p.width()) != (h, w) {
            return dim_err(format!(
                "sample {} is {}x{}, batch expects {h}x{w}",
                p.id,
                p.height(),
                p.width()
            ));
        }
        img.extend_from_slice(p.image.data());
        msk.extend_from_slice(p.mask.data());
    }
    let shape = [pairs.len(), 1, h, w];
    Ok((Tensor::new(shape, img)?, Tensor::new(shape, msk)?))
}

/// Sigmoid probabilities `[1,H,W]` for one `[1,H,W]` image.
pub fn predict_probs(model: &LsenetModel<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return dim_err(format!("expected a [C,H,W] image, got {s:?}"));
    }
    let x = Tensor::new([1, s[0], s[1], s[2]], image.data().to_vec())?;
    let logits = model.infer(&x)?;
    Ok(Tensor::new(
        [1, s[1], s[2]],
        logits
            .data()
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect(),
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: String,
    pub counts: ConfusionCounts,
    pub report: MetricReport,
}

pub fn evaluate(model: &LsenetModel<f32>, pairs: &[SamplePair]) -> Result<Vec<SampleEval>> {
    pairs
        .iter()
        .map(|p| {
            let probs = predict_probs(model, &p.image)?;
            let counts = confusion_counts(probs.data(), p.mask.data(), THRESHOLD)?;
            Ok(SampleEval {
                id: p.id.clone(),
                counts,
                report: metrics_from_counts(counts)?,
            })
        })
        .collect()
}

/// Mean per-sample Dice at the 0.5 threshold.
pub fn validation_dice(model: &LsenetModel<f32>, pairs: &[SamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return arg_err("empty validation set");
    }
    let evals = evaluate(model, pairs)?;
    Ok(evals.iter().map(|e| e.report.dice).sum::<f64>() / evals.len() as f64)
}

/// Trains with Dice on `val` as the selection score. An empty `val` disables
/// selection and early stopping.
pub fn fit(
    model: &mut LsenetModel<f32>,
    train: &[SamplePair],
    val: &[SamplePair],
    cfg: &TrainConfig,
    opts: FitOptions<'_>,
) -> Result<FitOutcome> {
    if val.is_empty() {
        fit_with(model, train, cfg, opts, |_| Ok(None))
    } else {
        fit_with(model, train, cfg, opts, |m| {
            validation_dice(m, val).map(Some)
        })
    }
}

/// [`fit`] with a caller-supplied validation score.
pub fn fit_with(
    model: &mut LsenetModel<f32>,
    train: &[SamplePair],
    cfg: &TrainConfig,
    mut opts: FitOptions<'_>,
    mut score: impl FnMut(&LsenetModel<f32>) -> Result<Option<f64>>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return arg_err("empty training set");
    }
    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.m.len() != model.params.len()
                || s.m
                    .iter()
                    .zip(model.params.iter())
                    .any(|(m, p)| m.shape() != p.value.shape())
            {
                return dim_err("resumed optimizer state does not match the model parameters");
            }
            s
        }
        None => TrainState::new(&model.params, cfg.seed),
    };
    let mut best = None;
    let mut stopped_early = state.should_stop(cfg.patience);
    let mut ran = 0;
    while !stopped_early && state.epoch < cfg.epochs && opts.max_epochs.is_none_or(|n| ran < n) {
        let epoch = state.epoch;
        let lr = poly_lr(epoch, cfg)?;
        let train_loss = run_epoch(model, train, cfg, &mut state, epoch, lr)?;
        let val_dice = score(model)?;
        let improved = match val_dice {
            Some(d) => state.observe(epoch, d),
            None => false,
        };
        let row = HistoryRow {
            epoch,
            lr,
            train_loss,
            val_dice: val_dice.unwrap_or(f64::NAN),
        };
        state.history.push(row);
        state.epoch += 1;
        ran += 1;
        if improved {
            best = Some(model.params.clone());
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if improved {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), model, None)?;
            }
            save_checkpoint(&dir.join(LAST_CHECKPOINT), model, Some(&state))?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
        stopped_early = val_dice.is_some() && state.should_stop(cfg.patience);
    }
    Ok(FitOutcome {
        history: state.history.clone(),
        state,
        best,
        stopped_early,
    })
}

fn run_epoch(
    model: &mut LsenetModel<f32>,
    train: &[SamplePair],
    cfg: &TrainConfig,
    state: &mut TrainState,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let mut rng = rng_for(state.seed, stream::EPOCH + epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut batches = 0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let pairs: Vec<SamplePair> = chunk
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment(&train[i], &mut rng)
                } else {
                    train[i].clone()
                }
            })
            .collect();
        let (images, masks) = stack_batch(&pairs)?;
        let (loss, grads) =
            loss_and_grads(model, images, masks).map_err(|e| diagnose(e, model, epoch, bi))?;
        if let Some((p, _)) = model
            .params
            .iter()
            .zip(&grads)
            .find(|(_, g)| !g.is_finite())
        {
            return Err(LsenetError::NonFinite(format!(
                "epoch {epoch} batch {bi}: gradient of `{}` is not finite",
                p.name
            )));
        }
        adam_step(&mut model.params, &grads, state, lr, cfg)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn loss_and_grads(
    model: &LsenetModel<f32>,
    images: Tensor<f32>,
    masks: Tensor<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    g.set_check_finite(true);
    let p = model.bind(&mut g, true);
    let x = g.constant(images);
    let t = g.constant(masks);
    let logits = model.forward(&mut g, &p, x)?;
    let loss = combined_loss_from_logits(&mut g, logits, t)?;
    g.backward(loss)?;
    let value = g.value(loss).item() as f64;
    let grads = p
        .vars()
        .iter()
        .zip(model.params.iter())
        .map(|(&v, prm)| {
            g.take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(prm.value.shape().to_vec()))
        })
        .collect();
    Ok((value, grads))
}

/// Names the first non-finite tensor: a parameter if one is already bad,
/// otherwise the first op whose output went non-finite.
fn diagnose(e: LsenetError, model: &LsenetModel<f32>, epoch: usize, batch: usize) -> LsenetError {
    let LsenetError::Tensor(TensorError::NonFinite { op, node }) = e else {
        return e;
    };
    let what = match model.params.iter().find(|p| !p.value.is_finite()) {
        Some(p) => format!("parameter `{}`", p.name),
        None => format!("output of `{op}` (graph node {node})"),
    };
    LsenetError::NonFinite(format!(
        "epoch {epoch} batch {batch}: first non-finite tensor is the {what}"
    ))
}
