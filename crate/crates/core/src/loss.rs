//! Binary cross-entropy plus soft Dice, built from differentiable graph ops.

use lsenet_tensor::{Element, Graph, Var};

use crate::error::{dim_err, Result};

pub const BCE_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

fn same_shape<T: Element>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return dim_err(format!(
            "prediction {:?} and target {:?} differ",
            g.shape(a),
            g.shape(b)
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target)?;
    let p = g.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = g.ln(p)?;
    let q = g.affine(p, -1.0, 1.0)?;
    let log_q = g.ln(q)?;
    let pos = g.mul(target, log_p)?;
    let not_t = g.affine(target, -1.0, 1.0)?;
    let neg = g.mul(not_t, log_q)?;
    let s = g.add(pos, neg)?;
    let m = g.mean(s)?;
    Ok(g.scale(m, -1.0)?)
}

/// `1 - (2·Σ p·t + s) / (Σ p + Σ t + s)` over every element.
pub fn dice_loss_smoothed<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    smooth: f64,
) -> Result<Var> {
    same_shape(g, pred, target)?;
    let pt = g.mul(pred, target)?;
    let inter = g.sum(pt)?;
    let num = g.affine(inter, 2.0, smooth)?;
    let sp = g.sum(pred)?;
    let st = g.sum(target)?;
    let den = g.add(sp, st)?;
    let den = g.affine(den, 1.0, smooth)?;
    let ratio = g.div(num, den)?;
    Ok(g.affine(ratio, -1.0, 1.0)?)
}

pub fn dice_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    dice_loss_smoothed(g, pred, target, DICE_SMOOTH)
}

/// BCE + Dice on probabilities, weighted 1:1.
pub fn combined_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let b = bce_loss(g, pred, target)?;
    let d = dice_loss(g, pred, target)?;
    Ok(g.add(b, d)?)
}

/// Applies the sigmoid to a logit map, then [`combined_loss`].
pub fn combined_loss_from_logits<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    target: Var,
) -> Result<Var> {
    let p = g.sigmoid(logits)?;
    combined_loss(g, p, target)
}
