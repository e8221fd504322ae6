use lsenet_tensor::Tensor;

use super::{TrainConfig, TrainState};
use crate::error::{dim_err, Result};
use crate::params::ParamStore;

/// One Adam update with bias correction. Weight decay is decoupled:
/// `param -= lr·wd·param` precedes the moment update, and applies only to
/// weights and biases.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Tensor<f32>],
    state: &mut TrainState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return dim_err(format!(
            "{} parameters but {} gradients and {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.shape() != g.shape() || p.value.shape() != m.shape() {
            return dim_err(format!(
                "gradient {:?} does not match parameter {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let decay = if p.role.decays() {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m1 = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let v1 = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = m1 as f32;
            *vi = v1 as f32;
            let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 * decay - update) as f32;
        }
    }
    Ok(())
}
