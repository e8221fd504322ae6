//! Central finite-difference check of graph gradients.

use crate::error::{arg_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Step for the central difference.
    pub eps: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    /// Leave out coordinates whose perturbation changes a ReLU, clamp or
    /// max-pool branch; the difference quotient then straddles a kink.
    pub skip_branch_changes: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            abs_floor: 1e-4,
            max_coords_per_param: None,
            skip_branch_changes: true,
        }
    }
}

/// Worst disagreement found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a kink.
    pub skipped: usize,
}

/// Compares the tape gradient of scalar `f` at `params` against central
/// differences and reports the largest relative error.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return arg_err(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.eps
        ));
    }
    let mut g = Graph::new();
    g.set_track_branches(true);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let center = g.branch_signature();
    if g.value(loss).numel() != 1 {
        return arg_err(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(loss)
        ));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::new();
        g.set_track_branches(true);
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.branch_signature()))
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let step = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(step) {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + opts.eps;
            let (up, sig_up) = eval(&work)?;
            work[pi].data_mut()[idx] = orig - opts.eps;
            let (down, sig_down) = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            if opts.skip_branch_changes && (sig_up != center || sig_down != center) {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[pi].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(Mismatch {
                    param: pi,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
