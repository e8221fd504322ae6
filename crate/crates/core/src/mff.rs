//! Multiscale feature fusion encoder stage.

use lsenet_tensor::{Element, Graph, Var};

use crate::blocks::{ConvBlockParams, LinearParams};
use crate::error::{arg_err, dim_err, Result};
use crate::params::{Bound, Builder};

pub const CA_REDUCTION: usize = 16;

/// Squeeze-and-excitation gate: global mean -> dense -> ReLU -> dense ->
/// sigmoid -> per-channel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub squeeze: LinearParams,
    pub excite: LinearParams,
    pub channels: usize,
}

impl ChannelAttention {
    /// The excitation layer starts at zero so every gate opens at 0.5.
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        b.scope(name, |b| Self {
            squeeze: LinearParams::build(b, "squeeze", channels, hidden),
            excite: LinearParams::build_zero(b, "excite", hidden, channels),
            channels,
        })
    }

    pub fn hidden(&self) -> usize {
        self.squeeze.fan_out
    }

    pub fn param_count(&self) -> usize {
        let (c, h) = (self.channels, self.hidden());
        2 * c * h + h + c
    }
}

pub fn channel_attention<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    ca: &ChannelAttention,
    x: Var,
) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    if c != ca.channels {
        return dim_err(format!(
            "channel attention expects {} channels, got {c}",
            ca.channels
        ));
    }
    let flat = g.reshape(x, &[b, c, h * w])?;
    let m = g.mean_lastdim(flat)?;
    let z = ca.squeeze.forward(g, p, m)?;
    let z = g.relu(z)?;
    let z = ca.excite.forward(g, p, z)?;
    let gate = g.sigmoid(z)?;
    let gate = g.reshape(gate, &[b, c, 1, 1])?;
    Ok(g.mul(x, gate)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MffParams {
    pub pre: ConvBlockParams,
    pub branch_1: ConvBlockParams,
    pub branch_3: ConvBlockParams,
    pub branch_5: ConvBlockParams,
    pub ca: ChannelAttention,
    pub fuse_1x1: ConvBlockParams,
    pub out_3x3: ConvBlockParams,
    pub has_down: bool,
}

impl MffParams {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        channels: usize,
        has_down: bool,
    ) -> Self {
        let c = channels;
        b.scope(name, |b| Self {
            pre: ConvBlockParams::build(b, "pre", in_channels, c, 3),
            branch_1: ConvBlockParams::build(b, "branch_1", c, c, 1),
            branch_3: ConvBlockParams::build(b, "branch_3", c, c, 3),
            branch_5: ConvBlockParams::build(b, "branch_5", c, c, 5),
            ca: ChannelAttention::build(b, "ca", 3 * c, CA_REDUCTION),
            fuse_1x1: ConvBlockParams::build(
                b,
                "fuse_1x1",
                if has_down { 4 * c } else { 3 * c },
                c,
                1,
            ),
            out_3x3: ConvBlockParams::build(b, "out_3x3", c, c, 3),
            has_down,
        })
    }

    pub fn param_count(&self) -> usize {
        [
            &self.pre,
            &self.branch_1,
            &self.branch_3,
            &self.branch_5,
            &self.fuse_1x1,
            &self.out_3x3,
        ]
        .iter()
        .map(|c| c.param_count())
        .sum::<usize>()
            + self.ca.param_count()
    }
}

/// Intermediate maps of one stage, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct MffTrace {
    pub multi: Var,
    pub attended: Var,
    pub out: Var,
}

pub fn mff_forward_traced<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &MffParams,
    x_in: Var,
    x_down: Option<Var>,
) -> Result<MffTrace> {
    let (_, _, h, w) = g.value(x_in).dims4()?;
    match (x_down, params.has_down) {
        (Some(d), true) => {
            let (_, _, hd, wd) = g.value(d).dims4()?;
            if (hd, wd) != (h, w) {
                return dim_err(format!(
                    "raw input at {h}x{w} but encoder features at {hd}x{wd}"
                ));
            }
        }
        (None, false) => {}
        (Some(_), false) => return arg_err("first stage takes no encoder features"),
        (None, true) => return arg_err("inner stage requires encoder features"),
    }
    let pre = params.pre.forward(g, p, x_in)?;
    let b1 = params.branch_1.forward(g, p, pre)?;
    let b3 = params.branch_3.forward(g, p, pre)?;
    let b5 = params.branch_5.forward(g, p, pre)?;
    let multi = g.concat_channels(&[b1, b3, b5])?;
    let attended = channel_attention(g, p, &params.ca, multi)?;
    let cat = match x_down {
        Some(d) => g.concat_channels(&[attended, d])?,
        None => attended,
    };
    let fused = params.fuse_1x1.forward(g, p, cat)?;
    let out = params.out_3x3.forward(g, p, fused)?;
    Ok(MffTrace {
        multi,
        attended,
        out,
    })
}

pub fn mff_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &MffParams,
    x_in: Var,
    x_down: Option<Var>,
) -> Result<Var> {
    Ok(mff_forward_traced(g, p, params, x_in, x_down)?.out)
}

/// Two 3×3 conv blocks: the encoder stage used when fusion is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainStage {
    pub a: ConvBlockParams,
    pub b: ConvBlockParams,
}

impl PlainStage {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        b.scope(name, |b| Self {
            a: ConvBlockParams::build(b, "conv_a", cin, cout, 3),
            b: ConvBlockParams::build(b, "conv_b", cout, cout, 3),
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.a.forward(g, p, x)?;
        self.b.forward(g, p, y)
    }

    pub fn param_count(&self) -> usize {
        self.a.param_count() + self.b.param_count()
    }
}
