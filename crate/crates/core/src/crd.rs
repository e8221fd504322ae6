//! Connectivity refinement decoder stage and output heads.

use lsenet_tensor::{Element, Graph, Var};

use crate::blocks::{ConvBlockParams, ConvParams};
use crate::error::{dim_err, Result};
use crate::params::{Bound, Builder};

pub const OUT_KERNEL: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct CrdParams {
    pub refine_1x1: ConvBlockParams,
    pub conv_a: ConvBlockParams,
    pub conv_b: ConvBlockParams,
}

impl CrdParams {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let c = channels;
        b.scope(name, |b| Self {
            refine_1x1: ConvBlockParams::build(b, "refine_1x1", 2 * c, c, 1),
            conv_a: ConvBlockParams::build(b, "conv_a", c, c, 3),
            conv_b: ConvBlockParams::build(b, "conv_b", c, c, 3),
        })
    }

    pub fn param_count(&self) -> usize {
        self.refine_1x1.param_count() + self.conv_a.param_count() + self.conv_b.param_count()
    }
}

fn same_shape<T: Element>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return dim_err(format!(
            "decoder inputs differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        ));
    }
    Ok(())
}

pub fn crd_stage<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &CrdParams,
    x_up: Var,
    x_skip: Var,
) -> Result<Var> {
    same_shape(g, x_up, x_skip)?;
    let cat = g.concat_channels(&[x_up, x_skip])?;
    let r = params.refine_1x1.forward(g, p, cat)?;
    let a = params.conv_a.forward(g, p, r)?;
    params.conv_b.forward(g, p, a)
}

/// Standard decoder stage: concat then two 3×3 blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainDecoder {
    pub conv_a: ConvBlockParams,
    pub conv_b: ConvBlockParams,
}

impl PlainDecoder {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let c = channels;
        b.scope(name, |b| Self {
            conv_a: ConvBlockParams::build(b, "conv_a", 2 * c, c, 3),
            conv_b: ConvBlockParams::build(b, "conv_b", c, c, 3),
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_up: Var,
        x_skip: Var,
    ) -> Result<Var> {
        same_shape(g, x_up, x_skip)?;
        let cat = g.concat_channels(&[x_up, x_skip])?;
        let a = self.conv_a.forward(g, p, cat)?;
        self.conv_b.forward(g, p, a)
    }

    pub fn param_count(&self) -> usize {
        self.conv_a.param_count() + self.conv_b.param_count()
    }
}

/// Final projection to one logit channel: 11×11 without bias, or 1×1 with
/// bias for the plain decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct OutConvParams {
    pub conv: ConvParams,
}

impl OutConvParams {
    pub fn large<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        Self {
            conv: ConvParams::build(b, name, channels, 1, OUT_KERNEL, false),
        }
    }

    pub fn pointwise<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        Self {
            conv: ConvParams::build(b, name, channels, 1, 1, true),
        }
    }

    pub fn param_count(&self) -> usize {
        let c = &self.conv;
        c.cout * c.cin * c.k * c.k + if c.bias.is_some() { c.cout } else { 0 }
    }
}

pub fn out_conv<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &OutConvParams,
    x: Var,
) -> Result<Var> {
    let c = g.value(x).dims4()?.1;
    if c != params.conv.cin {
        return dim_err(format!(
            "output head expects {} channels, got {c}",
            params.conv.cin
        ));
    }
    params.conv.forward(g, p, x)
}
