//! Convolution blocks and dense layers shared by the encoder, skips and decoder.

use lsenet_tensor::{Element, Graph, Var};

use crate::error::Result;
use crate::params::{Bound, Builder, ParamId, ParamRole};

/// Channels per GroupNorm group.
pub const GN_GROUP_SIZE: usize = 8;
pub const GN_EPS: f64 = 1e-5;

/// conv -> GroupNorm -> ReLU with "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvBlockParams {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        assert!(
            cout.is_multiple_of(GN_GROUP_SIZE),
            "conv block width {cout} is not a multiple of {GN_GROUP_SIZE}"
        );
        assert!(k % 2 == 1, "conv block kernel {k} must be odd");
        b.scope(name, |b| Self {
            kernel: b.he_uniform("kernel", &[cout, cin, k, k], cin * k * k),
            bias: b.zeros("bias", &[cout], ParamRole::Bias),
            gamma: b.ones("gn_gamma", &[cout], ParamRole::NormScale),
            beta: b.zeros("gn_beta", &[cout], ParamRole::NormShift),
            cin,
            cout,
            k,
        })
    }

    pub fn groups(&self) -> usize {
        self.cout / GN_GROUP_SIZE
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.kernel], Some(p[self.bias]), 1, self.k / 2)?;
        let y = g.group_norm(y, self.groups(), p[self.gamma], p[self.beta], GN_EPS)?;
        Ok(g.relu(y)?)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + 3 * self.cout
    }
}

/// Dense map over the last axis, weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearParams {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.he_uniform("weight", &[fan_out, fan_in], fan_in),
            bias: b.zeros("bias", &[fan_out], ParamRole::Bias),
            fan_in,
            fan_out,
        })
    }

    pub fn build_zero<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.zeros("weight", &[fan_out, fan_in], ParamRole::Weight),
            bias: b.zeros("bias", &[fan_out], ParamRole::Bias),
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.weight], Some(p[self.bias]))?)
    }
}

/// Plain convolution with optional bias and "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvParams {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        b.scope(name, |b| Self {
            kernel: b.he_uniform("kernel", &[cout, cin, k, k], cin * k * k),
            bias: bias.then(|| b.zeros("bias", &[cout], ParamRole::Bias)),
            cin,
            cout,
            k,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p[self.kernel], self.bias.map(|b| p[b]), 1, self.k / 2)?)
    }
}
