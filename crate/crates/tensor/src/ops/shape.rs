//! Data-movement ops: reshape, axis permutation, concatenation and
//! spatial zero-padding / cropping.

use crate::element::Element;
use crate::error::{arg_err, dim_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{strides, Tensor};

/// Amounts to pad or crop on the last two axes: top, bottom, left, right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            bottom,
            left,
            right,
        }
    }

    /// Validates signed amounts, as they arrive from configuration.
    pub fn from_signed(top: i64, bottom: i64, left: i64, right: i64) -> Result<Self> {
        let conv = |v: i64, name: &str| {
            usize::try_from(v).or_else(|_| arg_err(format!("negative {name} amount {v}")))
        };
        Ok(Self {
            top: conv(top, "top")?,
            bottom: conv(bottom, "bottom")?,
            left: conv(left, "left")?,
            right: conv(right, "right")?,
        })
    }

    pub fn uniform(p: usize) -> Self {
        Self::new(p, p, p, p)
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    fn as_array(self) -> [usize; 4] {
        [self.top, self.bottom, self.left, self.right]
    }
}

/// Splits a total pad `d` as `floor(d/2)` before and `ceil(d/2)` after.
pub fn symmetric_split(total: usize) -> (usize, usize) {
    (total / 2, total - total / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    PadZero,
    Crop,
}

pub(crate) fn pad_tensor<T: Element>(x: &Tensor<T>, [t, b, l, r]: [usize; 4]) -> Tensor<T> {
    let shape = x.shape();
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    let (ho, wo) = (h + t + b, w + l + r);
    let lead: usize = shape[..n - 2].iter().product();
    let mut out = vec![T::zero(); lead * ho * wo];
    for p in 0..lead {
        for y in 0..h {
            let src = &x.data()[(p * h + y) * w..][..w];
            out[(p * ho + y + t) * wo + l..][..w].copy_from_slice(src);
        }
    }
    let mut os = shape.to_vec();
    os[n - 2] = ho;
    os[n - 1] = wo;
    Tensor::new(os, out).expect("pad shape")
}

pub(crate) fn crop_tensor<T: Element>(x: &Tensor<T>, [t, b, l, r]: [usize; 4]) -> Tensor<T> {
    let shape = x.shape();
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    let (ho, wo) = (h - t - b, w - l - r);
    let lead: usize = shape[..n - 2].iter().product();
    let mut out = Vec::with_capacity(lead * ho * wo);
    for p in 0..lead {
        for y in 0..ho {
            out.extend_from_slice(&x.data()[(p * h + y + t) * w + l..][..wo]);
        }
    }
    let mut os = shape.to_vec();
    os[n - 2] = ho;
    os[n - 1] = wo;
    Tensor::new(os, out).expect("crop shape")
}

fn permute_tensor<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let r = shape.len();
    let in_str = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if r == 0 || n == 0 {
        return Tensor::new(out_shape, x.data().to_vec()).expect("permute shape");
    }
    let last = out_shape[r - 1];
    let ls = src_str[r - 1];
    let outer = n / last;
    let mut idx = vec![0usize; r - 1];
    let mut off = 0usize;
    let src = x.data();
    for _ in 0..outer {
        out.extend((0..last).map(|k| src[off + k * ls]));
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            off += src_str[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_str[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}

pub(crate) fn permute_inverse<T: Element>(g: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    permute_tensor(g, &inv)
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] => Ok((*h, *w)),
        _ => dim_err(format!("spatial op needs rank >= 2, got {shape:?}")),
    }
}

impl<T: Element> Graph<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { a }, &[a], 0)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let r = self.shape(a).len();
        let mut seen = vec![false; r];
        if perm.len() != r
            || perm
                .iter()
                .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return arg_err(format!("{perm:?} is not a permutation of {r} axes"));
        }
        let value = permute_tensor(self.value(a), perm);
        self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
            0,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return dim_err("transpose_last needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return arg_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return dim_err(format!(
                    "concat shapes {base:?} and {s:?} differ off axis {axis}"
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let blk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * blk..][..blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            0,
        )
    }

    /// Channel concatenation of NCHW maps.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 1)
    }

    pub fn pad2d(&mut self, a: Var, pad: Pad2d) -> Result<Var> {
        spatial_dims(self.shape(a))?;
        if pad.is_zero() {
            return Ok(a);
        }
        let value = pad_tensor(self.value(a), pad.as_array());
        self.push(
            value,
            Op::Pad2d {
                a,
                pads: pad.as_array(),
            },
            &[a],
            0,
        )
    }

    pub fn crop2d(&mut self, a: Var, crop: Pad2d) -> Result<Var> {
        let (h, w) = spatial_dims(self.shape(a))?;
        if crop.top + crop.bottom > h || crop.left + crop.right > w {
            return arg_err(format!("crop {crop:?} exceeds spatial size {h}x{w}"));
        }
        if crop.is_zero() {
            return Ok(a);
        }
        let value = crop_tensor(self.value(a), crop.as_array());
        self.push(
            value,
            Op::Crop2d {
                a,
                pads: crop.as_array(),
            },
            &[a],
            0,
        )
    }

    pub fn pad_crop(&mut self, a: Var, amounts: Pad2d, mode: PadMode) -> Result<Var> {
        match mode {
            PadMode::PadZero => self.pad2d(a, amounts),
            PadMode::Crop => self.crop2d(a, amounts),
        }
    }

    pub(crate) fn concat_backward(
        &self,
        inputs: &[Var],
        axis: usize,
        g: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let shape = g.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis] * inner;
        let mut start = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let s = self.shape(v).to_vec();
            let blk = s[axis] * inner;
            if self.requires_grad(v) {
                let mut data = Vec::with_capacity(outer * blk);
                for o in 0..outer {
                    data.extend_from_slice(&g.data()[o * total + start..][..blk]);
                }
                out.push((v, Tensor::new(s, data).expect("concat grad")));
            }
            start += blk;
        }
        out
    }
}
