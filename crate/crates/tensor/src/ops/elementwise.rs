//! Pointwise maps, broadcasting arithmetic, reductions and softmax.

use crate::element::Element;
use crate::error::{arg_err, dim_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Ln,
}

impl UnaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Ln => "ln",
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Strides of `small` viewed through `full`: right-aligned, zero on
/// broadcast axes.
fn broadcast_strides(full: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if small.len() > full.len() {
        return dim_err(format!("cannot broadcast {small:?} to {full:?}"));
    }
    let offset = full.len() - small.len();
    let ss = strides(small);
    let mut out = vec![0; full.len()];
    for (i, (&d, &s)) in small.iter().zip(&ss).enumerate() {
        let target = full[offset + i];
        if d == target {
            out[offset + i] = s;
        } else if d != 1 {
            return dim_err(format!("cannot broadcast {small:?} to {full:?}"));
        }
    }
    Ok(out)
}

/// Calls `f(i, j)` for every flat index `i` of `shape` and the matching
/// offset `j` under `bstr`.
fn walk_broadcast(shape: &[usize], bstr: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = shape.len();
    if r == 0 {
        f(0, 0);
        return;
    }
    let last = shape[r - 1];
    let ls = bstr[r - 1];
    let outer: usize = shape[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let mut boff = 0usize;
    for o in 0..outer {
        let base = o * last;
        for k in 0..last {
            f(base + k, boff + k * ls);
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            boff += bstr[d];
            if idx[d] < shape[d] {
                break;
            }
            boff -= bstr[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Element> Graph<T> {
    /// `a (op) b` where `b` broadcasts (numpy rules, right-aligned) to the
    /// shape of `a`.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = if av.shape() == bv.shape() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect()
        } else {
            let bstr = broadcast_strides(av.shape(), bv.shape())?;
            let mut out = vec![T::zero(); av.numel()];
            let (ad, bd) = (av.data(), bv.data());
            walk_broadcast(av.shape(), &bstr, |i, j| out[i] = kind.apply(ad[i], bd[j]));
            out
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let flops = value.numel() as u64;
        self.push(value, Op::Binary { kind, a, b }, &[a, b], flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let value = self.value(a).map(|v| s * v + t);
        let flops = value.numel() as u64;
        self.push(value, Op::Affine { a, scale: s }, &[a], flops)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let value = match kind {
            UnaryKind::Relu => self
                .value(a)
                .map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Sigmoid => self.value(a).map(sigmoid),
            UnaryKind::Ln => self.value(a).map(|v| v.ln()),
        };
        let flops = value.numel() as u64;
        self.push(value, Op::Unary { kind, a }, &[a], flops)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside that range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return arg_err(format!("clamp bounds reversed: {lo} > {hi}"));
        }
        let (l, h) = (T::lit(lo), T::lit(hi));
        let value = self.value(a).map(|v| v.max(l).min(h));
        let flops = value.numel() as u64;
        self.push(value, Op::Clamp { a, lo: l, hi: h }, &[a], flops)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let flops = av.numel() as u64;
        let value = Tensor::scalar(av.sum());
        self.push(value, Op::Sum { a }, &[a], flops)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.numel();
        if n == 0 {
            return arg_err("mean of an empty tensor");
        }
        let value = Tensor::scalar(av.sum() / T::lit(n as f64));
        self.push(value, Op::Mean { a }, &[a], n as u64)
    }

    /// Mean over the last axis, which is removed.
    pub fn mean_lastdim(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let Some((&l, lead)) = av.shape().split_last() else {
            return dim_err("mean_lastdim on a rank-0 tensor");
        };
        if l == 0 {
            return arg_err("mean_lastdim over an empty axis");
        }
        let inv = T::lit(1.0 / l as f64);
        let data = av
            .data()
            .chunks(l)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(lead.to_vec(), data)?;
        let flops = av.numel() as u64;
        self.push(value, Op::MeanLast { a }, &[a], flops)
    }

    /// Softmax along the last axis, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let Some(&l) = av.shape().last() else {
            return dim_err("softmax_lastdim on a rank-0 tensor");
        };
        if l == 0 {
            return arg_err("softmax_lastdim over an empty axis");
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(l) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let flops = 5 * value.numel() as u64;
        self.push(value, Op::Softmax { a }, &[a], flops)
    }

    pub(crate) fn binary_backward(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        g: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let av = self.value(a);
        let bv = self.value(b);
        let gd = g.data();
        let (ad, bd) = (av.data(), bv.data());
        let bstr = if av.shape() == bv.shape() {
            strides(av.shape())
        } else {
            broadcast_strides(av.shape(), bv.shape()).expect("checked in forward")
        };
        let mut out = Vec::with_capacity(2);
        if self.requires_grad(a) {
            let mut da = vec![T::zero(); av.numel()];
            match kind {
                BinaryKind::Add | BinaryKind::Sub => da.copy_from_slice(gd),
                BinaryKind::Mul => walk_broadcast(av.shape(), &bstr, |i, j| da[i] = gd[i] * bd[j]),
                BinaryKind::Div => walk_broadcast(av.shape(), &bstr, |i, j| da[i] = gd[i] / bd[j]),
            }
            out.push((a, Tensor::new(av.shape().to_vec(), da).expect("grad shape")));
        }
        if self.requires_grad(b) {
            let mut db = vec![T::zero(); bv.numel()];
            match kind {
                BinaryKind::Add => walk_broadcast(av.shape(), &bstr, |i, j| db[j] = db[j] + gd[i]),
                BinaryKind::Sub => walk_broadcast(av.shape(), &bstr, |i, j| db[j] = db[j] - gd[i]),
                BinaryKind::Mul => {
                    walk_broadcast(av.shape(), &bstr, |i, j| db[j] = db[j] + gd[i] * ad[i])
                }
                BinaryKind::Div => walk_broadcast(av.shape(), &bstr, |i, j| {
                    db[j] = db[j] - gd[i] * ad[i] / (bd[j] * bd[j])
                }),
            }
            out.push((b, Tensor::new(bv.shape().to_vec(), db).expect("grad shape")));
        }
        out
    }

    pub(crate) fn unary_backward(
        &self,
        kind: UnaryKind,
        a: Var,
        out: Var,
        g: &Tensor<T>,
    ) -> Tensor<T> {
        let x = self.value(a).data();
        let y = self.value(out).data();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| match kind {
                UnaryKind::Relu => {
                    if x[i] > T::zero() {
                        gi
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sigmoid => gi * y[i] * (T::one() - y[i]),
                UnaryKind::Ln => gi / x[i],
            })
            .collect();
        Tensor::new(g.shape().to_vec(), data).expect("grad shape")
    }

    pub(crate) fn clamp_backward(&self, a: Var, lo: T, hi: T, g: &Tensor<T>) -> Tensor<T> {
        let x = self.value(a).data();
        let data = g
            .data()
            .iter()
            .zip(x)
            .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { T::zero() })
            .collect();
        Tensor::new(g.shape().to_vec(), data).expect("grad shape")
    }

    pub(crate) fn mean_last_backward(&self, a: Var, g: &Tensor<T>) -> Tensor<T> {
        let shape = self.shape(a).to_vec();
        let l = *shape.last().expect("rank >= 1");
        let inv = T::lit(1.0 / l as f64);
        let mut data = Vec::with_capacity(g.numel() * l);
        for &gi in g.data() {
            data.extend(std::iter::repeat_n(gi * inv, l));
        }
        Tensor::new(shape, data).expect("grad shape")
    }

    pub(crate) fn softmax_backward(&self, out: Var, g: &Tensor<T>) -> Tensor<T> {
        let y = self.value(out);
        let l = *y.shape().last().expect("rank >= 1");
        let mut data = vec![T::zero(); y.numel()];
        for ((dx, yr), gr) in data
            .chunks_mut(l)
            .zip(y.data().chunks(l))
            .zip(g.data().chunks(l))
        {
            let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for k in 0..l {
                dx[k] = yr[k] * (gr[k] - s);
            }
        }
        Tensor::new(y.shape().to_vec(), data).expect("grad shape")
    }
}
