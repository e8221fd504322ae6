use crate::element::Element;
use crate::error::{arg_err, Result, TensorError};
use crate::ops::elementwise::{BinaryKind, UnaryKind};
use crate::ops::spatial::PoolKind;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation and whatever it needs for its backward rule.
pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Affine {
        a: Var,
        scale: T,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Clamp {
        a: Var,
        lo: T,
        hi: T,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanLast {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Pad2d {
        a: Var,
        pads: [usize; 4],
    },
    Crop2d {
        a: Var,
        pads: [usize; 4],
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => kind.name(),
            Op::Affine { .. } => "affine",
            Op::Unary { kind, .. } => kind.name(),
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanLast { .. } => "mean_lastdim",
            Op::Softmax { .. } => "softmax_lastdim",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Pad2d { .. } => "pad2d",
            Op::Crop2d { .. } => "crop2d",
            Op::Matmul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Pool { .. } => "pool2d",
            Op::Resize { .. } => "resize_bilinear",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    grad: Option<Tensor<T>>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// Define-by-run tape.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
    flops: u64,
    check_finite: bool,
    visits: usize,
    branches: Option<u64>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
            check_finite: false,
            visits: 0,
            branches: None,
        }
    }

    /// Start fingerprinting the branch taken by every piecewise op (ReLU
    /// sign, clamp region, max-pool argmax).
    pub fn set_track_branches(&mut self, on: bool) {
        self.branches = on.then_some(FNV_OFFSET);
    }

    /// Fingerprint of the branches taken so far, if tracking is on. Two
    /// evaluations with equal fingerprints ran through the same smooth piece.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    fn note_branches(&mut self, op: &Op<T>) {
        let Some(mut h) = self.branches else {
            return;
        };
        let mut mix = |code: u64| {
            h ^= code;
            h = h.wrapping_mul(FNV_PRIME);
        };
        match op {
            Op::Unary {
                kind: UnaryKind::Relu,
                a,
            } => {
                for &v in self.nodes[a.0].value.data() {
                    mix((v > T::zero()) as u64);
                }
            }
            Op::Clamp { a, lo, hi } => {
                for &v in self.nodes[a.0].value.data() {
                    mix(if v < *lo {
                        0
                    } else if v > *hi {
                        2
                    } else {
                        1
                    });
                }
            }
            Op::Pool { argmax, .. } => {
                for &i in argmax {
                    mix(i as u64);
                }
            }
            _ => return,
        }
        self.branches = Some(h);
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations executed by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Records a tensor with no history.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Number of nodes whose backward rule ran in the last [`backward`](Self::backward).
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
        flops: u64,
    ) -> Result<Var> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let node = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node,
            });
        }
        self.flops += flops;
        self.note_branches(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(node))
    }

    /// Reverse sweep from a scalar `loss`, filling the gradient of every
    /// node that depends on a gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        self.visits = 0;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.visits += 1;
            for (input, contrib) in self.backward_node(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let out = Var(i);
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => self.binary_backward(*kind, *a, *b, g),
            Op::Affine { a, scale } => vec![(*a, g.map(|v| v * *scale))],
            Op::Unary { kind, a } => vec![(*a, self.unary_backward(*kind, *a, out, g))],
            Op::Clamp { a, lo, hi } => vec![(*a, self.clamp_backward(*a, *lo, *hi, g))],
            Op::Sum { a } => vec![(*a, Tensor::full(self.shape(*a).to_vec(), g.item()))],
            Op::Mean { a } => {
                let n = T::lit(self.value(*a).numel() as f64);
                vec![(*a, Tensor::full(self.shape(*a).to_vec(), g.item() / n))]
            }
            Op::MeanLast { a } => vec![(*a, self.mean_last_backward(*a, g))],
            Op::Softmax { a } => vec![(*a, self.softmax_backward(out, g))],
            Op::Reshape { a } => {
                vec![(
                    *a,
                    g.clone()
                        .reshape(self.shape(*a).to_vec())
                        .expect("reshape grad"),
                )]
            }
            Op::Permute { a, perm } => vec![(*a, crate::ops::shape::permute_inverse(g, perm))],
            Op::Concat { inputs, axis } => self.concat_backward(inputs, *axis, g),
            Op::Pad2d { a, pads } => vec![(*a, crate::ops::shape::crop_tensor(g, *pads))],
            Op::Crop2d { a, pads } => vec![(*a, crate::ops::shape::pad_tensor(g, *pads))],
            Op::Matmul { a, b } => self.matmul_backward(*a, *b, g),
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, mean, rstd, g),
            Op::Pool {
                x,
                kind,
                window,
                stride,
                argmax,
            } => {
                vec![(
                    *x,
                    self.pool_backward(*x, *kind, *window, *stride, argmax, g),
                )]
            }
            Op::Resize { x } => vec![(*x, self.resize_backward(*x, g))],
        }
    }
}
