use crate::element::Element;
use crate::error::{arg_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Source taps for one output coordinate under half-pixel-center bilinear
/// sampling: `(i0, i1, w0, w1)`.
fn taps(out: usize, len_in: usize, len_out: usize) -> (usize, usize, f64, f64) {
    let scale = len_in as f64 / len_out as f64;
    let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len_in - 1);
    let i1 = (i0 + 1).min(len_in - 1);
    let f = src - i0 as f64;
    (i0, i1, 1.0 - f, f)
}

impl<T: Element> Graph<T> {
    /// Windowed max/mean pooling over the spatial axes.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if window < 1 || stride < 1 {
            return arg_err(format!(
                "pool window {window} / stride {stride} must be >= 1"
            ));
        }
        if window == stride && (h % stride != 0 || w % stride != 0) {
            return arg_err(format!(
                "pool stride {stride} does not divide spatial size {h}x{w}"
            ));
        }
        if window > h || window > w {
            return arg_err(format!("pool window {window} exceeds spatial size {h}x{w}"));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::new();
        let inv = T::lit(1.0 / (window * window) as f64);
        for p in 0..b * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * stride, ox * stride);
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for yy in y0..y0 + window {
                                for xx in x0..x0 + window {
                                    let i = base + yy * w + xx;
                                    if xd[i] > xd[best] {
                                        best = i;
                                    }
                                }
                            }
                            out.push(xd[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let mut s = T::zero();
                            for yy in y0..y0 + window {
                                for v in &xd[base + yy * w + x0..][..window] {
                                    s = s + *v;
                                }
                            }
                            out.push(s * inv);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        let flops = (value.numel() * window * window) as u64;
        self.push(
            value,
            Op::Pool {
                x,
                kind,
                window,
                stride,
                argmax,
            },
            &[x],
            flops,
        )
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        self.pool2d(x, PoolKind::Max, window, window)
    }

    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        self.pool2d(x, PoolKind::Avg, window, window)
    }

    /// Bilinear resize with half-pixel centers (align-corners off). Equal
    /// sizes are an exact copy.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return arg_err(format!("cannot resize {h}x{w} to {out_h}x{out_w}"));
        }
        if (out_h, out_w) == (h, w) {
            let value = self.value(x).clone();
            return self.push(value, Op::Resize { x }, &[x], 0);
        }
        let ys: Vec<_> = (0..out_h).map(|o| taps(o, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|o| taps(o, w, out_w)).collect();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for p in 0..b * c {
            let plane = &xd[p * h * w..][..h * w];
            for &(y0, y1, wy0, wy1) in &ys {
                let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
                for &(x0, x1, wx0, wx1) in &xs {
                    let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                    let top = wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1];
                    let bot = wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1];
                    out.push(wy0 * top + wy1 * bot);
                }
            }
        }
        let value = Tensor::new(vec![b, c, out_h, out_w], out)?;
        let flops = 7 * value.numel() as u64;
        self.push(value, Op::Resize { x }, &[x], flops)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    pub(crate) fn pool_backward(
        &self,
        x: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        argmax: &[usize],
        g: &Tensor<T>,
    ) -> Tensor<T> {
        let (_, _, h, w) = self.value(x).dims4().expect("checked in forward");
        let (_, _, ho, wo) = g.dims4().expect("pool grad is rank 4");
        let mut dx = vec![T::zero(); self.value(x).numel()];
        match kind {
            PoolKind::Max => {
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx[i] = dx[i] + gv;
                }
            }
            PoolKind::Avg => {
                let inv = T::lit(1.0 / (window * window) as f64);
                for (p, gp) in g.data().chunks(ho * wo).enumerate() {
                    let base = p * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gp[oy * wo + ox] * inv;
                            for yy in oy * stride..oy * stride + window {
                                for d in &mut dx[base + yy * w + ox * stride..][..window] {
                                    *d = *d + gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(self.shape(x).to_vec(), dx).expect("grad shape")
    }

    pub(crate) fn resize_backward(&self, x: Var, g: &Tensor<T>) -> Tensor<T> {
        let (_, _, h, w) = self.value(x).dims4().expect("checked in forward");
        let (_, _, oh, ow) = g.dims4().expect("resize grad is rank 4");
        if (oh, ow) == (h, w) {
            return g.clone();
        }
        let ys: Vec<_> = (0..oh).map(|o| taps(o, h, oh)).collect();
        let xs: Vec<_> = (0..ow).map(|o| taps(o, w, ow)).collect();
        let mut dx = vec![T::zero(); self.value(x).numel()];
        for (p, gp) in g.data().chunks(oh * ow).enumerate() {
            let plane = &mut dx[p * h * w..][..h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                    let gv = gp[oy * ow + ox];
                    let (a, b) = (gv * T::lit(wy0), gv * T::lit(wy1));
                    plane[y0 * w + x0] = plane[y0 * w + x0] + a * T::lit(wx0);
                    plane[y0 * w + x1] = plane[y0 * w + x1] + a * T::lit(wx1);
                    plane[y1 * w + x0] = plane[y1 * w + x0] + b * T::lit(wx0);
                    plane[y1 * w + x1] = plane[y1 * w + x1] + b * T::lit(wx1);
                }
            }
        }
        Tensor::new(self.shape(x).to_vec(), dx).expect("grad shape")
    }
}
