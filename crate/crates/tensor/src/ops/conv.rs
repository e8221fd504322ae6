//! 2-D cross-correlation via im2col + GEMM.
//!
//! The column buffer is built for a band of output rows at a time so large
//! maps with wide kernels stay within a bounded scratch size.

use crate::element::Element;
use crate::error::{arg_err, dim_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::ops::linalg::{gemm, Mat};
use crate::tensor::Tensor;

const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.kdim() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Output columns whose input column `ox * stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p > kx {
            ((self.w + p - kx - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Fills `cols` (`kdim x rows*wo`) for output rows `oy0..oy1`.
    fn im2col<T: Element>(&self, x: &[T], oy0: usize, oy1: usize, cols: &mut [T]) {
        let ncol = (oy1 - oy0) * self.wo;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[r * ncol..][..ncol];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in oy0..oy1 {
                        let dst = &mut row[(oy - oy0) * self.wo..][..self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatters `cols` back into `dx`, accumulating.
    fn col2im<T: Element>(&self, cols: &[T], oy0: usize, oy1: usize, dx: &mut [T]) {
        let ncol = (oy1 - oy0) * self.wo;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let row = &cols[r * ncol..][..ncol];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &row[(oy - oy0) * self.wo..][..self.wo];
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        let ix0 = lo * self.stride + kx - self.pad;
                        for (j, &v) in src[lo..hi].iter().enumerate() {
                            let d = &mut dst[ix0 + j * self.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geometry)> {
    let [b, cin, h, w] = xs[..] else {
        return dim_err(format!("conv2d input must be [B,C,H,W], got {xs:?}"));
    };
    let [cout, wcin, kh, kw] = ws[..] else {
        return dim_err(format!(
            "conv2d kernel must be [Cout,Cin,kh,kw], got {ws:?}"
        ));
    };
    if cin != wcin {
        return dim_err(format!(
            "conv2d input has {cin} channels but kernel expects {wcin}"
        ));
    }
    if stride < 1 {
        return arg_err("conv2d stride must be >= 1");
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return dim_err(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (+{pad})"
        ));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok((
        b,
        cout,
        Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

impl<T: Element> Graph<T> {
    /// Cross-correlation with zero padding; `x` is `[B,Cin,H,W]`, `w` is
    /// `[Cout,Cin,kh,kw]`, optional `bias` is `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (b, cout, geo) = geometry(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return dim_err(format!(
                    "conv2d bias {:?} does not match {cout} outputs",
                    self.shape(bv)
                ));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let plane_in = geo.cin * geo.h * geo.w;
        let plane_out = geo.ho * geo.wo;
        let kdim = geo.kdim();
        let mut out = vec![T::zero(); b * cout * plane_out];
        let mut cols = Vec::new();
        for bi in 0..b {
            let xb = &xd[bi * plane_in..][..plane_in];
            let ob = &mut out[bi * cout * plane_out..][..cout * plane_out];
            if geo.is_pointwise() {
                gemm(
                    cout,
                    kdim,
                    plane_out,
                    T::one(),
                    Mat::rows(wd, kdim),
                    Mat::rows(xb, plane_out),
                    T::zero(),
                    ob,
                    plane_out,
                );
                continue;
            }
            let band = geo.band_rows();
            let mut oy0 = 0;
            while oy0 < geo.ho {
                let oy1 = (oy0 + band).min(geo.ho);
                let ncol = (oy1 - oy0) * geo.wo;
                cols.resize(kdim * ncol, T::zero());
                geo.im2col(xb, oy0, oy1, &mut cols);
                gemm(
                    cout,
                    kdim,
                    ncol,
                    T::one(),
                    Mat::rows(wd, kdim),
                    Mat::rows(&cols, ncol),
                    T::zero(),
                    &mut ob[oy0 * geo.wo..],
                    plane_out,
                );
                oy0 = oy1;
            }
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (i, plane) in out.chunks_mut(plane_out).enumerate() {
                let bc = bd[i % cout];
                for v in plane {
                    *v = *v + bc;
                }
            }
        }
        let value = Tensor::new(vec![b, cout, geo.ho, geo.wo], out)?;
        let mut flops = 2 * (b * cout * kdim * plane_out) as u64;
        let mut inputs = vec![x, w];
        if let Some(bv) = bias {
            flops += (b * cout * plane_out) as u64;
            inputs.push(bv);
        }
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b: bias,
                stride,
                pad,
            },
            &inputs,
            flops,
        )
    }

    pub(crate) fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let (b, cout, geo) =
            geometry(self.shape(x), self.shape(w), stride, pad).expect("checked in forward");
        let (xd, wd, gd) = (self.value(x).data(), self.value(w).data(), g.data());
        let plane_in = geo.cin * geo.h * geo.w;
        let plane_out = geo.ho * geo.wo;
        let kdim = geo.kdim();
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        let mut dx = if need_x {
            vec![T::zero(); xd.len()]
        } else {
            Vec::new()
        };
        let mut dw = if need_w {
            vec![T::zero(); wd.len()]
        } else {
            Vec::new()
        };
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for bi in 0..b {
            let xb = &xd[bi * plane_in..][..plane_in];
            let gb = &gd[bi * cout * plane_out..][..cout * plane_out];
            if geo.is_pointwise() {
                if need_w {
                    gemm(
                        cout,
                        plane_out,
                        kdim,
                        T::one(),
                        Mat::rows(gb, plane_out),
                        Mat::rows_t(xb, plane_out),
                        T::one(),
                        &mut dw,
                        kdim,
                    );
                }
                if need_x {
                    let dxb = &mut dx[bi * plane_in..][..plane_in];
                    gemm(
                        kdim,
                        cout,
                        plane_out,
                        T::one(),
                        Mat::rows_t(wd, kdim),
                        Mat::rows(gb, plane_out),
                        T::zero(),
                        dxb,
                        plane_out,
                    );
                }
                continue;
            }
            let band = geo.band_rows();
            let mut oy0 = 0;
            while oy0 < geo.ho {
                let oy1 = (oy0 + band).min(geo.ho);
                let ncol = (oy1 - oy0) * geo.wo;
                let gband = Mat {
                    data: &gb[oy0 * geo.wo..],
                    rs: plane_out,
                    cs: 1,
                };
                if need_w {
                    cols.resize(kdim * ncol, T::zero());
                    geo.im2col(xb, oy0, oy1, &mut cols);
                    gemm(
                        cout,
                        ncol,
                        kdim,
                        T::one(),
                        gband,
                        Mat::rows_t(&cols, ncol),
                        T::one(),
                        &mut dw,
                        kdim,
                    );
                }
                if need_x {
                    dcols.resize(kdim * ncol, T::zero());
                    gemm(
                        kdim,
                        cout,
                        ncol,
                        T::one(),
                        Mat::rows_t(wd, kdim),
                        gband,
                        T::zero(),
                        &mut dcols,
                        ncol,
                    );
                    geo.col2im(&dcols, oy0, oy1, &mut dx[bi * plane_in..][..plane_in]);
                }
                oy0 = oy1;
            }
        }
        let mut out = Vec::new();
        if need_x {
            out.push((
                x,
                Tensor::new(self.shape(x).to_vec(), dx).expect("grad shape"),
            ));
        }
        if need_w {
            out.push((
                w,
                Tensor::new(self.shape(w).to_vec(), dw).expect("grad shape"),
            ));
        }
        if let Some(bv) = bias.filter(|&bv| self.requires_grad(bv)) {
            let mut db = vec![T::zero(); cout];
            for (i, plane) in gd.chunks(plane_out).enumerate() {
                db[i % cout] = db[i % cout] + plane.iter().copied().sum::<T>();
            }
            out.push((bv, Tensor::new(vec![cout], db).expect("grad shape")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([b, cout, ho, wo]);
        let mut i = 0;
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.at(&[bi, ci, iy as usize, ix as usize])
                                            * w.at(&[co, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[i] = acc;
                        i += 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        for &(h, w, k, stride, pad) in &[
            (5, 7, 3, 1, 1),
            (6, 6, 5, 2, 2),
            (4, 3, 1, 1, 0),
            (7, 5, 3, 3, 0),
            (3, 3, 5, 1, 2),
        ] {
            let x = Tensor::from_fn([2, 3, h, w], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
            let kt = Tensor::from_fn([4, 3, k, k], |i| ((i * 13 % 7) as f64 - 3.0) / 2.0);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(kt.clone());
            let y = g.conv2d(xv, kv, None, stride, pad).unwrap();
            let expect = naive(&x, &kt, stride, pad);
            assert!(
                g.value(y).max_abs_diff(&expect) < 1e-12,
                "h={h} w={w} k={k} s={stride} p={pad}"
            );
        }
    }

    #[test]
    fn argument_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k, None, 1, 1),
            Err(crate::TensorError::Dimension(_))
        ));
        let k = g.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k, None, 0, 1),
            Err(crate::TensorError::Argument(_))
        ));
    }
}
