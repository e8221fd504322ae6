use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub fn rows_t(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C[m x n] = alpha * A[m x k] * B[k x n] + beta * C`, with `C` row-stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: Mat<'_, T>,
    b: Mat<'_, T>,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    assert!(
        span(m, k, a.rs, a.cs) <= a.data.len(),
        "gemm: A out of bounds"
    );
    assert!(
        span(k, n, b.rs, b.cs) <= b.data.len(),
        "gemm: B out of bounds"
    );
    assert!(span(m, n, ldc, 1) <= c.len(), "gemm: C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

impl<T: Element> Graph<T> {
    /// Batched matrix product `[..., M, K] x [..., K, N] -> [..., M, N]`.
    ///
    /// Leading axes must match, or `b` may be a plain `[K, N]` matrix shared
    /// by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return dim_err(format!("matmul inner dims differ: {sa:?} x {sb:?}"));
        }
        let lead = &sa[..sa.len() - 2];
        let shared = sb.len() == 2 && sa.len() > 2;
        if !shared && lead != &sb[..sb.len() - 2] {
            return dim_err(format!("matmul batch dims differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let bm = if shared {
                bd
            } else {
                &bd[i * k * n..][..k * n]
            };
            gemm(
                m,
                k,
                n,
                T::one(),
                Mat::rows(&ad[i * m * k..][..m * k], k),
                Mat::rows(bm, n),
                T::zero(),
                &mut out[i * m * n..][..m * n],
                n,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let flops = 2 * (batch * m * k * n) as u64;
        self.push(value, Op::Matmul { a, b }, &[a, b], flops)
    }

    /// `x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let Some(&fin) = sx.last() else {
            return dim_err("linear on a rank-0 tensor");
        };
        if sw.len() != 2 || sw[1] != fin {
            return dim_err(format!("linear weight {sw:?} does not take input {sx:?}"));
        }
        let fout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return dim_err(format!(
                    "linear bias {:?} does not match {fout} outputs",
                    self.shape(b)
                ));
            }
        }
        let rows = self.value(x).numel() / fin.max(1);
        let mut out = vec![T::zero(); rows * fout];
        gemm(
            rows,
            fin,
            fout,
            T::one(),
            Mat::rows(self.value(x).data(), fin),
            Mat::rows_t(self.value(w).data(), fin),
            T::zero(),
            &mut out,
            fout,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = fout;
        let value = Tensor::new(shape, out)?;
        let flops = (2 * rows * fin * fout + if b.is_some() { rows * fout } else { 0 }) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs, flops)
    }

    pub(crate) fn matmul_backward(&self, a: Var, b: Var, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let shared = sb.len() == 2 && sa.len() > 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (ad, bd, gd) = (self.value(a).data(), self.value(b).data(), g.data());
        let mut out = Vec::new();
        if self.requires_grad(a) {
            let mut da = vec![T::zero(); ad.len()];
            for i in 0..batch {
                let bm = if shared {
                    bd
                } else {
                    &bd[i * k * n..][..k * n]
                };
                gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    Mat::rows(&gd[i * m * n..][..m * n], n),
                    Mat::rows_t(bm, n),
                    T::zero(),
                    &mut da[i * m * k..][..m * k],
                    k,
                );
            }
            out.push((a, Tensor::new(sa.to_vec(), da).expect("grad shape")));
        }
        if self.requires_grad(b) {
            let mut db = vec![T::zero(); bd.len()];
            for i in 0..batch {
                let (dst, beta) = if shared {
                    (&mut db[..], if i == 0 { T::zero() } else { T::one() })
                } else {
                    (&mut db[i * k * n..][..k * n], T::zero())
                };
                gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    Mat::rows_t(&ad[i * m * k..][..m * k], k),
                    Mat::rows(&gd[i * m * n..][..m * n], n),
                    beta,
                    dst,
                    n,
                );
            }
            out.push((b, Tensor::new(sb.to_vec(), db).expect("grad shape")));
        }
        out
    }

    pub(crate) fn linear_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let sw = self.shape(w);
        let (fout, fin) = (sw[0], sw[1]);
        let rows = g.numel() / fout.max(1);
        let (xd, wd, gd) = (self.value(x).data(), self.value(w).data(), g.data());
        let mut out = Vec::new();
        if self.requires_grad(x) {
            let mut dx = vec![T::zero(); xd.len()];
            gemm(
                rows,
                fout,
                fin,
                T::one(),
                Mat::rows(gd, fout),
                Mat::rows(wd, fin),
                T::zero(),
                &mut dx,
                fin,
            );
            out.push((
                x,
                Tensor::new(self.shape(x).to_vec(), dx).expect("grad shape"),
            ));
        }
        if self.requires_grad(w) {
            let mut dw = vec![T::zero(); wd.len()];
            gemm(
                fout,
                rows,
                fin,
                T::one(),
                Mat::rows_t(gd, fout),
                Mat::rows(xd, fin),
                T::zero(),
                &mut dw,
                fin,
            );
            out.push((w, Tensor::new(sw.to_vec(), dw).expect("grad shape")));
        }
        if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
            let mut db = vec![T::zero(); fout];
            for row in gd.chunks(fout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            out.push((b, Tensor::new(vec![fout], db).expect("grad shape")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64([2, 1], &[5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
        assert_eq!(g.flops(), 8);
    }

    #[test]
    fn inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(
            g.matmul(a, b),
            Err(crate::TensorError::Dimension(_))
        ));
    }

    #[test]
    fn linear_matches_manual() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 2], &[1.0, -1.0]).unwrap());
        let w = g.constant(Tensor::from_f64([3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::from_f64([3], &[0.5, 0.0, -0.5]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, -1.0, -1.5]);
    }
}
