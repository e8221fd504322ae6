use crate::element::Element;
use crate::error::{arg_err, dim_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

impl<T: Element> Graph<T> {
    /// Group normalization over `[B,C,H,W]` with per-channel affine.
    ///
    /// Statistics are the biased mean/variance of each (batch, group) slab,
    /// accumulated in `f64`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return arg_err(format!("{c} channels cannot be split into {groups} groups"));
        }
        if eps <= 0.0 {
            return arg_err(format!("group_norm eps must be positive, got {eps}"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(format!(
                "group_norm affine shapes {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let cg = c / groups;
        let hw = h * w;
        let slab = cg * hw;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        for (s, (src, dst)) in xd.chunks(slab).zip(out.chunks_mut(slab)).enumerate() {
            let n = slab as f64;
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            let (m, r) = (T::lit(mean), T::lit(rstd));
            let g0 = (s % groups) * cg;
            for (ci, (sp, dp)) in src.chunks(hw).zip(dst.chunks_mut(hw)).enumerate() {
                let (ga, be) = (gd[g0 + ci], bd[g0 + ci]);
                for (o, &v) in dp.iter_mut().zip(sp) {
                    *o = ga * ((v - m) * r) + be;
                }
            }
            means.push(m);
            rstds.push(r);
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let flops = 7 * value.numel() as u64;
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
            flops,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: &[T],
        rstds: &[T],
        g: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let (_, c, h, w) = self.value(x).dims4().expect("checked in forward");
        let cg = c / groups;
        let hw = h * w;
        let slab = cg * hw;
        let xd = self.value(x).data();
        let gam = self.value(gamma).data();
        let mut dx = vec![T::zero(); xd.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let inv_n = T::lit(1.0 / slab as f64);
        for (s, ((src, gs), dst)) in xd
            .chunks(slab)
            .zip(g.data().chunks(slab))
            .zip(dx.chunks_mut(slab))
            .enumerate()
        {
            let (m, r) = (means[s], rstds[s]);
            let g0 = (s % groups) * cg;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let ch = g0 + ci;
                let mut dga = T::zero();
                let mut dbe = T::zero();
                for k in ci * hw..(ci + 1) * hw {
                    let xhat = (src[k] - m) * r;
                    let dxhat = gs[k] * gam[ch];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    dga = dga + gs[k] * xhat;
                    dbe = dbe + gs[k];
                }
                dgamma[ch] = dgamma[ch] + dga;
                dbeta[ch] = dbeta[ch] + dbe;
            }
            let mean_dxhat = sum_dxhat * inv_n;
            let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
            for ci in 0..cg {
                let ch = g0 + ci;
                for k in ci * hw..(ci + 1) * hw {
                    let xhat = (src[k] - m) * r;
                    let dxhat = gs[k] * gam[ch];
                    dst[k] = r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
        let mut out = Vec::new();
        if self.requires_grad(x) {
            out.push((
                x,
                Tensor::new(self.shape(x).to_vec(), dx).expect("grad shape"),
            ));
        }
        if self.requires_grad(gamma) {
            out.push((gamma, Tensor::new(vec![c], dgamma).expect("grad shape")));
        }
        if self.requires_grad(beta) {
            out.push((beta, Tensor::new(vec![c], dbeta).expect("grad shape")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_values_one_group() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let ga = g.constant(Tensor::ones([1]));
        let be = g.constant(Tensor::zeros([1]));
        let y = g.group_norm(x, 1, ga, be, 1e-12).unwrap();
        let expect = [-1.5, -0.5, 0.5, 1.5].map(|v: f64| v / 1.25f64.sqrt());
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((expect[0] + 1.342).abs() < 1e-3 && (expect[1] + 0.447).abs() < 1e-3);
    }

    #[test]
    fn constant_input_and_affine_collapse() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 4, 3, 3], 3.5));
        let ga = g.constant(Tensor::ones([4]));
        let be = g.constant(Tensor::zeros([4]));
        let y = g.group_norm(x, 2, ga, be, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(Tensor::from_fn([2, 4, 3, 3], |i| (i as f64).sin()));
        let ga = g.constant(Tensor::zeros([4]));
        let be = g.constant(Tensor::full([4], 5.0));
        let y = g.group_norm(x, 2, ga, be, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn indivisible_groups() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 6, 2, 2]));
        let ga = g.constant(Tensor::ones([6]));
        let be = g.constant(Tensor::zeros([6]));
        assert!(matches!(
            g.group_norm(x, 4, ga, be, 1e-5),
            Err(crate::TensorError::Argument(_))
        ));
    }
}
