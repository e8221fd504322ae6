//! Patch-wise attention skip connection.
//!
//! Three branches run on a `[B,C,H,W]` feature map: attention among the P²
//! pixels of each patch on the plain grid, the same on a grid shifted by
//! `floor(P/2)`, and attention among per-patch mean tokens. The output is
//! `relu((intra + intra_shifted) / 2 + inter) + x`.
//!
//! Q/K/V projections are computed once on the unpadded map. Grid padding is
//! applied to the projected maps and padded key positions are masked out of
//! the softmax, so padding never dilutes an attention row.

use lsenet_tensor::{symmetric_split, Element, Graph, Pad2d, Tensor, Var};

use crate::blocks::{ConvParams, LinearParams};
use crate::error::{config_err, dim_err, Result};
use crate::params::{Bound, Builder, ParamId, ParamRole};

pub const QK_KERNEL: usize = 5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct PieParams {
    pub q_conv: ConvParams,
    pub k_conv: ConvParams,
    pub v_conv: ConvParams,
    pub pos_table: ParamId,
    pub inter_q: LinearParams,
    pub inter_k: LinearParams,
    pub inter_v: LinearParams,
    pub channels: usize,
    pub patch: usize,
}

impl PieParams {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        patch: usize,
    ) -> Result<Self> {
        if patch < 2 {
            return config_err(format!("patch size must be >= 2, got {patch}"));
        }
        let l = patch * patch;
        Ok(b.scope(name, |b| Self {
            q_conv: ConvParams::build(b, "q_conv", channels, channels, QK_KERNEL, true),
            k_conv: ConvParams::build(b, "k_conv", channels, channels, QK_KERNEL, true),
            v_conv: ConvParams::build(b, "v_conv", channels, channels, 1, true),
            pos_table: b.zeros("pos_table", &[l, l], ParamRole::Position),
            inter_q: LinearParams::build(b, "inter_q", channels, channels),
            inter_k: LinearParams::build(b, "inter_k", channels, channels),
            inter_v: LinearParams::build(b, "inter_v", channels, channels),
            channels,
            patch,
        }))
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let l = self.patch * self.patch;
        2 * (c * c * QK_KERNEL * QK_KERNEL + c) + (c * c + c) + l * l + 3 * (c * c + c)
    }
}

/// Geometry of one tiling of an `H×W` map into `P×P` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub patch: usize,
    pub h: usize,
    pub w: usize,
    pub n_h: usize,
    pub n_w: usize,
    /// Total padding applied before tiling, shift included.
    pub pad: Pad2d,
    pub shift: usize,
}

impl PatchLayout {
    pub fn new(h: usize, w: usize, patch: usize, shift: bool) -> Result<Self> {
        if patch < 2 {
            return config_err(format!("patch size must be >= 2, got {patch}"));
        }
        if h == 0 || w == 0 {
            return config_err(format!("cannot tile an empty {h}x{w} map"));
        }
        let s = if shift { patch / 2 } else { 0 };
        let (hs, ws) = (h + 2 * s, w + 2 * s);
        let (t, bo) = symmetric_split((patch - hs % patch) % patch);
        let (l, r) = symmetric_split((patch - ws % patch) % patch);
        Ok(Self {
            patch,
            h,
            w,
            n_h: (hs + t + bo) / patch,
            n_w: (ws + l + r) / patch,
            pad: Pad2d::new(s + t, s + bo, s + l, s + r),
            shift: s,
        })
    }

    pub fn n(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.n_h * self.patch, self.n_w * self.patch)
    }

    /// `true` for pixels of the original map, laid out `[N, P²]`.
    pub fn valid_mask(&self) -> Vec<bool> {
        let p = self.patch;
        let mut out = Vec::with_capacity(self.n() * p * p);
        for i in 0..self.n_h {
            for j in 0..self.n_w {
                for a in 0..p {
                    for b in 0..p {
                        let (y, x) = (i * p + a, j * p + b);
                        out.push(
                            (self.pad.top..self.pad.top + self.h).contains(&y)
                                && (self.pad.left..self.pad.left + self.w).contains(&x),
                        );
                    }
                }
            }
        }
        out
    }

    /// Number of original pixels in each patch, in row-major patch order.
    pub fn valid_counts(&self) -> Vec<usize> {
        let l = self.patch * self.patch;
        self.valid_mask()
            .chunks(l)
            .map(|c| c.iter().filter(|&&v| v).count())
            .collect()
    }

    pub fn partition<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (b, c, h, w) = g.value(x).dims4()?;
        if (h, w) != (self.h, self.w) {
            return dim_err(format!(
                "layout built for {}x{} applied to {h}x{w}",
                self.h, self.w
            ));
        }
        let p = self.patch;
        let xp = g.pad2d(x, self.pad)?;
        let r = g.reshape(xp, &[b, c, self.n_h, p, self.n_w, p])?;
        let t = g.permute(r, &[0, 2, 4, 1, 3, 5])?;
        Ok(g.reshape(t, &[b * self.n(), c, p * p])?)
    }

    /// Inverse of [`partition`](Self::partition) for `[B·N, C, P²]` patches.
    pub fn merge<T: Element>(&self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        let p = self.patch;
        if shape.len() != 3 || !shape[0].is_multiple_of(self.n()) || shape[2] != p * p {
            return dim_err(format!(
                "patch tensor {shape:?} does not fit a {}x{} grid of {p}x{p}",
                self.n_h, self.n_w
            ));
        }
        let (b, c) = (shape[0] / self.n(), shape[1]);
        let r = g.reshape(patches, &[b, self.n_h, self.n_w, c, p, p])?;
        let t = g.permute(r, &[0, 3, 1, 4, 2, 5])?;
        let (hp, wp) = self.padded();
        let m = g.reshape(t, &[b, c, hp, wp])?;
        Ok(g.crop2d(m, self.pad)?)
    }
}

/// A feature map split into patches together with the layout that undoes it.
#[derive(Debug, Clone, Copy)]
pub struct PatchGrid {
    /// `[B·N, C, P²]`
    pub patches: Var,
    pub layout: PatchLayout,
}

impl PatchGrid {
    pub fn merge<T: Element>(&self, g: &mut Graph<T>) -> Result<Var> {
        self.layout.merge(g, self.patches)
    }
}

pub fn partition_patches<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    patch: usize,
    shift: bool,
) -> Result<PatchGrid> {
    let (_, _, h, w) = g.value(x).dims4()?;
    let layout = PatchLayout::new(h, w, patch, shift)?;
    Ok(PatchGrid {
        patches: layout.partition(g, x)?,
        layout,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

fn check_channels<T: Element>(
    g: &Graph<T>,
    params: &PieParams,
    x: Var,
) -> Result<(usize, usize, usize, usize)> {
    let dims = g.value(x).dims4()?;
    if dims.1 != params.channels {
        return dim_err(format!(
            "attention block expects {} channels, got {}",
            params.channels, dims.1
        ));
    }
    Ok(dims)
}

pub fn project<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &PieParams,
    x: Var,
) -> Result<Projections> {
    check_channels(g, params, x)?;
    Ok(Projections {
        q: params.q_conv.forward(g, p, x)?,
        k: params.k_conv.forward(g, p, x)?,
        v: params.v_conv.forward(g, p, x)?,
    })
}

/// Intra-patch attention on projected maps.
pub fn intra_from_projections<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &PieParams,
    proj: Projections,
    shift: bool,
) -> Result<Var> {
    let (b, c, h, w) = g.value(proj.q).dims4()?;
    let layout = PatchLayout::new(h, w, params.patch, shift)?;
    let l = params.patch * params.patch;
    let n = layout.n();
    let q = layout.partition(g, proj.q)?;
    let k = layout.partition(g, proj.k)?;
    let v = layout.partition(g, proj.v)?;

    let qt = g.transpose_last(q)?;
    let scores = g.matmul(qt, k)?;
    let scores = g.add(scores, p[params.pos_table])?;
    let mask = layout.valid_mask();
    let scores = if mask.iter().all(|&m| m) {
        scores
    } else {
        let bias = Tensor::from_fn(
            [n, 1, l],
            |i| if mask[i] { T::zero() } else { T::lit(MASKED) },
        );
        let bias = g.constant(bias);
        let s4 = g.reshape(scores, &[b, n, l, l])?;
        let s4 = g.add(s4, bias)?;
        g.reshape(s4, &[b * n, l, l])?
    };
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = g.softmax_lastdim(scores)?;
    let at = g.transpose_last(attn)?;
    let out = g.matmul(v, at)?;
    layout.merge(g, out)
}

/// Attention among the P² pixels of each patch (plain or shifted grid).
pub fn intra_patch_attention<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &PieParams,
    x: Var,
    shift: bool,
) -> Result<Var> {
    let proj = project(g, p, params, x)?;
    intra_from_projections(g, p, params, proj, shift)
}

/// Single-head attention over `[B,N,C]` tokens with the inter-patch maps.
pub fn token_attention<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &PieParams,
    tokens: Var,
) -> Result<Var> {
    let c = params.channels;
    let q = params.inter_q.forward(g, p, tokens)?;
    let k = params.inter_k.forward(g, p, tokens)?;
    let v = params.inter_v.forward(g, p, tokens)?;
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = g.softmax_lastdim(scores)?;
    Ok(g.matmul(attn, v)?)
}

/// Attention among per-patch mean tokens on the plain grid, resized back to
/// the input resolution.
pub fn inter_patch_attention<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &PieParams,
    x: Var,
) -> Result<Var> {
    let (b, c, h, w) = check_channels(g, params, x)?;
    let layout = PatchLayout::new(h, w, params.patch, false)?;
    let n = layout.n();
    let xp = g.pad2d(x, layout.pad)?;
    let pooled = g.avg_pool2d(xp, params.patch)?;
    let pooled = if layout.pad.is_zero() {
        pooled
    } else {
        let full = (params.patch * params.patch) as f64;
        let counts = layout.valid_counts();
        let fix = g.constant(Tensor::from_fn([layout.n_h, layout.n_w], |i| {
            T::lit(full / counts[i] as f64)
        }));
        g.mul(pooled, fix)?
    };
    let tokens = g.reshape(pooled, &[b, c, n])?;
    let tokens = g.transpose_last(tokens)?;
    let out = token_attention(g, p, params, tokens)?;
    let out = g.transpose_last(out)?;
    let map = g.reshape(out, &[b, c, layout.n_h, layout.n_w])?;
    Ok(g.resize_bilinear(map, h, w)?)
}

#[derive(Debug, Clone, Copy)]
pub struct PieOutput {
    pub out: Var,
    /// `relu(Attn_X)`, the term added to the input.
    pub enhancement: Var,
    pub intra: Var,
    pub intra_shifted: Var,
    pub inter: Var,
}

pub fn pie_forward_detailed<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &PieParams,
    x: Var,
) -> Result<PieOutput> {
    let proj = project(g, p, params, x)?;
    let intra = intra_from_projections(g, p, params, proj, false)?;
    let intra_shifted = intra_from_projections(g, p, params, proj, true)?;
    let inter = inter_patch_attention(g, p, params, x)?;
    let both = g.add(intra, intra_shifted)?;
    let half = g.scale(both, 0.5)?;
    let attn = g.add(half, inter)?;
    let enhancement = g.relu(attn)?;
    let out = g.add(enhancement, x)?;
    Ok(PieOutput {
        out,
        enhancement,
        intra,
        intra_shifted,
        inter,
    })
}

pub fn pie_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &PieParams,
    x: Var,
) -> Result<Var> {
    Ok(pie_forward_detailed(g, p, params, x)?.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_examples() {
        let a = PatchLayout::new(4, 4, 2, false).unwrap();
        assert_eq!((a.n(), a.pad), (4, Pad2d::new(0, 0, 0, 0)));
        let b = PatchLayout::new(5, 5, 2, false).unwrap();
        assert_eq!(
            (b.padded(), b.n(), b.pad),
            ((6, 6), 9, Pad2d::new(0, 1, 0, 1))
        );
        let c = PatchLayout::new(4, 4, 2, true).unwrap();
        assert_eq!((c.padded(), c.n(), c.pad), ((6, 6), 9, Pad2d::uniform(1)));
        let d = PatchLayout::new(224, 224, 15, true).unwrap();
        assert_eq!(d.shift, 7);
        assert_eq!(d.padded().0 % 15, 0);
        assert!(PatchLayout::new(4, 4, 1, false).is_err());
    }

    #[test]
    fn valid_counts_cover_the_map() {
        for &(h, w, p, s) in &[
            (5, 7, 3, false),
            (5, 7, 3, true),
            (6, 6, 2, true),
            (1, 1, 4, true),
        ] {
            let l = PatchLayout::new(h, w, p, s).unwrap();
            assert_eq!(l.valid_counts().iter().sum::<usize>(), h * w);
        }
    }

    #[test]
    fn partition_merge_round_trip() {
        let mut g = Graph::<f64>::new();
        for &(h, w, p) in &[(4, 4, 2), (5, 7, 3), (3, 2, 4), (9, 9, 3)] {
            let x = g.constant(Tensor::from_fn([2, 3, h, w], |i| i as f64 * 0.5 - 7.0));
            for shift in [false, true] {
                let grid = partition_patches(&mut g, x, p, shift).unwrap();
                assert_eq!(g.shape(grid.patches), &[2 * grid.layout.n(), 3, p * p]);
                let m = grid.merge(&mut g).unwrap();
                assert_eq!(g.value(m), g.value(x));
            }
        }
    }

    #[test]
    fn partition_orders_pixels_row_major_in_patch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f64));
        let grid = partition_patches(&mut g, x, 2, false).unwrap();
        let d = g.value(grid.patches).data();
        assert_eq!(&d[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&d[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&d[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}
