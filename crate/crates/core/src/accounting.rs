//! Parameter and FLOP accounting.
//!
//! FLOPs follow the multiply-accumulate × 2 convention for convolutions and
//! matrix products; bias adds, normalization, activations, pooling, resizing
//! and softmax are charged per element the same way the autograd tape
//! charges them, so a traced forward reproduces [`count_flops`] exactly.

use std::collections::BTreeMap;
use std::fmt;

use lsenet_tensor::Element;

use crate::blocks::{ConvBlockParams, ConvParams, LinearParams};
use crate::crd::{CrdParams, OutConvParams, PlainDecoder};
use crate::error::{arg_err, Result};
use crate::mff::{ChannelAttention, MffParams, PlainStage};
use crate::network::{DecoderStage, EncoderStage, LsenetModel};
use crate::pie::{PatchLayout, PieParams};

/// Module key of a parameter name: `layer3.pie.q_conv.kernel` -> `layer3.pie`.
pub fn module_of(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or(name);
    match parts.next() {
        Some(second) if first.starts_with("layer") => &name[..first.len() + 1 + second.len()],
        _ => first,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub by_module: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn count_params<T: Element>(model: &LsenetModel<T>) -> ParamReport {
    let mut by_module = BTreeMap::new();
    for p in model.params.iter() {
        *by_module.entry(module_of(&p.name).to_string()).or_insert(0) += p.value.numel();
    }
    ParamReport {
        total: by_module.values().sum(),
        by_module,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub conv: u64,
    pub matmul: u64,
    pub other: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.conv + self.matmul + self.other
    }

    fn add(&mut self, o: FlopTally) {
        self.conv += o.conv;
        self.matmul += o.matmul;
        self.other += o.other;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub height: usize,
    pub width: usize,
    pub by_module: BTreeMap<String, FlopTally>,
    pub total: FlopTally,
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = |v: u64| v as f64 / 1e9;
        write!(
            f,
            "{:.2} GFLOPs at {}x{} (MAC x 2; conv {:.2}, matmul/linear {:.2}, elementwise {:.2})",
            g(self.total.total()),
            self.height,
            self.width,
            g(self.total.conv),
            g(self.total.matmul),
            g(self.total.other)
        )
    }
}

#[derive(Default)]
struct Counter {
    t: FlopTally,
}

impl Counter {
    fn conv(&mut self, b: usize, cin: usize, cout: usize, k: usize, hw: usize, bias: bool) {
        self.t.conv += (2 * b * cout * cin * k * k * hw) as u64;
        if bias {
            self.t.other += (b * cout * hw) as u64;
        }
    }

    fn ew(&mut self, n: usize) {
        self.t.other += n as u64;
    }

    fn matmul(&mut self, batch: usize, m: usize, k: usize, n: usize) {
        self.t.matmul += (2 * batch * m * k * n) as u64;
    }

    fn linear(&mut self, rows: usize, l: &LinearParams) {
        self.t.matmul += (2 * rows * l.fan_in * l.fan_out) as u64;
        self.t.other += (rows * l.fan_out) as u64;
    }

    fn plain_conv(&mut self, b: usize, c: &ConvParams, hw: usize) {
        self.conv(b, c.cin, c.cout, c.k, hw, c.bias.is_some());
    }

    fn block(&mut self, b: usize, c: &ConvBlockParams, hw: usize) {
        self.conv(b, c.cin, c.cout, c.k, hw, true);
        // group norm (7 per element) and ReLU
        self.ew(8 * b * c.cout * hw);
    }

    fn channel_attention(&mut self, b: usize, ca: &ChannelAttention, hw: usize) {
        self.ew(b * ca.channels * hw);
        self.linear(b, &ca.squeeze);
        self.ew(b * ca.hidden());
        self.linear(b, &ca.excite);
        self.ew(b * ca.channels);
        self.ew(b * ca.channels * hw);
    }

    fn mff(&mut self, b: usize, m: &MffParams, hw: usize) {
        self.block(b, &m.pre, hw);
        self.block(b, &m.branch_1, hw);
        self.block(b, &m.branch_3, hw);
        self.block(b, &m.branch_5, hw);
        self.channel_attention(b, &m.ca, hw);
        self.block(b, &m.fuse_1x1, hw);
        self.block(b, &m.out_3x3, hw);
    }

    fn plain_stage(&mut self, b: usize, s: &PlainStage, hw: usize) {
        self.block(b, &s.a, hw);
        self.block(b, &s.b, hw);
    }

    fn pie(&mut self, b: usize, p: &PieParams, h: usize, w: usize) -> Result<()> {
        let (c, hw) = (p.channels, h * w);
        self.plain_conv(b, &p.q_conv, hw);
        self.plain_conv(b, &p.k_conv, hw);
        self.plain_conv(b, &p.v_conv, hw);
        let l = p.patch * p.patch;
        for shift in [false, true] {
            let layout = PatchLayout::new(h, w, p.patch, shift)?;
            let bn = b * layout.n();
            self.matmul(bn, l, c, l);
            let scores = bn * l * l;
            let masked = !layout.pad.is_zero();
            // position add, optional mask add, scale, softmax
            self.ew(scores * if masked { 3 } else { 2 } + 5 * scores);
            self.matmul(bn, c, l, l);
        }
        let layout = PatchLayout::new(h, w, p.patch, false)?;
        let n = layout.n();
        self.ew(b * c * n * l);
        if !layout.pad.is_zero() {
            self.ew(b * c * n);
        }
        for lin in [&p.inter_q, &p.inter_k, &p.inter_v] {
            self.linear(b * n, lin);
        }
        self.matmul(b, n, c, n);
        self.ew(6 * b * n * n);
        self.matmul(b, n, n, c);
        if (layout.n_h, layout.n_w) != (h, w) {
            self.ew(7 * b * c * hw);
        }
        // branch fusion: add, halve, add, ReLU, residual add
        self.ew(5 * b * c * hw);
        Ok(())
    }

    fn crd(&mut self, b: usize, d: &CrdParams, hw: usize) {
        self.block(b, &d.refine_1x1, hw);
        self.block(b, &d.conv_a, hw);
        self.block(b, &d.conv_b, hw);
    }

    fn plain_decoder(&mut self, b: usize, d: &PlainDecoder, hw: usize) {
        self.block(b, &d.conv_a, hw);
        self.block(b, &d.conv_b, hw);
    }

    fn head(&mut self, b: usize, o: &OutConvParams, hw: usize) {
        self.plain_conv(b, &o.conv, hw);
    }

    fn take(&mut self) -> FlopTally {
        std::mem::take(&mut self.t)
    }
}

/// FLOPs of one forward pass at batch size 1 and resolution `h×w`.
pub fn count_flops<T: Element>(model: &LsenetModel<T>, h: usize, w: usize) -> Result<FlopReport> {
    let cfg = &model.config;
    let div = cfg.divisor();
    if h == 0 || w == 0 || !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        return arg_err(format!("input {h}x{w} must be divisible by {div}"));
    }
    let b = 1;
    let c = cfg.channels;
    let mut by_module: BTreeMap<String, FlopTally> = BTreeMap::new();
    let mut k = Counter::default();
    let mut put = |name: String, t: FlopTally| by_module.entry(name).or_default().add(t);
    for (l, (enc, skip)) in model.encoder.iter().zip(&model.skips).enumerate() {
        let (hl, wl) = (h >> l, w >> l);
        let hw = hl * wl;
        if l > 0 {
            // max pool of the previous stage, window 2
            k.ew(b * c * hw * 4);
        }
        match enc {
            EncoderStage::Mff(m) => {
                if l > 0 {
                    k.ew(b * cfg.in_channels * h * w);
                }
                k.mff(b, m, hw);
                put(format!("layer{l}.mff"), k.take());
            }
            EncoderStage::Plain(s) => {
                k.plain_stage(b, s, hw);
                put(format!("layer{l}.enc"), k.take());
            }
        }
        if let Some(p) = skip {
            k.pie(b, p, hl, wl)?;
            put(format!("layer{l}.pie"), k.take());
        }
    }
    for (l, dec) in model.decoder.iter().enumerate().rev() {
        let hw = (h >> l) * (w >> l);
        k.ew(7 * b * c * hw);
        match dec {
            DecoderStage::Crd(d) => {
                k.crd(b, d, hw);
                put(format!("layer{l}.crd"), k.take());
            }
            DecoderStage::Plain(d) => {
                k.plain_decoder(b, d, hw);
                put(format!("layer{l}.dec"), k.take());
            }
        }
    }
    k.head(b, &model.head, h * w);
    put("out_conv".to_string(), k.take());
    let mut total = FlopTally::default();
    for t in by_module.values() {
        total.add(*t);
    }
    Ok(FlopReport {
        height: h,
        width: w,
        by_module,
        total,
    })
}
