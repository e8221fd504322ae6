//! Full encoder/skip/decoder assembly with ablation switches.

use std::collections::BTreeMap;

use crate::crd::{crd_stage, out_conv, CrdParams, OutConvParams, PlainDecoder};
use crate::error::{arg_err, config_err, dim_err, LsenetError, Result};
use crate::mff::{mff_forward, MffParams, PlainStage};
use crate::params::{Bound, Builder, ParamStore};
use crate::pie::{pie_forward_detailed, PieParams};
use crate::seed::{rng_for, stream};
use lsenet_tensor::{symmetric_split, Element, Graph, Pad2d, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LsenetConfig {
    pub layers: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub enable_mff: bool,
    pub enable_pie: bool,
    pub enable_crd: bool,
    pub seed: u64,
}

impl Default for LsenetConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            channels: 64,
            patch_size: 15,
            in_channels: 1,
            enable_mff: true,
            enable_pie: true,
            enable_crd: true,
            seed: 0,
        }
    }
}

impl LsenetConfig {
    /// Plain U-Net: every module switched off.
    pub fn baseline(&self) -> Self {
        Self {
            enable_mff: false,
            enable_pie: false,
            enable_crd: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return config_err(format!("layers must be >= 2, got {}", self.layers));
        }
        if self.layers > 12 {
            return config_err(format!("layers must be <= 12, got {}", self.layers));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(crate::blocks::GN_GROUP_SIZE) {
            return config_err(format!(
                "channels must be a positive multiple of 8, got {}",
                self.channels
            ));
        }
        if self.patch_size < 2 {
            return config_err(format!("patch_size must be >= 2, got {}", self.patch_size));
        }
        if self.in_channels == 0 {
            return config_err("in_channels must be >= 1");
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.layers - 1)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("channels", self.channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("enable_mff", self.enable_mff.to_string()),
            ("enable_pie", self.enable_pie.to_string()),
            ("enable_crd", self.enable_crd.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Inverse of [`to_pairs`](Self::to_pairs); every key must be present.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<V> {
            let raw = pairs
                .get(key)
                .ok_or_else(|| LsenetError::Config(format!("missing model key `{key}`")))?;
            raw.parse().map_err(|_| {
                LsenetError::Config(format!("bad value `{raw}` for model key `{key}`"))
            })
        }
        let cfg = Self {
            layers: get(pairs, "layers")?,
            channels: get(pairs, "channels")?,
            patch_size: get(pairs, "patch_size")?,
            in_channels: get(pairs, "in_channels")?,
            enable_mff: get(pairs, "enable_mff")?,
            enable_pie: get(pairs, "enable_pie")?,
            enable_crd: get(pairs, "enable_crd")?,
            seed: get(pairs, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderStage {
    Mff(MffParams),
    Plain(PlainStage),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderStage {
    Crd(CrdParams),
    Plain(PlainDecoder),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsenetModel<T: Element> {
    pub config: LsenetConfig,
    pub params: ParamStore<T>,
    pub encoder: Vec<EncoderStage>,
    pub skips: Vec<Option<PieParams>>,
    /// `decoder[l]` merges the upsampled deeper stream with skip `l`.
    pub decoder: Vec<DecoderStage>,
    pub head: OutConvParams,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// `relu(Attn_X)` per layer when the attention skip is enabled.
    pub enhancements: Vec<Option<Var>>,
}

impl<T: Element> LsenetModel<T> {
    pub fn build(config: &LsenetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(config.seed, stream::MODEL);
        let mut b = Builder::new(&mut params, &mut rng);
        let c = config.channels;
        let mut encoder = Vec::new();
        let mut skips = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..config.layers {
            let layer = format!("layer{l}");
            let (enc, skip) = b.scope(&layer, |b| -> Result<_> {
                let enc = if config.enable_mff {
                    EncoderStage::Mff(MffParams::build(b, "mff", config.in_channels, c, l > 0))
                } else {
                    EncoderStage::Plain(PlainStage::build(
                        b,
                        "enc",
                        if l == 0 { config.in_channels } else { c },
                        c,
                    ))
                };
                let skip = if config.enable_pie {
                    Some(PieParams::build(b, "pie", c, config.patch_size)?)
                } else {
                    None
                };
                Ok((enc, skip))
            })?;
            encoder.push(enc);
            skips.push(skip);
        }
        for l in 0..config.layers - 1 {
            let layer = format!("layer{l}");
            decoder.push(b.scope(&layer, |b| {
                if config.enable_crd {
                    DecoderStage::Crd(CrdParams::build(b, "crd", c))
                } else {
                    DecoderStage::Plain(PlainDecoder::build(b, "dec", c))
                }
            }));
        }
        let head = if config.enable_crd {
            OutConvParams::large(&mut b, "out_conv", c)
        } else {
            OutConvParams::pointwise(&mut b, "out_conv", c)
        };
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            skips,
            decoder,
            head,
        })
    }

    pub fn cast<U: Element>(&self) -> LsenetModel<U> {
        LsenetModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            skips: self.skips.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.logits)
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<ForwardTrace> {
        let (_, cin, h, w) = g.value(x).dims4()?;
        if cin != self.config.in_channels {
            return dim_err(format!(
                "model expects {} input channels, got {cin}",
                self.config.in_channels
            ));
        }
        let div = self.config.divisor();
        if h % div != 0 || w % div != 0 {
            return arg_err(format!("input {h}x{w} must be divisible by {div}"));
        }
        let mut skips = Vec::with_capacity(self.config.layers);
        let mut enhancements = Vec::with_capacity(self.config.layers);
        let mut prev: Option<Var> = None;
        for (l, (enc, skip)) in self.encoder.iter().zip(&self.skips).enumerate() {
            let down = match prev {
                Some(f) => Some(g.max_pool2d(f, 2)?),
                None => None,
            };
            let f = match enc {
                EncoderStage::Mff(m) => {
                    let x_in = if l == 0 { x } else { g.avg_pool2d(x, 1 << l)? };
                    mff_forward(g, p, m, x_in, down)?
                }
                EncoderStage::Plain(s) => s.forward(g, p, down.unwrap_or(x))?,
            };
            match skip {
                Some(pie) => {
                    let o = pie_forward_detailed(g, p, pie, f)?;
                    skips.push(o.out);
                    enhancements.push(Some(o.enhancement));
                }
                None => {
                    skips.push(f);
                    enhancements.push(None);
                }
            }
            prev = Some(f);
        }
        let mut d = *skips.last().expect("at least two layers");
        for l in (0..self.decoder.len()).rev() {
            let up = g.upsample2x(d)?;
            d = match &self.decoder[l] {
                DecoderStage::Crd(c) => crd_stage(g, p, c, up, skips[l])?,
                DecoderStage::Plain(c) => c.forward(g, p, up, skips[l])?,
            };
        }
        let logits = out_conv(g, p, &self.head, d)?;
        Ok(ForwardTrace {
            logits,
            enhancements,
        })
    }

    /// Inference on arbitrary sizes: zero-pads up to the next multiple of the
    /// divisor and crops the logits back.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (logits, _) = self.infer_traced(x)?;
        Ok(logits)
    }

    /// Like [`infer`](Self::infer), also returning each layer's enhancement
    /// map cropped to the unpadded region.
    pub fn infer_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Option<Tensor<T>>>)> {
        let (_, _, h, w) = x.dims4()?;
        let div = self.config.divisor();
        let (t, b) = symmetric_split(h.div_ceil(div) * div - h);
        let (l, r) = symmetric_split(w.div_ceil(div) * div - w);
        let pad = Pad2d::new(t, b, l, r);
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let xp = g.pad2d(xv, pad)?;
        let trace = self.forward_traced(&mut g, &p, xp)?;
        let logits = g.crop2d(trace.logits, pad)?;
        let mut maps = Vec::new();
        for (layer, e) in trace.enhancements.iter().enumerate() {
            maps.push(match e {
                Some(v) => {
                    let s = 1 << layer;
                    let crop = Pad2d::new(t / s, b / s, l / s, r / s);
                    let c = g.crop2d(*v, crop)?;
                    Some(g.value(c).clone())
                }
                None => None,
            });
        }
        Ok((g.value(logits).clone(), maps))
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}
