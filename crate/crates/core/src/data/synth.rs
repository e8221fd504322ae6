//! Procedural vessel trees on a textured background.

use std::f64::consts::{PI, TAU};

use lsenet_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SamplePair;
use crate::error::{config_err, Result};
use crate::seed::{derive_seed, rng_for, stream};

/// Intensity gap of a low-contrast segment relative to the nominal gap.
pub const LOW_CONTRAST_SCALE: f64 = 0.3;
/// Upper bound of the background texture.
const BACKGROUND_MAX: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Inclusive range of root vessels per image.
    pub n_vessels: (usize, usize),
    /// Root vessel diameter range in pixels.
    pub thickness: (f64, f64),
    /// Vessel-over-background intensity gap range.
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
    pub low_contrast_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 96,
            n_vessels: (3, 5),
            thickness: (1.5, 3.5),
            contrast: (0.4, 0.8),
            noise_sigma: 0.05,
            low_contrast_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(8) {
            return config_err(format!(
                "synthetic size must be a positive multiple of 8, got {}",
                self.size
            ));
        }
        let (v0, v1) = self.n_vessels;
        if v0 == 0 || v0 > v1 {
            return config_err(format!("bad vessel count range {v0}..={v1}"));
        }
        let (t0, t1) = self.thickness;
        if !(t0 > 0.0 && t0 <= t1 && t1.is_finite()) {
            return config_err(format!("bad thickness range {t0}..{t1}"));
        }
        let (c0, c1) = self.contrast;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return config_err(format!("contrast range {c0}..{c1} must lie in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return config_err(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(0.0..=1.0).contains(&self.low_contrast_fraction) {
            return config_err(format!(
                "low contrast fraction {} outside [0, 1]",
                self.low_contrast_fraction
            ));
        }
        Ok(())
    }
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    gap: f64,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Smooth random walk that leaves children behind as it goes.
#[allow(clippy::too_many_arguments)]
fn grow(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    out: &mut Vec<Segment>,
    start: (f64, f64),
    heading: f64,
    thickness: f64,
    gap: f64,
    depth: usize,
) {
    let size = cfg.size as f64;
    let step = (size / 24.0).max(1.5);
    let max_steps = 2 * cfg.size;
    let (mut p, mut theta, mut t) = (start, heading, thickness);
    let mut turn = 0.0;
    for _ in 0..max_steps {
        turn = 0.6 * turn + rng.random_range(-0.15..0.15);
        theta += turn;
        let q = (p.0 + step * theta.sin(), p.1 + step * theta.cos());
        let low = rng.random_bool(cfg.low_contrast_fraction);
        out.push(Segment {
            a: p,
            b: q,
            radius: t / 2.0,
            gap: if low { gap * LOW_CONTRAST_SCALE } else { gap },
        });
        p = q;
        t = (t * 0.985).max(1.5);
        if depth < 2 && rng.random_bool(0.03) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let child = theta + side * rng.random_range(0.4..1.1);
            grow(rng, cfg, out, p, child, (t * 0.7).max(1.5), gap, depth + 1);
        }
        let margin = 2.0 * step;
        if p.0 < -margin || p.1 < -margin || p.0 > size + margin || p.1 > size + margin {
            break;
        }
    }
}

fn dist2_to_segment(p: (f64, f64), s: &Segment) -> f64 {
    let (dy, dx) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * dy + (p.1 - s.a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cy, cx) = (s.a.0 + t * dy, s.a.1 + t * dx);
    (p.0 - cy).powi(2) + (p.1 - cx).powi(2)
}

fn sample(cfg: &SynthConfig, index: usize) -> SamplePair {
    let mut rng = rng_for(cfg.seed, index as u64);
    let n = cfg.size;
    let size = n as f64;

    // low-frequency background: a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.random_range(0.5..3.0) * TAU / size;
            let a = rng.random_range(0.0..PI);
            (f * a.sin(), f * a.cos(), rng.random_range(0.0..TAU))
        })
        .collect();
    let mut image = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let s: f64 = waves
                .iter()
                .map(|(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
            image[y * n + x] = BACKGROUND_MAX * (0.5 + s / 6.0);
        }
    }

    let mut segs = Vec::new();
    let roots = rng.random_range(cfg.n_vessels.0..=cfg.n_vessels.1);
    for _ in 0..roots {
        // enter from a random border point, aimed at an interior point
        let along = rng.random_range(0.0..size);
        let start = match rng.random_range(0..4) {
            0 => (0.0, along),
            1 => (size, along),
            2 => (along, 0.0),
            _ => (along, size),
        };
        let aim = (
            rng.random_range(0.25 * size..0.75 * size),
            rng.random_range(0.25 * size..0.75 * size),
        );
        let heading = (aim.0 - start.0).atan2(aim.1 - start.1);
        let thickness = uniform(&mut rng, cfg.thickness);
        let gap = uniform(&mut rng, cfg.contrast);
        grow(&mut rng, cfg, &mut segs, start, heading, thickness, gap, 0);
    }

    let mut gap_map = vec![0.0f64; n * n];
    let mut mask = vec![0.0f32; n * n];
    for s in &segs {
        let r = s.radius;
        let y0 = (s.a.0.min(s.b.0) - r).floor().max(0.0) as usize;
        let y1 = ((s.a.0.max(s.b.0) + r).ceil().max(0.0) as usize).min(n);
        let x0 = (s.a.1.min(s.b.1) - r).floor().max(0.0) as usize;
        let x1 = ((s.a.1.max(s.b.1) + r).ceil().max(0.0) as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                if dist2_to_segment((y as f64 + 0.5, x as f64 + 0.5), s) <= r * r {
                    let i = y * n + x;
                    mask[i] = 1.0;
                    gap_map[i] = gap_map[i].max(s.gap);
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let pixels: Vec<f32> = image
        .iter()
        .zip(&gap_map)
        .map(|(&bg, &gap)| {
            let e = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (bg + gap + e).clamp(0.0, 1.0) as f32
        })
        .collect();
    SamplePair {
        image: Tensor::new(vec![1, n, n], pixels).expect("sized above"),
        mask: Tensor::new(vec![1, n, n], mask).expect("sized above"),
        id: format!("synth_{index:05}"),
    }
}

/// `count` pairs with indices `0..count`; pair `i` depends only on
/// `(config, i)`.
pub fn generate_synthetic(config: &SynthConfig, count: usize) -> Result<Vec<SamplePair>> {
    config.validate()?;
    Ok((0..count).map(|i| sample(config, i)).collect())
}

/// Train/val/test pairs drawn from independent streams of one root seed.
/// `config.seed` is ignored.
pub fn synthetic_splits(
    config: &SynthConfig,
    root: u64,
    counts: [usize; 3],
) -> Result<[Vec<SamplePair>; 3]> {
    let split = |id: u64, n: usize| {
        let cfg = SynthConfig {
            seed: derive_seed(root, id),
            ..config.clone()
        };
        generate_synthetic(&cfg, n)
    };
    Ok([
        split(stream::TRAIN_DATA, counts[0])?,
        split(stream::VAL_DATA, counts[1])?,
        split(stream::TEST_DATA, counts[2])?,
    ])
}
