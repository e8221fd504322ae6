//! Random flips and small rotations applied identically to image and mask.

use lsenet_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::SamplePair;

pub const MAX_ROTATION_DEG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip_h: false,
        flip_v: false,
        angle_deg: 0.0,
    };

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }

    /// Flips first, then rotation about the image center. Images are sampled
    /// bilinearly and masks by nearest neighbour; outside pixels are zero.
    pub fn apply(&self, pair: &SamplePair) -> SamplePair {
        let (h, w) = (pair.height(), pair.width());
        let mut img = pair.image.data().to_vec();
        let mut mask = pair.mask.data().to_vec();
        for buf in [&mut img, &mut mask] {
            if self.flip_h {
                buf.chunks_mut(w).for_each(|row| row.reverse());
            }
            if self.flip_v {
                for y in 0..h / 2 {
                    let (top, bottom) = buf.split_at_mut((h - 1 - y) * w);
                    top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
                }
            }
        }
        if self.angle_deg != 0.0 {
            img = rotate(&img, h, w, self.angle_deg, false);
            mask = rotate(&mask, h, w, self.angle_deg, true);
        }
        SamplePair {
            image: Tensor::new(vec![1, h, w], img).expect("same shape"),
            mask: Tensor::new(vec![1, h, w], mask).expect("same shape"),
            id: pair.id.clone(),
        }
    }
}

fn rotate(src: &[f32], h: usize, w: usize, angle_deg: f64, nearest: bool) -> Vec<f32> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse map output -> source
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = c * dy - s * dx + cy;
            let sx = s * dy + c * dx + cx;
            out[y * w + x] = if nearest {
                at(sy.round() as isize, sx.round() as isize) as f32
            } else {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                (top * (1.0 - fy) + bot * fy) as f32
            };
        }
    }
    out
}

pub fn augment(pair: &SamplePair, rng: &mut ChaCha8Rng) -> SamplePair {
    AugmentParams::sample(rng).apply(pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> SamplePair {
        let img = Tensor::from_fn([1, 5, 6], |i| i as f32 / 30.0);
        let mask = Tensor::from_fn([1, 5, 6], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        SamplePair::new(img, mask, "p").unwrap()
    }

    #[test]
    fn identity_and_involutions() {
        let p = pair();
        assert_eq!(AugmentParams::IDENTITY.apply(&p), p);
        for (fh, fv) in [(true, false), (false, true), (true, true)] {
            let f = AugmentParams {
                flip_h: fh,
                flip_v: fv,
                angle_deg: 0.0,
            };
            assert_ne!(f.apply(&p), p);
            assert_eq!(f.apply(&f.apply(&p)), p);
        }
    }

    #[test]
    fn flips_move_pixels() {
        let p = pair();
        let h = AugmentParams {
            flip_h: true,
            ..AugmentParams::IDENTITY
        }
        .apply(&p);
        assert_eq!(h.image.at(&[0, 0, 0]), p.image.at(&[0, 0, 5]));
        let v = AugmentParams {
            flip_v: true,
            ..AugmentParams::IDENTITY
        }
        .apply(&p);
        assert_eq!(v.image.at(&[0, 0, 2]), p.image.at(&[0, 4, 2]));
        assert_eq!(v.image.at(&[0, 2, 2]), p.image.at(&[0, 2, 2]));
    }

    #[test]
    fn rotation_keeps_mask_binary() {
        let p = pair();
        let r = AugmentParams {
            angle_deg: 17.0,
            ..AugmentParams::IDENTITY
        }
        .apply(&p);
        assert!(r.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(r.image.shape(), p.image.shape());
    }
}
