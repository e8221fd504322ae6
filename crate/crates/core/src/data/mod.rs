//! Image/mask pairs: synthetic generation, augmentation and PNG storage.

mod augment;
mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use lsenet_tensor::Tensor;

pub use augment::{augment, AugmentParams};
pub use io::{load_dataset, load_gray_png, save_dataset, save_gray_png};
pub use synth::{generate_synthetic, synthetic_splits, SynthConfig};

use crate::error::{LsenetError, Result};

/// One grayscale image in `[0,1]` and its binary mask, both `[1,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub id: String,
}

impl SamplePair {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 1 || is != ms {
            return Err(LsenetError::Data(format!(
                "sample {id}: image {is:?} and mask {ms:?} must both be [1,H,W]"
            )));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(LsenetError::Data(format!(
                "sample {id}: mask value {v} is not binary"
            )));
        }
        Ok(Self { image, mask, id })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Rescales the image so its minimum maps to 0 and maximum to 1. A
    /// constant image becomes all zeros.
    pub fn normalized(&self) -> Self {
        let d = self.image.data();
        let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let image = if span > 0.0 {
            self.image.map(|v| (v - lo) / span)
        } else {
            self.image.map(|_| 0.0)
        };
        Self {
            image,
            mask: self.mask.clone(),
            id: self.id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = LsenetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(LsenetError::Config(format!(
                "unknown split `{s}` (train, val, test)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_validation() {
        let img = Tensor::<f32>::zeros([1, 4, 4]);
        assert!(SamplePair::new(img.clone(), Tensor::zeros([1, 4, 4]), "a").is_ok());
        assert!(SamplePair::new(img.clone(), Tensor::zeros([1, 4, 5]), "a").is_err());
        assert!(SamplePair::new(img, Tensor::full([1, 4, 4], 0.5), "a").is_err());
    }

    #[test]
    fn minmax() {
        let img = Tensor::from_f64([1, 1, 3], &[0.25, 0.5, 0.75]).unwrap();
        let p = SamplePair::new(img, Tensor::zeros([1, 1, 3]), "a")
            .unwrap()
            .normalized();
        assert_eq!(p.image.data(), &[0.0, 0.5, 1.0]);
    }
}
