//! Vessel segmentation network with patch attention skips, multiscale
//! encoder fusion and a large-kernel refinement decoder, plus the loss,
//! metrics, data and training code around it.

pub mod accounting;
pub mod blocks;
pub mod checkpoint;
pub mod crd;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mff;
pub mod network;
pub mod params;
pub mod pie;
pub mod seed;
pub mod train;

pub use accounting::{count_flops, count_params, FlopReport, ParamReport};
pub use error::{LsenetError, Result};
pub use network::{LsenetConfig, LsenetModel};
pub use params::{Bound, ParamId, ParamRole, ParamStore};
pub use train::{TrainConfig, TrainState};
