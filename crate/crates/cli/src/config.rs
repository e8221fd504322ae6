//! Run configuration: a TOML file of `key = value` lines under `[model]`,
//! `[train]`, `[synth]` and `[run]`, with command-line overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use lsenet::data::SynthConfig;
use lsenet::{LsenetConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub enable_mff: bool,
    pub enable_pie: bool,
    pub enable_crd: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = LsenetConfig::default();
        Self {
            layers: m.layers,
            channels: m.channels,
            patch_size: m.patch_size,
            in_channels: m.in_channels,
            enable_mff: m.enable_mff,
            enable_pie: m.enable_pie,
            enable_crd: m.enable_crd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr0: t.lr0,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            poly_power: t.poly_power,
            patience: t.patience,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub size: usize,
    pub n_vessels: [usize; 2],
    pub thickness: [f64; 2],
    pub contrast: [f64; 2],
    pub noise_sigma: f64,
    pub low_contrast_fraction: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            size: s.size,
            n_vessels: [s.n_vessels.0, s.n_vessels.1],
            thickness: [s.thickness.0, s.thickness.1],
            contrast: [s.contrast.0, s.contrast.1],
            noise_sigma: s.noise_sigma,
            low_contrast_fraction: s.low_contrast_fraction,
            train_count: 60,
            val_count: 10,
            test_count: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Root of every random stream: model init, data, shuffling.
    pub seed: u64,
    /// Dataset root holding `train/`, `val/`, `test/`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub out_dir: PathBuf,
    pub device_threads: usize,
    /// Square resolution for the FLOP count in `summary`.
    pub flop_size: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            synthetic: false,
            out_dir: PathBuf::from("runs"),
            device_threads: 1,
            flop_size: 224,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub synth: SynthSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }

    pub fn model(&self) -> LsenetConfig {
        let m = &self.model;
        LsenetConfig {
            layers: m.layers,
            channels: m.channels,
            patch_size: m.patch_size,
            in_channels: m.in_channels,
            enable_mff: m.enable_mff,
            enable_pie: m.enable_pie,
            enable_crd: m.enable_crd,
            seed: self.run.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr0: t.lr0,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            poly_power: t.poly_power,
            patience: t.patience,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            augment: t.augment,
            seed: self.run.seed,
        }
    }

    /// Generator settings; per-split seeds are derived from `run.seed`.
    pub fn synth(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            size: s.size,
            n_vessels: (s.n_vessels[0], s.n_vessels[1]),
            thickness: (s.thickness[0], s.thickness[1]),
            contrast: (s.contrast[0], s.contrast[1]),
            noise_sigma: s.noise_sigma,
            low_contrast_fraction: s.low_contrast_fraction,
            seed: self.run.seed,
        }
    }

    pub fn split_counts(&self) -> [usize; 3] {
        [
            self.synth.train_count,
            self.synth.val_count,
            self.synth.test_count,
        ]
    }

    /// Checks every section, naming the section in the message.
    pub fn validate(&self) -> Result<(), CliError> {
        let tag = |section: &str| {
            let section = section.to_string();
            move |e: lsenet::LsenetError| CliError::usage(format!("[{section}] {e}"))
        };
        self.model().validate().map_err(tag("model"))?;
        self.train().validate().map_err(tag("train"))?;
        self.synth().validate().map_err(tag("synth"))?;
        if self.run.device_threads == 0 {
            return Err(CliError::usage("[run] device_threads must be >= 1"));
        }
        if self.run.flop_size == 0 {
            return Err(CliError::usage("[run] flop_size must be >= 1"));
        }
        if self.run.synthetic && self.run.data.is_some() {
            return Err(CliError::usage(
                "[run] `data` and `synthetic` are mutually exclusive",
            ));
        }
        Ok(())
    }
}
