mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lsenet::data::Split;
use lsenet::LsenetError;
use lsenet_tensor::TensorError;

use config::RunConfig;

/// Vessel segmentation: train, evaluate and run lsenet models.
#[derive(Parser)]
#[command(name = "lsenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-sample metrics and the mean±sd row for one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "mask_as_prediction")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score the ground-truth masks against themselves instead of a model.
        #[arg(long)]
        mask_as_prediction: bool,
    },
    /// Write probability maps, binary masks and optional heatmaps.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write one enhancement heatmap per skip connection.
        #[arg(long)]
        heatmaps: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Per-module parameter and FLOP counts.
    Summary {
        #[command(flatten)]
        common: Common,
        /// Square input size for the FLOP count.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Finite-difference check of the end-to-end gradient on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Square input size.
        #[arg(long, default_value_t = 16)]
        input_size: usize,
        /// Coordinates checked per parameter tensor; 0 checks all.
        #[arg(long, default_value_t = 24)]
        coords: usize,
    },
    /// Write a synthetic dataset in the on-disk layout.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Mff,
    Pie,
    Crd,
}

#[derive(Args, Default)]
struct Common {
    /// TOML file with [model], [train], [synth] and [run] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dataset root with train/, val/ and test/ splits.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use generated vessel images instead of a dataset on disk.
    #[arg(long)]
    synthetic: bool,
    /// Switch modules off; repeat or comma-separate.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<Module>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Worker threads for evaluation and prediction.
    #[arg(long)]
    device_threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Synthetic image size.
    #[arg(long)]
    size: Option<usize>,
}

impl Common {
    /// File values, then flags; the result is validated.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.run.out_dir = d.clone();
        }
        if let Some(d) = &self.data {
            cfg.run.data = Some(d.clone());
            cfg.run.synthetic = false;
        }
        if self.synthetic {
            cfg.run.synthetic = true;
            cfg.run.data = None;
        }
        for m in &self.ablate {
            match m {
                Module::Mff => cfg.model.enable_mff = false,
                Module::Pie => cfg.model.enable_pie = false,
                Module::Crd => cfg.model.enable_crd = false,
            }
        }
        if let Some(v) = self.patch_size {
            cfg.model.patch_size = v;
        }
        if let Some(v) = self.layers {
            cfg.model.layers = v;
        }
        if let Some(v) = self.channels {
            cfg.model.channels = v;
        }
        if let Some(v) = self.device_threads {
            cfg.run.device_threads = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.size {
            cfg.synth.size = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether the caller pinned the architecture, so a checkpoint must agree.
    fn pins_model(&self) -> bool {
        self.config.is_some()
            || !self.ablate.is_empty()
            || self.patch_size.is_some()
            || self.layers.is_some()
            || self.channels.is_some()
    }
}

/// Exit code 2 for usage, configuration and data problems; 3 for numerical
/// failures.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<LsenetError> for CliError {
    fn from(e: LsenetError) -> Self {
        match e {
            LsenetError::NonFinite(_) | LsenetError::Tensor(TensorError::NonFinite { .. }) => {
                Self::numeric(e.to_string())
            }
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        LsenetError::from(e).into()
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, resume } => commands::train(&common.resolve()?, resume),
        Command::Eval {
            common,
            checkpoint,
            split,
            mask_as_prediction,
        } => {
            let cfg = common.resolve()?;
            let source = if mask_as_prediction {
                commands::Predictor::Masks
            } else {
                let path = checkpoint.expect("required by the parser");
                commands::Predictor::Model(commands::load_model(&path, &cfg, common.pins_model())?)
            };
            commands::eval(&cfg, split, &source)
        }
        Command::Predict {
            common,
            checkpoint,
            heatmaps,
            images,
        } => {
            let cfg = common.resolve()?;
            let model = commands::load_model(&checkpoint, &cfg, common.pins_model())?;
            commands::predict(&cfg, &model, &images, heatmaps)
        }
        Command::Summary { common, resolution } => {
            let mut cfg = common.resolve()?;
            if let Some(r) = resolution {
                cfg.run.flop_size = r;
            }
            commands::summary(&cfg)
        }
        Command::Gradcheck {
            common,
            input_size,
            coords,
        } => {
            let cfg = common.resolve()?;
            let layers = common.layers.unwrap_or(2);
            let patch = common.patch_size.unwrap_or(2);
            let channels = common.channels.unwrap_or(8);
            commands::gradcheck(&cfg, [layers, channels, patch], input_size, coords)
        }
        Command::Synth { common } => commands::synth(&common.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
