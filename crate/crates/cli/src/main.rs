mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

/// Iris style features, iris style transfer and their evaluation.
#[derive(Debug, Parser)]
#[command(name = "isl", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (config `out_dir`).
    #[arg(long = "out-dir", global = true)]
    pub out_dir: Option<PathBuf>,
    /// Dataset root (config `data.root`).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Dataset layout (config `data.kind`).
    #[arg(long = "data-kind", global = true, value_enum)]
    pub data_kind: Option<DataKindArg>,
    /// Backbone weights: safetensors path or `random:<seed>` (config `backbone.weights`).
    #[arg(long, global = true)]
    pub weights: Option<String>,
    /// Backbone input side (config `backbone.input_size`).
    #[arg(long = "input-size", global = true)]
    pub input_size: Option<usize>,
    /// Backbone input side while stylizing (config `transfer.input_size`).
    #[arg(long = "transfer-size", global = true)]
    pub transfer_size: Option<usize>,
    #[arg(long = "glint-threshold", global = true)]
    pub glint_threshold: Option<u8>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataKindArg {
    Recognition,
    Gaze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    Style,
    Cnn,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariationArg {
    Rotation,
    Perspective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GazeKindArg {
    Model,
    Appearance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformArg {
    None,
    Stylize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Recognition,
    Gaze,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Transfer epochs (config `transfer.epochs`).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic eye corpus.
    Synth {
        #[arg(long, default_value_t = 10)]
        users: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        height: usize,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, value_enum, default_value_t = LayoutArg::Recognition)]
        layout: LayoutArg,
        /// Corpus directory (defaults to the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute feature vectors into the cache.
    Extract {
        #[arg(long, value_enum, default_value_t = FeatureArg::All)]
        feature: FeatureArg,
        /// Cache directory (default `<out-dir>/cache`).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Also write every iris crop as PNG here.
        #[arg(long = "dump-crops")]
        dump_crops: Option<PathBuf>,
    },
    /// Train a classifier head on the training split.
    Train {
        #[arg(long, value_enum)]
        feature: FeatureArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score trained heads on the test split.
    Eval {
        #[arg(long, value_enum, default_value_t = FeatureArg::All)]
        feature: FeatureArg,
        /// Directory holding `<kind>.islh` (default `<out-dir>/heads`).
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Accuracy of frozen heads under rotation or perspective changes.
    Sweep {
        #[arg(long, value_enum)]
        variation: VariationArg,
        /// Comma separated, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        degrees: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = FeatureArg::All)]
        feature: FeatureArg,
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Stylize one eye image with another's iris style.
    Transfer {
        #[arg(long)]
        content: PathBuf,
        #[arg(long = "content-mask")]
        content_mask: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long = "style-mask")]
        style_mask: PathBuf,
        #[command(flatten)]
        transfer: TransferArgs,
        /// Output PNG; the loss trace goes next to it as CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recognition accuracy over a grid of style weights and epochs.
    Heatmap {
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long = "epoch-grid", value_delimiter = ',')]
        epoch_grid: Option<Vec<usize>>,
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Segmentation IoU before and after stylization.
    SegImpact {
        /// `threshold` or `ground-truth`.
        #[arg(long)]
        provider: Option<String>,
        #[command(flatten)]
        transfer: TransferArgs,
    },
    /// Gaze error before or after stylization.
    GazeEval {
        #[arg(long, value_enum)]
        kind: GazeKindArg,
        #[arg(long, value_enum, default_value_t = TransformArg::None)]
        transform: TransformArg,
        #[command(flatten)]
        transfer: TransferArgs,
        /// Gaze head training epochs (config `gaze.epochs`).
        #[arg(long = "train-epochs")]
        train_epochs: Option<usize>,
    },
    /// False acceptance of donor identities after stylization.
    Far {
        #[arg(long, value_enum, default_value_t = FeatureArg::Style)]
        feature: FeatureArg,
        #[arg(long)]
        heads: Option<PathBuf>,
        #[command(flatten)]
        transfer: TransferArgs,
    },
    /// Redraw plots from the CSV tables in a results directory.
    Report {
        /// Directory with `sweep_*.csv` / `heatmap.csv` (default `<out-dir>`).
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

impl Cli {
    /// Effective config: defaults, then the file, then flags.
    pub fn resolve_config(&self) -> anyhow::Result<RunConfig> {
        let g = &self.global;
        let mut c = match &g.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = g.seed {
            c.seed = v;
        }
        if let Some(v) = &g.out_dir {
            c.out_dir = v.clone();
        }
        if let Some(v) = &g.data {
            c.data.root = Some(v.clone());
        }
        if let Some(v) = g.data_kind {
            c.data.kind = match v {
                DataKindArg::Recognition => config::DataKind::Recognition,
                DataKindArg::Gaze => config::DataKind::Gaze,
            };
        }
        if let Some(v) = &g.weights {
            c.backbone.weights = Some(v.clone());
        }
        if let Some(v) = g.input_size {
            c.backbone.input_size = v;
        }
        if let Some(v) = g.transfer_size {
            c.transfer.input_size = Some(v);
        }
        if let Some(v) = g.glint_threshold {
            c.glint.threshold = v;
        }
        let transfer = match &self.command {
            Command::Transfer { transfer, .. } | Command::SegImpact { transfer, .. } | Command::GazeEval { transfer, .. } | Command::Far { transfer, .. } => {
                Some(transfer)
            }
            _ => None,
        };
        if let Some(t) = transfer {
            if let Some(v) = t.alpha {
                c.transfer.alpha = v;
            }
            if let Some(v) = t.beta {
                c.transfer.beta = v;
            }
            if let Some(v) = t.epochs {
                c.transfer.epochs = v;
            }
        }
        match &self.command {
            Command::Train { epochs, lr, batch, .. } => {
                if let Some(v) = epochs {
                    c.train.epochs = *v;
                }
                if let Some(v) = lr {
                    c.train.learning_rate = *v;
                }
                if let Some(v) = batch {
                    c.train.batch_size = *v;
                }
            }
            Command::GazeEval { train_epochs: Some(v), .. } => c.gaze.epochs = *v,
            _ => {}
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
