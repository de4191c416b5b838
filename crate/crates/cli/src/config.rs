use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use iris_style::backbone::{WeightSource, DEFAULT_INPUT_SIZE};
use iris_style::gaze::GazeTrainConfig;
use iris_style::imaging::DEFAULT_GLINT_THRESHOLD;
use iris_style::recognition::TrainConfig;
use iris_style::transfer::TransferConfig;

pub const WEIGHTS_ENV: &str = "ISL_WEIGHTS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Recognition,
    Gaze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub kind: DataKind,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { root: None, kind: DataKind::Recognition, test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    /// Safetensors path or `random:<seed>`.
    pub weights: Option<String>,
    pub input_size: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self { weights: None, input_size: DEFAULT_INPUT_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlintSection {
    pub threshold: u8,
}

impl Default for GlintSection {
    fn default() -> Self {
        Self { threshold: DEFAULT_GLINT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    /// Backbone input size during optimisation; defaults to `backbone.input_size`.
    pub input_size: Option<usize>,
}

impl Default for TransferSection {
    fn default() -> Self {
        let d = TransferConfig::default();
        Self { alpha: d.alpha, beta: d.beta, epochs: d.epochs, input_size: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub dropout: f32,
    pub standardize: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self { batch_size: d.batch_size, learning_rate: d.learning_rate, epochs: d.epochs, hidden: d.hidden, dropout: d.dropout, standardize: d.standardize }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GazeSection {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    /// Mask source for the model-based estimator: `threshold` or `ground-truth`.
    pub provider: String,
    /// Safetensors ResNet50 weights; without them a seeded small conv net is used.
    pub appearance_weights: Option<PathBuf>,
    pub appearance_input_size: usize,
}

impl Default for GazeSection {
    fn default() -> Self {
        let d = GazeTrainConfig::default();
        Self {
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            hidden: d.hidden,
            provider: "threshold".into(),
            appearance_weights: None,
            appearance_input_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub glint: GlintSection,
    pub transfer: TransferSection,
    pub train: TrainSection,
    pub gaze: GazeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: iris_style::rng::DEFAULT_SEED,
            out_dir: PathBuf::from("out"),
            data: DataSection::default(),
            backbone: BackboneSection::default(),
            glint: GlintSection::default(),
            transfer: TransferSection::default(),
            train: TrainSection::default(),
            gaze: GazeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            bail!("data.test_fraction must be in (0, 1), got {}", self.data.test_fraction);
        }
        if self.glint.threshold == 0 {
            bail!("glint.threshold must be in 1..=255");
        }
        if !(self.train.learning_rate > 0.0) || !(self.gaze.learning_rate > 0.0) {
            bail!("learning rates must be positive");
        }
        if self.train.batch_size == 0 || self.gaze.batch_size == 0 {
            bail!("batch sizes must be positive");
        }
        Ok(())
    }

    /// Flag, then config file, then `ISL_WEIGHTS`; `None` when none is set.
    pub fn weight_source(&self) -> Option<WeightSource> {
        let raw = self.backbone.weights.clone().or_else(|| std::env::var(WEIGHTS_ENV).ok().filter(|s| !s.trim().is_empty()))?;
        Some(raw.parse().unwrap_or(WeightSource::File(PathBuf::from(raw))))
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig::with_weights(self.transfer.alpha, self.transfer.beta, self.transfer.epochs)
    }

    pub fn transfer_input_size(&self) -> usize {
        self.transfer.input_size.unwrap_or(self.backbone.input_size)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            seed: self.seed,
            hidden: t.hidden.clone(),
            dropout: t.dropout,
            standardize: t.standardize,
        }
    }

    pub fn gaze_config(&self) -> GazeTrainConfig {
        let g = &self.gaze;
        GazeTrainConfig { batch_size: g.batch_size, learning_rate: g.learning_rate, epochs: g.epochs, seed: self.seed, hidden: g.hidden.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_dotted_keys() {
        let c = RunConfig::parse("seed = 7\n[backbone]\ninput_size = 64\n[transfer]\nbeta = 10.0\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.backbone.input_size, 64);
        assert_eq!(c.transfer.beta, 10.0);
        assert_eq!(c.transfer.epochs, 200);
        assert_eq!(c.glint.threshold, 250);
        assert_eq!(c.train.learning_rate, 1e-5);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[train]\nlearning_rat = 0.1").is_err());
    }

    #[test]
    fn snapshot_roundtrips() {
        let c = RunConfig { seed: 9, ..Default::default() };
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
