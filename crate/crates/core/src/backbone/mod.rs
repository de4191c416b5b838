//! Frozen 19-layer VGG backbone with named post-rectification taps.
//!
//! The network is the convolutional part of VGG19 (16 conv layers in five
//! blocks, 2×2 max pooling between blocks). Taps are named after the
//! rectifier that produces them (`relu1_1` … `relu5_4`); `pool1` … `pool5`
//! are the pooled block outputs and `final_encoding` is an alias of `pool5`.
//!
//! Besides activations the backbone computes gradients of any scalar
//! objective over tap activations with respect to the network input, which
//! is what image optimization needs. Weights are never mutated after load.

mod prepare;
mod vgg;
pub(crate) mod weights;

use thiserror::Error;

pub use prepare::{prepare_input, InputPipeline, ResizePlan, IMAGENET_MEAN, IMAGENET_STD};
pub use vgg::{Backbone, FeatureMap, TapObjective, VGG19_BLOCKS};
pub use weights::{load_backbone, save_backbone, WeightSource};

/// Default square input side.
pub const DEFAULT_INPUT_SIZE: usize = 224;
/// Smallest input side the five pooling stages tolerate.
pub const MIN_INPUT_SIZE: usize = 32;

/// Style taps used for features and style loss, in network order.
pub const DEFAULT_STYLE_TAPS: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];
/// Tap used for the content loss.
pub const DEFAULT_CONTENT_TAP: &str = "relu4_2";
/// Tap flattened into the conventional CNN embedding.
pub const FINAL_ENCODING: &str = "final_encoding";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("unknown tap `{0}`")]
    UnknownTap(String),
    #[error("input side {0} is below the minimum of {MIN_INPUT_SIZE}")]
    InputTooSmall(usize),
    #[error("input must have 3 channels, got {0}")]
    InputChannels(usize),
    #[error("empty crop")]
    EmptyCrop,
    #[error("weights file {path}: {message}")]
    Weights { path: String, message: String },
    #[error("weights do not match the VGG19 topology:\n{}", format_mismatches(.0))]
    Topology(Vec<ShapeMismatch>),
    #[error("objective returned {got} gradients for {expected} taps")]
    ObjectiveArity { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One layer whose stored shape differs from the declared topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub tensor: String,
    pub expected: Vec<usize>,
    pub found: Option<Vec<usize>>,
}

fn format_mismatches(list: &[ShapeMismatch]) -> String {
    list.iter()
        .map(|m| match &m.found {
            Some(found) => format!("  {}: expected {:?}, found {:?}", m.tensor, m.expected, found),
            None => format!("  {}: expected {:?}, missing", m.tensor, m.expected),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T, E = BackboneError> = std::result::Result<T, E>;

/// A named tap and its shape for a given input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationTap {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ActivationTap {
    /// Length of the flattened activation (`N·H·W`).
    pub fn flat_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}
