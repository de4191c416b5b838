//! Iris style transfer by direct pixel optimization.
//!
//! The output crop starts from the content crop (or noise) and is updated by
//! a projected L-BFGS so that its activations at the content tap stay close
//! to the content crop while its channel statistics at the style taps move
//! toward the donor's. Only valid iris pixels (iris minus glints) are free
//! variables; everything else keeps its initial value.

mod lbfgs;

use std::cell::Cell;

use rand::Rng;
use thiserror::Error;

pub use lbfgs::{Evaluated, Lbfgs, StepError, StepOutcome, GRADIENT_TOLERANCE};

use crate::backbone::{Backbone, BackboneError, FeatureMap, InputPipeline, TapObjective, DEFAULT_CONTENT_TAP, DEFAULT_STYLE_TAPS};
use crate::features::{channel_stats, ChannelStats};
use crate::imaging::{extract_iris, reinsert, EyeImage, ImagingError, IrisCrop, SegMask};
use crate::tensor::{Real, Tensor3};

/// Curvature pairs kept by the optimizer.
pub const LBFGS_HISTORY: usize = 100;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("feature maps differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("style statistics differ at tap {tap}: {expected} vs {found} channels")]
    ChannelMismatch { tap: usize, expected: usize, found: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize, last_finite: Box<IrisCrop> },
    #[error("invalid transfer config: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T, E = TransferError> = std::result::Result<T, E>;

/// Mean squared difference between two maps.
pub fn content_loss<T: Real>(target: &Tensor3<T>, current: &Tensor3<T>) -> Result<f64> {
    Ok(content_loss_and_grad(target, current, false)?.0)
}

fn content_loss_and_grad<T: Real>(target: &Tensor3<T>, current: &Tensor3<T>, want_grad: bool) -> Result<(f64, Option<Tensor3<T>>)> {
    if target.shape() != current.shape() {
        return Err(TransferError::ShapeMismatch(target.shape(), current.shape()));
    }
    let n = target.data.len() as f64;
    let mut sum = 0.0;
    for (a, b) in target.data.iter().zip(&current.data) {
        let d = b.as_f64() - a.as_f64();
        sum += d * d;
    }
    let grad = want_grad.then(|| {
        let data = target.data.iter().zip(&current.data).map(|(a, b)| T::lit(2.0 * (b.as_f64() - a.as_f64()) / n)).collect();
        Tensor3::from_vec(target.channels, target.height, target.width, data)
    });
    Ok((sum / n, grad))
}

fn check_channels(target: &[ChannelStats], current: &[ChannelStats], weights: &[f64]) -> Result<()> {
    if target.len() != current.len() || target.len() != weights.len() {
        return Err(TransferError::Config(format!(
            "{} target taps, {} current taps, {} weights",
            target.len(),
            current.len(),
            weights.len()
        )));
    }
    for (tap, (s, x)) in target.iter().zip(current).enumerate() {
        if s.channels() != x.channels() {
            return Err(TransferError::ChannelMismatch { tap, expected: s.channels(), found: x.channels() });
        }
    }
    Ok(())
}

fn tap_style_loss(target: &ChannelStats, current: &ChannelStats) -> f64 {
    let n = target.channels() as f64;
    let mut sum = 0.0;
    for i in 0..target.channels() {
        let dm = target.mean[i] - current.mean[i];
        let ds = target.std[i] - current.std[i];
        sum += dm * dm + ds * ds;
    }
    sum / n
}

/// Weighted sum over taps of the mean squared mismatch of channel means and
/// standard deviations.
pub fn style_loss(target: &[ChannelStats], current: &[ChannelStats], weights: &[f64]) -> Result<f64> {
    check_channels(target, current, weights)?;
    Ok(target.iter().zip(current).zip(weights).map(|((s, x), w)| w * tap_style_loss(s, x)).sum())
}

/// Content, style and weighted total loss at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    CloneContent,
    /// Uniform noise on the free pixels.
    RandomNoise { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_inner_evals: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { step_size: 1.0, max_inner_evals: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub content_tap: String,
    /// Style taps with their weights.
    pub style_taps: Vec<(String, f64)>,
    pub optimizer: OptimizerConfig,
    pub init: Init,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            epochs: 200,
            content_tap: DEFAULT_CONTENT_TAP.to_string(),
            style_taps: equal_weights(&DEFAULT_STYLE_TAPS),
            optimizer: OptimizerConfig::default(),
            init: Init::CloneContent,
        }
    }
}

/// Taps with equal weights summing to one.
pub fn equal_weights(taps: &[&str]) -> Vec<(String, f64)> {
    let w = 1.0 / taps.len() as f64;
    taps.iter().map(|t| (t.to_string(), w)).collect()
}

impl TransferConfig {
    pub fn with_weights(alpha: f64, beta: f64, epochs: usize) -> Self {
        Self { alpha, beta, epochs, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TransferError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.alpha + self.beta <= 0.0 {
            return bad("alpha + beta must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.style_taps.is_empty() && self.beta > 0.0 {
            return bad("style weight set without style taps");
        }
        if self.style_taps.iter().any(|(_, w)| !(*w >= 0.0)) {
            return bad("style tap weights must be non-negative");
        }
        if self.optimizer.max_inner_evals == 0 || !(self.optimizer.step_size > 0.0) {
            return bad("optimizer needs a positive step size and evaluation budget");
        }
        Ok(())
    }
}

/// The weighted transfer objective with frozen targets.
#[derive(Debug)]
pub struct TotalLoss<T> {
    alpha: f64,
    beta: f64,
    content_tap: Option<String>,
    content_target: Option<Tensor3<T>>,
    style_taps: Vec<String>,
    style_weights: Vec<f64>,
    style_targets: Vec<ChannelStats>,
    last: Cell<LossTerms>,
}

impl<T: Real> TotalLoss<T> {
    /// Computes the frozen targets from prepared network inputs.
    pub fn new(net: &Backbone<T>, content_input: &Tensor3<T>, style_input: &Tensor3<T>, config: &TransferConfig) -> Result<Self> {
        config.validate()?;
        let use_content = config.alpha > 0.0;
        let use_style = config.beta > 0.0;
        let content_target = if use_content {
            Some(net.activations(content_input, &[config.content_tap.as_str()])?.remove(0).values)
        } else {
            None
        };
        let style_taps: Vec<String> = if use_style { config.style_taps.iter().map(|(t, _)| t.clone()).collect() } else { Vec::new() };
        let refs: Vec<&str> = style_taps.iter().map(String::as_str).collect();
        let style_targets = net.activations(style_input, &refs)?.iter().map(|m| channel_stats(&m.values)).collect();
        Ok(Self {
            alpha: config.alpha,
            beta: config.beta,
            content_tap: use_content.then(|| config.content_tap.clone()),
            content_target,
            style_weights: if use_style { config.style_taps.iter().map(|(_, w)| *w).collect() } else { Vec::new() },
            style_taps,
            style_targets,
            last: Cell::new(LossTerms::default()),
        })
    }

    pub fn style_targets(&self) -> &[ChannelStats] {
        &self.style_targets
    }

    pub fn content_target(&self) -> Option<&Tensor3<T>> {
        self.content_target.as_ref()
    }

    /// Terms of the most recent evaluation.
    pub fn last_terms(&self) -> LossTerms {
        self.last.get()
    }
}

impl<T: Real> TapObjective<T> for TotalLoss<T> {
    fn taps(&self) -> Vec<String> {
        self.content_tap.iter().cloned().chain(self.style_taps.iter().cloned()).collect()
    }

    fn evaluate(&self, maps: &[FeatureMap<T>]) -> (f64, Vec<Tensor3<T>>) {
        let mut grads = Vec::with_capacity(maps.len());
        let mut maps = maps.iter();
        let mut terms = LossTerms::default();
        if let Some(target) = &self.content_target {
            let current = &maps.next().expect("content tap").values;
            let (value, grad) = content_loss_and_grad(target, current, true).expect("content shapes are fixed by the backbone");
            let mut grad = grad.expect("requested");
            for g in &mut grad.data {
                *g *= T::lit(self.alpha);
            }
            terms.content = value;
            grads.push(grad);
        }
        for ((target, weight), map) in self.style_targets.iter().zip(&self.style_weights).zip(maps) {
            let current = channel_stats(&map.values);
            terms.style += weight * tap_style_loss(target, &current);
            let scale = 2.0 * self.beta * weight / target.channels() as f64;
            let grad_mean: Vec<f64> = current.mean.iter().zip(&target.mean).map(|(x, s)| scale * (x - s)).collect();
            let grad_std: Vec<f64> = current.std.iter().zip(&target.std).map(|(x, s)| scale * (x - s)).collect();
            grads.push(current.backward(&map.values, &grad_mean, &grad_std));
        }
        terms.total = self.alpha * terms.content + self.beta * terms.style;
        self.last.set(terms);
        (terms.total, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub stylized: IrisCrop,
    pub initial: LossTerms,
    /// Loss after each epoch.
    pub trace: Vec<LossTerms>,
}

impl TransferResult {
    pub fn final_terms(&self) -> LossTerms {
        self.trace.last().copied().unwrap_or(self.initial)
    }
}

/// Stylizes `content` with the statistics of `style`.
pub fn transfer<T: Real>(net: &Backbone<T>, content: &IrisCrop, style: &IrisCrop, config: &TransferConfig) -> Result<TransferResult> {
    transfer_observed(net, content, style, config, &mut |_, _| {})
}

/// Like [`transfer`], calling `observer(epoch, crop)` after every epoch.
pub fn transfer_observed<T: Real>(
    net: &Backbone<T>,
    content: &IrisCrop,
    style: &IrisCrop,
    config: &TransferConfig,
    observer: &mut dyn FnMut(usize, &IrisCrop),
) -> Result<TransferResult> {
    config.validate()?;
    let start = match config.init {
        Init::CloneContent => content.pixels.clone(),
        Init::RandomNoise { seed } => {
            let mut rng = crate::rng::substream(seed, "transfer-init");
            noise_start(content, &mut rng)
        }
    };
    optimize(net, content, style, config, start, observer)
}

fn noise_start<R: Rng + ?Sized>(content: &IrisCrop, rng: &mut R) -> Vec<f64> {
    content.pixels.iter().zip(&content.validity).map(|(&p, &ok)| if ok { rng.random::<f64>() } else { p }).collect()
}

fn optimize<T: Real>(
    net: &Backbone<T>,
    content: &IrisCrop,
    style: &IrisCrop,
    config: &TransferConfig,
    start: Vec<f64>,
    observer: &mut dyn FnMut(usize, &IrisCrop),
) -> Result<TransferResult> {
    let size = net.input_size();
    let content_pipe = InputPipeline::new(content.height, content.width, size)?;
    let style_pipe = InputPipeline::new(style.height, style.width, size)?;
    let objective = TotalLoss::new(net, &content_pipe.forward(&content.pixels), &style_pipe.forward(&style.pixels), config)?;

    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>, LossTerms)> {
        let input = content_pipe.forward::<T>(x);
        let (value, grad) = net.input_gradient(&input, &objective)?;
        let mut grad = content_pipe.backward(&grad);
        for (g, &ok) in grad.iter_mut().zip(&content.validity) {
            if !ok {
                *g = 0.0;
            }
        }
        Ok((value, grad, objective.last_terms()))
    };

    let start: Vec<f64> = start.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (value, grad, payload) = eval(&start)?;
    if !value.is_finite() {
        return Err(TransferError::NonFinite { epoch: 0, last_finite: Box::new(content.clone()) });
    }
    let mut state = Evaluated { x: start, value, grad, payload };
    let initial = payload;
    let mut opt = Lbfgs::new(LBFGS_HISTORY, config.optimizer.step_size, config.optimizer.max_inner_evals);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        match opt.step(&mut state, &mut eval) {
            Ok(_) => {}
            Err(StepError::NonFinite) => {
                return Err(TransferError::NonFinite { epoch, last_finite: Box::new(content.with_pixels(state.x)) });
            }
            Err(StepError::Eval(e)) => return Err(e),
        }
        trace.push(state.payload);
        if log::log_enabled!(log::Level::Trace) {
            log::trace!("epoch {epoch}: total {:.6e}", state.value);
        }
        observer(epoch, &content.with_pixels(state.x.clone()));
    }
    Ok(TransferResult { stylized: content.with_pixels(state.x), initial, trace })
}

/// Extracts both irises, stylizes the content iris with the donor's
/// statistics and writes it back with glints restored.
pub fn stylize_eye<T: Real>(
    net: &Backbone<T>,
    content_image: &EyeImage,
    content_mask: &SegMask,
    donor_image: &EyeImage,
    donor_mask: &SegMask,
    glint_threshold: u8,
    config: &TransferConfig,
) -> Result<EyeImage> {
    let content = extract_iris(content_image, content_mask, glint_threshold)?;
    let donor = extract_iris(donor_image, donor_mask, glint_threshold)?;
    let result = transfer(net, &content, &donor, config)?;
    Ok(reinsert(content_image, &result.stylized, content_mask)?)
}

/// Rebuilds a crop from noise using the statistics of a single tap.
pub fn reconstruct_style<T: Real, R: Rng + ?Sized>(
    net: &Backbone<T>,
    style: &IrisCrop,
    tap: &str,
    epochs: usize,
    rng: &mut R,
) -> Result<TransferResult> {
    let config = TransferConfig {
        alpha: 0.0,
        beta: 1.0,
        epochs,
        style_taps: vec![(tap.to_string(), 1.0)],
        init: Init::CloneContent,
        ..TransferConfig::default()
    };
    let start = noise_start(style, rng);
    optimize(net, style, style, &config, start, &mut |_, _| {})
}
