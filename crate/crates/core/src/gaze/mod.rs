//! Gaze estimation for measuring how much utility stylized images keep.
//!
//! The model-based estimator segments the eye, fits ellipses and regresses
//! gaze from landmark geometry; the appearance-based one regresses from a
//! frozen image descriptor. Both heads output unit vectors.

mod appearance;
mod ellipse;
mod landmarks;

use thiserror::Error;

pub use appearance::{AppearanceNet, ResNet50, SmallConvNet, RESNET50_DIM};
pub use ellipse::{fit_ellipse, Ellipse, EllipseFit};
pub use landmarks::{extract_landmarks, LandmarkVector, LANDMARK_COUNT, LANDMARK_NAMES};

use rand::seq::SliceRandom;

use crate::data::{DataError, GazeLabel, Sample};
use crate::harness::MaskProvider;
use crate::imaging::{EyeClass, EyeImage, ImagingError, SegMask};
use crate::nn::{Adam, Mlp};
use crate::recognition::Standardizer;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("gaze vectors must be non-zero")]
    ZeroVector,
    #[error("an ellipse fit needs at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("points do not determine an ellipse")]
    DegenerateFit,
    #[error("mask has no {0:?} pixels")]
    MissingClass(EyeClass),
    #[error("no samples to train on")]
    Empty,
    #[error("sample `{0}` has no gaze label")]
    MissingGaze(String),
    #[error("segmentation failed: {0}")]
    Segmentation(String),
    #[error("appearance weights: {0}")]
    Weights(String),
    #[error("estimator expects {expected} inputs, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = GazeError> = std::result::Result<T, E>;

fn unit(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(GazeError::ZeroVector);
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Angle between two directions in degrees, in `[0, 180]`.
pub fn angular_error(pred: [f64; 3], truth: [f64; 3]) -> Result<f64> {
    let (p, t) = (unit(pred)?, unit(truth)?);
    let dot = (p[0] * t[0] + p[1] * t[1] + p[2] * t[2]).clamp(-1.0, 1.0);
    Ok(dot.acos().to_degrees())
}

/// A unit gaze direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeEstimate([f64; 3]);

impl GazeEstimate {
    pub fn new(v: [f64; 3]) -> Result<Self> {
        Ok(Self(unit(v)?))
    }

    pub fn vector(&self) -> [f64; 3] {
        self.0
    }

    pub fn error_to(&self, truth: &GazeLabel) -> Result<f64> {
        angular_error(self.0, truth.vector())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    ModelBased,
    AppearanceBased,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::ModelBased => "model",
            EstimatorKind::AppearanceBased => "appearance",
        }
    }
}

/// Turns an eye image into the regression input.
pub enum GazeFeatures {
    /// Segment with the provider, then take landmark geometry.
    Landmarks(Box<dyn MaskProvider + Send + Sync>),
    Appearance(AppearanceNet),
}

impl std::fmt::Debug for GazeFeatures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GazeFeatures::Landmarks(p) => write!(f, "Landmarks({})", p.name()),
            GazeFeatures::Appearance(n) => write!(f, "Appearance({})", n.name()),
        }
    }
}

impl GazeFeatures {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            GazeFeatures::Landmarks(_) => EstimatorKind::ModelBased,
            GazeFeatures::Appearance(_) => EstimatorKind::AppearanceBased,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GazeFeatures::Landmarks(_) => LANDMARK_COUNT,
            GazeFeatures::Appearance(n) => n.dim(),
        }
    }

    /// `reference` is the annotated mask, which only the ground-truth
    /// provider looks at.
    pub fn compute(&self, image: &EyeImage, reference: &SegMask) -> Result<Vec<f32>> {
        match self {
            GazeFeatures::Landmarks(p) => {
                let mask = p.predict(image, reference).map_err(GazeError::Segmentation)?;
                Ok(extract_landmarks(&mask)?.to_f32())
            }
            GazeFeatures::Appearance(n) => Ok(n.features(image)),
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            GazeFeatures::Landmarks(p) => format!("landmarks:{}", p.name()),
            GazeFeatures::Appearance(n) => n.checksum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for GazeTrainConfig {
    fn default() -> Self {
        Self { batch_size: 128, learning_rate: 1e-5, epochs: 200, seed: 42, hidden: vec![256, 256] }
    }
}

/// Regression MLP; predictions are renormalized to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeHead {
    pub mlp: Mlp,
    pub standardizer: Standardizer,
}

impl GazeHead {
    fn inputs(&self, rows: &[&[f32]]) -> Result<Vec<f32>> {
        let mut x = Vec::with_capacity(rows.len() * self.mlp.input_dim());
        for r in rows {
            if r.len() != self.mlp.input_dim() {
                return Err(GazeError::DimMismatch { expected: self.mlp.input_dim(), found: r.len() });
            }
            self.standardizer.apply(r, &mut x);
        }
        Ok(x)
    }

    pub fn predict(&self, feature: &[f32]) -> Result<GazeEstimate> {
        let out = self.mlp.forward(&self.inputs(&[feature])?, 1);
        GazeEstimate::new([out[0] as f64, out[1] as f64, out[2] as f64])
    }

    pub fn checksum(&self) -> String {
        self.mlp.checksum()
    }
}

#[derive(Debug)]
pub struct GazeEstimator {
    pub features: GazeFeatures,
    pub head: GazeHead,
}

impl GazeEstimator {
    pub fn kind(&self) -> EstimatorKind {
        self.features.kind()
    }

    pub fn predict(&self, image: &EyeImage, reference: &SegMask) -> Result<GazeEstimate> {
        self.head.predict(&self.features.compute(image, reference)?)
    }

    /// Head parameters plus the descriptor identity.
    pub fn checksum(&self) -> String {
        format!("{}:{}", self.head.checksum(), self.features.checksum())
    }
}

fn labelled<'a>(samples: &[&'a Sample]) -> Result<Vec<(&'a Sample, [f64; 3])>> {
    samples.iter().map(|s| Ok((*s, s.gaze.ok_or_else(|| GazeError::MissingGaze(s.record_id.clone()))?.vector()))).collect()
}

/// Fits a regression head with mean squared error against unit gaze
/// targets. The output layer starts at zero weight with the mean target as
/// bias, so training departs from the constant mean-direction predictor.
/// Returns the estimator and the per-epoch training loss.
pub fn train_gaze_estimator(features: GazeFeatures, samples: &[&Sample], config: &GazeTrainConfig) -> Result<(GazeEstimator, Vec<f64>)> {
    if samples.is_empty() {
        return Err(GazeError::Empty);
    }
    let data = labelled(samples)?;
    let x: Vec<Vec<f32>> = data.iter().map(|(s, _)| features.compute(&s.image, s.mask()?)).collect::<Result<_>>()?;
    let y: Vec<[f32; 3]> = data.iter().map(|(_, g)| g.map(|v| v as f32)).collect();

    let mut init_rng = crate::rng::substream(config.seed, "gaze-init");
    let mut order_rng = crate::rng::substream(config.seed, "gaze-order");
    let widths: Vec<usize> = std::iter::once(features.dim()).chain(config.hidden.iter().copied()).chain([3]).collect();
    let mut mlp = Mlp::new(&widths, 0.0, &mut init_rng);
    let out = mlp.layers.last_mut().expect("output layer");
    out.weight.iter_mut().for_each(|w| *w = 0.0);
    for (k, b) in out.bias.iter_mut().enumerate() {
        *b = y.iter().map(|t| t[k]).sum::<f32>() / y.len() as f32;
    }
    let mut head = GazeHead { mlp, standardizer: Standardizer::fit(&x) };
    let mut adam = Adam::new(&head.mlp, config.learning_rate);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch_size.max(1)) {
            let rows: Vec<&[f32]> = batch.iter().map(|&i| x[i].as_slice()).collect();
            let input = head.inputs(&rows)?;
            let tape = head.mlp.forward_train(&input, batch.len(), &mut order_rng);
            let n = batch.len() as f32;
            let mut grad = vec![0.0f32; batch.len() * 3];
            for (r, &i) in batch.iter().enumerate() {
                for k in 0..3 {
                    let d = tape.output[r * 3 + k] - y[i][k];
                    total += (d * d) as f64;
                    grad[r * 3 + k] = 2.0 * d / n;
                }
            }
            let grads = head.mlp.backward(&tape, &grad);
            adam.step(&mut head.mlp, &grads);
        }
        history.push(total / x.len() as f64);
    }
    Ok((GazeEstimator { features, head }, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeEvaluation {
    pub mean_error: f64,
    /// `(record_id, error in degrees)` in sample order.
    pub errors: Vec<(String, f64)>,
}

/// Image transform applied before inference, e.g. stylization.
pub type ImageTransform<'a> = dyn Fn(&Sample) -> std::result::Result<EyeImage, String> + 'a;

/// Mean and per-sample angular error of a frozen estimator.
pub fn evaluate_gaze(estimator: &GazeEstimator, samples: &[&Sample], transform: Option<&ImageTransform<'_>>) -> Result<GazeEvaluation> {
    let data = labelled(samples)?;
    let mut errors = Vec::with_capacity(data.len());
    for (s, truth) in data {
        let image = match transform {
            Some(t) => t(s).map_err(GazeError::Segmentation)?,
            None => s.image.clone(),
        };
        let est = estimator.predict(&image, s.mask()?)?;
        errors.push((s.record_id.clone(), angular_error(est.vector(), truth)?));
    }
    let mean_error = if errors.is_empty() { 0.0 } else { errors.iter().map(|e| e.1).sum::<f64>() / errors.len() as f64 };
    Ok(GazeEvaluation { mean_error, errors })
}

/// Mean error of always answering the normalized mean training direction.
pub fn constant_baseline(train: &[&Sample], test: &[&Sample]) -> Result<f64> {
    let train = labelled(train)?;
    let mut mean = [0.0; 3];
    for (_, g) in &train {
        for k in 0..3 {
            mean[k] += g[k];
        }
    }
    let test = labelled(test)?;
    let total: f64 = test.iter().map(|(_, g)| angular_error(mean, *g)).sum::<Result<f64>>()?;
    Ok(total / test.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::GroundTruthProvider;
    use proptest::prelude::*;

    #[test]
    fn angular_error_cases() {
        assert_eq!(angular_error([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert!((angular_error([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap() - 90.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((angular_error([1.0, 0.0, 0.0], [h, h, 0.0]).unwrap() - 45.0).abs() < 1e-6);
        assert!(matches!(angular_error([0.0; 3], [1.0, 0.0, 0.0]), Err(GazeError::ZeroVector)));
    }

    proptest! {
        #[test]
        fn angular_error_properties(
            a in prop::array::uniform3(-1.0..1.0f64), b in prop::array::uniform3(-1.0..1.0f64),
            s in 0.01..100.0f64, t in 0.01..100.0f64,
        ) {
            prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6 && b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let e = angular_error(a, b).unwrap();
            prop_assert!((0.0..=180.0).contains(&e));
            prop_assert!((e - angular_error(b, a).unwrap()).abs() < 1e-9);
            prop_assert!((e - angular_error(a.map(|v| v * s), b.map(|v| v * t)).unwrap()).abs() < 1e-6);
            prop_assert!(angular_error(a, a.map(|v| v * s)).unwrap() < 1e-5);
        }
    }

    #[test]
    fn training_is_deterministic_and_identity_transform_is_neutral() {
        let d = crate::data::generate_synthetic_corpus(3, 4, 80, 128, 2).unwrap().to_dataset(0.25, 2).unwrap();
        let samples: Vec<&Sample> = d.samples.iter().collect();
        let cfg = GazeTrainConfig { epochs: 3, hidden: vec![16], ..Default::default() };
        let (a, ha) = train_gaze_estimator(GazeFeatures::Landmarks(Box::new(GroundTruthProvider)), &samples, &cfg).unwrap();
        let (b, hb) = train_gaze_estimator(GazeFeatures::Landmarks(Box::new(GroundTruthProvider)), &samples, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.checksum(), b.checksum());
        let before = a.checksum();
        let plain = evaluate_gaze(&a, &samples, None).unwrap();
        let identity = |s: &Sample| Ok(s.image.clone());
        let same = evaluate_gaze(&a, &samples, Some(&identity)).unwrap();
        assert_eq!(plain, same);
        assert_eq!(a.checksum(), before);
        let est = a.predict(&samples[0].image, samples[0].mask().unwrap()).unwrap();
        let n: f64 = est.vector().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-4);
    }

    #[test]
    fn empty_training_set() {
        let err = train_gaze_estimator(GazeFeatures::Appearance(AppearanceNet::Small(SmallConvNet::seeded(1, 32))), &[], &GazeTrainConfig::default());
        assert!(matches!(err, Err(GazeError::Empty)));
    }
}
