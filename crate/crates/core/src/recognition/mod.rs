//! Identity classifiers over feature vectors, their metrics and the
//! false-acceptance experiment.

mod metrics;

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

pub use metrics::{metrics_from_predictions, ConfusionMatrix, RecognitionMetrics};

use crate::backbone::Backbone;
use crate::data::Sample;
use crate::features::{eye_features, FeatureError, FeatureKind};
use crate::nn::{cross_entropy, softmax_rows, Adam, Mlp};
use crate::tensor::Real;
use crate::transfer::{stylize_eye, TransferConfig, TransferError};

const CHECKPOINT_MAGIC: &[u8; 4] = b"ISLH";
const CHECKPOINT_VERSION: u16 = 1;
/// Rows per inference batch.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum RecognitionError {
    #[error("need at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("feature length {found} does not match head input {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no samples")]
    Empty,
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("label {label} outside the head's {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T, E = RecognitionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub dropout: f32,
    /// Fit a per-feature z-score on the training set and apply it inside the head.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, learning_rate: 1e-5, epochs: 100, seed: 42, hidden: vec![4096, 4096], dropout: 0.5, standardize: true }
    }
}

/// Per-feature shift and scale applied before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    /// Scales are floored at 1% of the average spread so constant features
    /// are not blown up.
    pub fn fit(rows: &[Vec<f32>]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (*v as f64 - m).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let floor = (std.iter().sum::<f64>() / dim as f64 * 1e-2).max(1e-12);
        Self { mean: mean.iter().map(|&m| m as f32).collect(), scale: std.iter().map(|&s| (1.0 / s.max(floor)) as f32).collect() }
    }

    pub fn apply(&self, row: &[f32], out: &mut Vec<f32>) {
        out.extend(row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s));
    }
}

/// MLP identity classifier with its input standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub mlp: Mlp,
    pub standardizer: Option<Standardizer>,
    pub seed: u64,
}

impl ClassifierHead {
    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.mlp.output_dim()
    }

    fn batch(&self, rows: &[&[f32]]) -> Result<Vec<f32>> {
        let dim = self.input_dim();
        let mut x = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(RecognitionError::DimMismatch { expected: dim, found: r.len() });
            }
            match &self.standardizer {
                Some(s) => s.apply(r, &mut x),
                None => x.extend_from_slice(r),
            }
        }
        Ok(x)
    }

    /// Class probabilities for one feature vector.
    pub fn predict(&self, feature: &[f32]) -> Result<Vec<f32>> {
        Ok(self.predict_batch(&[feature])?.remove(0))
    }

    pub fn predict_batch(&self, features: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let k = self.classes();
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(PREDICT_CHUNK) {
            let x = self.batch(chunk)?;
            let mut logits = self.mlp.forward(&x, chunk.len());
            softmax_rows(&mut logits, k);
            out.extend(logits.chunks(k).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Arg-max class per feature vector.
    pub fn predict_labels(&self, features: &[&[f32]]) -> Result<Vec<usize>> {
        Ok(self.predict_batch(features)?.iter().map(|p| argmax(p)).collect())
    }

    /// Mean cross-entropy on a labelled set.
    pub fn loss(&self, features: &[&[f32]], labels: &[usize]) -> Result<f64> {
        let probs = self.predict_batch(features)?;
        Ok(probs.iter().zip(labels).map(|(p, &y)| -(p[y].max(1e-30) as f64).ln()).sum::<f64>() / labels.len() as f64)
    }

    /// Digest of every parameter, including the standardisation.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.mlp.checksum().as_bytes());
        if let Some(s) = &self.standardizer {
            for v in s.mean.iter().chain(&s.scale) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binary checkpoint: magic `ISLH`, version, input dim, class count,
    /// seed, hidden widths, dropout, standardisation, then parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.input_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.classes() as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let widths = self.mlp.widths();
        let hidden = &widths[1..widths.len() - 1];
        w.write_all(&(hidden.len() as u32).to_le_bytes())?;
        for h in hidden {
            w.write_all(&(*h as u32).to_le_bytes())?;
        }
        w.write_all(&self.mlp.dropout.to_le_bytes())?;
        match &self.standardizer {
            Some(s) => {
                w.write_all(&[1])?;
                for v in s.mean.iter().chain(&s.scale) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
        self.mlp.write_params(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: &str| RecognitionError::Checkpoint { path: path.to_path_buf(), message: message.to_string() };
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a classifier checkpoint"));
        }
        let mut body = || -> std::io::Result<Self> {
            let mut b2 = [0u8; 2];
            let mut b4 = [0u8; 4];
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b2)?;
            if u16::from_le_bytes(b2) != CHECKPOINT_VERSION {
                return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "unsupported version"));
            }
            let mut u32_ = |r: &mut BufReader<std::fs::File>| -> std::io::Result<usize> {
                r.read_exact(&mut b4)?;
                Ok(u32::from_le_bytes(b4) as usize)
            };
            let input = u32_(&mut r)?;
            let classes = u32_(&mut r)?;
            r.read_exact(&mut b8)?;
            let seed = u64::from_le_bytes(b8);
            let n_hidden = u32_(&mut r)?;
            let mut widths = vec![input];
            for _ in 0..n_hidden {
                widths.push(u32_(&mut r)?);
            }
            widths.push(classes);
            let mut f4 = [0u8; 4];
            r.read_exact(&mut f4)?;
            let dropout = f32::from_le_bytes(f4);
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let standardizer = if flag[0] == 1 {
                let mut read = |n: usize| -> std::io::Result<Vec<f32>> {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf)?;
                    Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
                };
                let mean = read(input)?;
                let scale = read(input)?;
                Some(Standardizer { mean, scale })
            } else {
                None
            };
            let mlp = Mlp::read_params(&widths, dropout, &mut r)?;
            Ok(Self { mlp, standardizer, seed })
        };
        body().map_err(|e| bad(&e.to_string()))
    }
}

pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Metrics of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test: Option<RecognitionMetrics>,
}

/// A labelled set of feature vectors.
#[derive(Debug, Clone, Copy)]
pub struct LabelledSet<'a> {
    pub features: &'a [Vec<f32>],
    pub labels: &'a [usize],
}

impl<'a> LabelledSet<'a> {
    pub fn new(features: &'a [Vec<f32>], labels: &'a [usize]) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(RecognitionError::LengthMismatch { features: features.len(), labels: labels.len() });
        }
        if features.is_empty() {
            return Err(RecognitionError::Empty);
        }
        Ok(Self { features, labels })
    }

    fn rows(&self) -> Vec<&'a [f32]> {
        self.features.iter().map(Vec::as_slice).collect()
    }
}

/// Trains a head with cross-entropy, optionally scoring a held-out set after
/// every epoch.
pub fn train_classifier(train: LabelledSet<'_>, test: Option<LabelledSet<'_>>, config: &TrainConfig) -> Result<(ClassifierHead, Vec<EpochRecord>)> {
    let dim = train.features[0].len();
    if let Some(bad) = train.features.iter().chain(test.iter().flat_map(|t| t.features.iter())).find(|f| f.len() != dim) {
        return Err(RecognitionError::DimMismatch { expected: dim, found: bad.len() });
    }
    let mut distinct = train.labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(RecognitionError::TooFewClasses(distinct.len()));
    }
    let classes = distinct.last().unwrap() + 1;
    if let Some(t) = &test {
        if let Some(&label) = t.labels.iter().find(|&&l| l >= classes) {
            return Err(RecognitionError::LabelOutOfRange { label, classes });
        }
    }

    let mut init_rng = crate::rng::substream(config.seed, "head-init");
    let mut order_rng = crate::rng::substream(config.seed, "head-order");
    let mut drop_rng = crate::rng::substream(config.seed, "head-dropout");
    let widths: Vec<usize> = std::iter::once(dim).chain(config.hidden.iter().copied()).chain([classes]).collect();
    let mut head = ClassifierHead {
        mlp: Mlp::new(&widths, config.dropout, &mut init_rng),
        standardizer: config.standardize.then(|| Standardizer::fit(train.features)),
        seed: config.seed,
    };
    let mut adam = Adam::new(&head.mlp, config.learning_rate);
    let mut order: Vec<usize> = (0..train.features.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let batch_size = config.batch_size.max(1);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let rows: Vec<&[f32]> = batch.iter().map(|&i| train.features[i].as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let x = head.batch(&rows)?;
            let tape = head.mlp.forward_train(&x, batch.len(), &mut drop_rng);
            let (loss, grad) = cross_entropy(&tape.output, &labels, classes);
            let grads = head.mlp.backward(&tape, &grad);
            adam.step(&mut head.mlp, &grads);
            total += loss * batch.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let (test_loss, test_metrics) = match &test {
            Some(t) => {
                let rows = t.rows();
                let probs = head.predict_batch(&rows)?;
                let loss = probs.iter().zip(t.labels).map(|(p, &y)| -(p[y].max(1e-30) as f64).ln()).sum::<f64>() / rows.len() as f64;
                let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
                (Some(loss), Some(metrics_from_predictions(&pred, t.labels, classes)))
            }
            None => (None, None),
        };
        log::debug!("epoch {epoch}: train loss {train_loss:.4}");
        history.push(EpochRecord { epoch, train_loss, test_loss, test: test_metrics });
    }
    Ok((head, history))
}

/// Accuracy, macro-F1 and MCC of a frozen head.
pub fn evaluate(head: &ClassifierHead, set: LabelledSet<'_>) -> Result<RecognitionMetrics> {
    if let Some(&label) = set.labels.iter().find(|&&l| l >= head.classes()) {
        return Err(RecognitionError::LabelOutOfRange { label, classes: head.classes() });
    }
    let pred = head.predict_labels(&set.rows())?;
    Ok(metrics_from_predictions(&pred, set.labels, head.classes()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarReport {
    pub attempts: usize,
    pub acceptances: usize,
    pub far: f64,
}

/// Share of attempts whose predicted identity equals the donor's.
pub fn far_rate(predicted: &[usize], donors: &[usize]) -> FarReport {
    let attempts = predicted.len();
    let acceptances = predicted.iter().zip(donors).filter(|(p, d)| p == d).count();
    FarReport { attempts, acceptances, far: if attempts == 0 { 0.0 } else { acceptances as f64 / attempts as f64 } }
}

/// Stylizes every sample with a random other-user donor (or, with no
/// config, leaves it untouched) and counts donor acceptances.
#[allow(clippy::too_many_arguments)]
pub fn far_experiment<T: Real>(
    net: &Backbone<T>,
    transfer_net: &Backbone<T>,
    head: &ClassifierHead,
    kind: FeatureKind,
    samples: &[&Sample],
    config: Option<&TransferConfig>,
    glint_threshold: u8,
    seed: u64,
) -> Result<FarReport> {
    let donors = crate::harness::assign_donors(samples, seed)?;
    let mut predicted = Vec::with_capacity(samples.len());
    for (s, &d) in samples.iter().zip(&donors) {
        let donor = samples[d];
        let image = match config {
            Some(cfg) => stylize_eye(transfer_net, &s.image, s.mask()?, &donor.image, donor.mask()?, glint_threshold, cfg)?,
            None => s.image.clone(),
        };
        let f = eye_features(net, &image, s.mask()?, glint_threshold, &[kind])?.remove(0);
        predicted.push(argmax(&head.predict(&f)?));
    }
    let donor_labels: Vec<usize> = donors.iter().map(|&d| samples[d].label).collect();
    Ok(far_rate(&predicted, &donor_labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, classes: usize, dim: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "blobs");
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per {
                x.push((0..dim).map(|d| if d % classes == c { 3.0 } else { 0.0 } + rng.random_range(-0.5..0.5)).collect());
                y.push(c);
            }
        }
        (x, y)
    }

    fn small() -> TrainConfig {
        TrainConfig { hidden: vec![32, 32], learning_rate: 1e-2, epochs: 30, batch_size: 16, ..TrainConfig::default() }
    }

    #[test]
    fn learns_separable_blobs_deterministically() {
        let (x, y) = blobs(20, 3, 12, 1);
        let set = LabelledSet::new(&x, &y).unwrap();
        let (a, hist) = train_classifier(set, Some(set), &small()).unwrap();
        let (b, _) = train_classifier(set, Some(set), &small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(hist.len(), 30);
        assert!(evaluate(&a, set).unwrap().accuracy > 0.95);
        let p = a.predict(&x[0]).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(matches!(a.predict(&[0.0; 11]), Err(RecognitionError::DimMismatch { expected: 12, found: 11 })));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![0.0f32; 4]; 5];
        let y = vec![1; 5];
        assert!(matches!(train_classifier(LabelledSet::new(&x, &y).unwrap(), None, &small()), Err(RecognitionError::TooFewClasses(1))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (x, y) = blobs(5, 2, 6, 2);
        let (head, _) = train_classifier(LabelledSet::new(&x, &y).unwrap(), None, &TrainConfig { epochs: 2, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        head.save(&path).unwrap();
        let back = ClassifierHead::load(&path).unwrap();
        assert_eq!(back, head);
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(ClassifierHead::load(&path), Err(RecognitionError::Checkpoint { .. })));
    }

    #[test]
    fn far_counts_donor_hits() {
        let r = far_rate(&[1, 0, 2, 2], &[1, 1, 0, 2]);
        assert_eq!((r.attempts, r.acceptances), (4, 2));
        assert_eq!(r.far, 0.5);
    }
}
