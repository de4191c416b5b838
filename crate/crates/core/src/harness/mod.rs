//! Experiment orchestration: robustness sweeps, the privacy grid,
//! segmentation impact and report files.

mod report;
mod segmentation;

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

pub use report::{
    emit_report, heatmap_csv, history_csv, iou_csv, plot_heatmap_svg, plot_sweep_svg, sweep_csv, write_file, ExperimentResults,
    ReportError,
};
pub use segmentation::{iou_per_class, miou, segmentation_impact, phase_miou, GroundTruthProvider, IouRow, MaskProvider, Phase, ThresholdPredictor};

use crate::backbone::Backbone;
use crate::data::{DataError, Sample};
use crate::features::{eye_features, extract_features, FeatureError, FeatureKind};
use crate::imaging::{apply_variation, extract_iris, reinsert, ImagingError, Variation};
use crate::recognition::{metrics_from_predictions, ClassifierHead, RecognitionError, RecognitionMetrics};
use crate::tensor::Real;
use crate::transfer::{transfer_observed, TransferConfig, TransferError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("degrees must be non-empty and strictly increasing")]
    BadDegrees,
    #[error("betas must be positive and epoch counts at least 1")]
    BadGrid,
    #[error("no classifier head for feature kind `{0}`")]
    MissingHead(FeatureKind),
    #[error("{0}")]
    Provider(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Recognition(#[from] RecognitionError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Frozen heads by feature kind.
pub type Heads = BTreeMap<FeatureKind, ClassifierHead>;

/// For each sample, a sample of a different user: the user is drawn
/// uniformly among the others, then one of their samples uniformly.
pub fn assign_donors(samples: &[&Sample], seed: u64) -> Result<Vec<usize>, DataError> {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_user.entry(&s.user_id).or_default().push(i);
    }
    if by_user.len() < 2 {
        return Err(DataError::TooFewUsers(by_user.len()));
    }
    let users: Vec<&str> = by_user.keys().copied().collect();
    Ok(samples
        .iter()
        .map(|s| {
            let mut rng = crate::rng::keyed(seed, &["donor", &s.record_id]);
            let others: Vec<&str> = users.iter().copied().filter(|u| *u != s.user_id).collect();
            let pool = &by_user[others[rng.random_range(0..others.len())]];
            pool[rng.random_range(0..pool.len())]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariationKind {
    Rotation,
    Perspective,
}

impl VariationKind {
    pub fn at(&self, degree: f64) -> Variation {
        match self {
            VariationKind::Rotation => Variation::Rotation(degree),
            VariationKind::Perspective => Variation::Perspective(degree),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VariationKind::Rotation => "rotation",
            VariationKind::Perspective => "perspective",
        }
    }
}

/// Cache/report label of a variation, e.g. `rotation:90`.
pub fn variation_descriptor(variation: Option<Variation>) -> String {
    match variation {
        None => "none".to_string(),
        Some(v) => format!("{}:{}", v.kind(), v.degree()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub variation: VariationKind,
    pub degrees: Vec<f64>,
    pub kinds: Vec<FeatureKind>,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.degrees.is_empty() || self.degrees.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(HarnessError::BadDegrees);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub degree: f64,
    pub kind: FeatureKind,
    pub metrics: RecognitionMetrics,
}

/// Varies each test image once per degree and scores every frozen head.
pub fn robustness_sweep<T: Real>(
    net: &Backbone<T>,
    spec: &SweepSpec,
    heads: &Heads,
    samples: &[&Sample],
    glint_threshold: u8,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    for k in &spec.kinds {
        if !heads.contains_key(k) {
            return Err(HarnessError::MissingHead(*k));
        }
    }
    let crops = samples.iter().map(|s| Ok(extract_iris(&s.image, s.mask()?, glint_threshold)?)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut rows = Vec::new();
    for &degree in &spec.degrees {
        let variation = spec.variation.at(degree);
        let descriptor = variation_descriptor(Some(variation));
        let mut feats: Vec<Vec<Vec<f32>>> = vec![Vec::new(); spec.kinds.len()];
        for (s, crop) in samples.iter().zip(&crops) {
            let mut rng = crate::rng::keyed(spec.seed, &["variation", &s.record_id, &descriptor]);
            let varied = apply_variation(crop, variation, &mut rng);
            for (slot, f) in feats.iter_mut().zip(extract_features(net, &varied, &spec.kinds).map_err(FeatureError::from)?) {
                slot.push(f);
            }
        }
        for (kind, f) in spec.kinds.iter().zip(&feats) {
            let head = &heads[kind];
            let rows_ref: Vec<&[f32]> = f.iter().map(Vec::as_slice).collect();
            let pred = head.predict_labels(&rows_ref)?;
            rows.push(SweepRow { degree, kind: *kind, metrics: metrics_from_predictions(&pred, &labels, head.classes()) });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSpec {
    pub betas: Vec<f64>,
    pub epoch_counts: Vec<usize>,
    pub alpha: f64,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            betas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4],
            epoch_counts: vec![1, 5, 10, 20, 50, 100, 150, 200],
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    pub beta: f64,
    pub epochs: usize,
    pub kind: FeatureKind,
    pub accuracy: f64,
}

/// Accuracy of every head on images stylized with seeded other-user donors,
/// for each (β, epochs) pair. One transfer per β and image is run to the
/// largest epoch count and sampled at the others. `transfer_net` may run at
/// a smaller input size than the feature backbone `net`.
#[allow(clippy::too_many_arguments)]
pub fn privacy_heatmap<T: Real>(
    net: &Backbone<T>,
    transfer_net: &Backbone<T>,
    spec: &HeatmapSpec,
    base: &TransferConfig,
    heads: &Heads,
    samples: &[&Sample],
    glint_threshold: u8,
    seed: u64,
) -> Result<Vec<HeatmapCell>> {
    if spec.betas.iter().any(|b| !(*b > 0.0)) || spec.epoch_counts.contains(&0) || spec.betas.is_empty() || spec.epoch_counts.is_empty() {
        return Err(HarnessError::BadGrid);
    }
    let kinds: Vec<FeatureKind> = heads.keys().copied().collect();
    let donors = assign_donors(samples, seed)?;
    let max_epochs = *spec.epoch_counts.iter().max().unwrap();
    let mut cells = Vec::new();
    for &beta in &spec.betas {
        let config = TransferConfig { alpha: spec.alpha, beta, epochs: max_epochs, ..base.clone() };
        // predictions[epoch index][kind] -> labels in sample order
        let mut predictions = vec![vec![Vec::with_capacity(samples.len()); kinds.len()]; spec.epoch_counts.len()];
        for (s, &d) in samples.iter().zip(&donors) {
            let mask = s.mask()?;
            let content = extract_iris(&s.image, mask, glint_threshold)?;
            let donor = extract_iris(&samples[d].image, samples[d].mask()?, glint_threshold)?;
            let mut failure = None;
            let mut observe = |epoch: usize, crop: &crate::imaging::IrisCrop| {
                let Some(slot) = spec.epoch_counts.iter().position(|&e| e == epoch) else { return };
                let scored = (|| -> Result<()> {
                    let image = reinsert(&s.image, crop, mask)?;
                    let feats = eye_features(net, &image, mask, glint_threshold, &kinds)?;
                    for (k, (kind, f)) in kinds.iter().zip(feats).enumerate() {
                        predictions[slot][k].push(crate::recognition::argmax(&heads[kind].predict(&f)?));
                    }
                    Ok(())
                })();
                if let Err(e) = scored {
                    failure.get_or_insert(e);
                }
            };
            transfer_observed(transfer_net, &content, &donor, &config, &mut observe)?;
            if let Some(e) = failure {
                return Err(e);
            }
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        for (slot, &epochs) in spec.epoch_counts.iter().enumerate() {
            for (k, kind) in kinds.iter().enumerate() {
                let m = metrics_from_predictions(&predictions[slot][k], &labels, heads[kind].classes());
                cells.push(HeatmapCell { beta, epochs, kind: *kind, accuracy: m.accuracy });
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_corpus;

    #[test]
    fn donors_are_other_users_and_seeded() {
        let d = generate_synthetic_corpus(3, 3, 64, 96, 1).unwrap().to_dataset(0.34, 1).unwrap();
        let samples: Vec<&Sample> = d.samples.iter().collect();
        let a = assign_donors(&samples, 5).unwrap();
        assert_eq!(a, assign_donors(&samples, 5).unwrap());
        for (i, &j) in a.iter().enumerate() {
            assert_ne!(samples[i].user_id, samples[j].user_id);
        }
        let one: Vec<&Sample> = samples.iter().copied().filter(|s| s.user_id == samples[0].user_id).collect();
        assert!(assign_donors(&one, 5).is_err());
    }

    #[test]
    fn degree_validation() {
        let mut spec = SweepSpec { variation: VariationKind::Rotation, degrees: vec![0.0, 30.0, 30.0], kinds: vec![FeatureKind::Style], seed: 1 };
        assert!(spec.validate().is_err());
        spec.degrees = vec![];
        assert!(spec.validate().is_err());
        spec.degrees = vec![0.0, 90.0];
        assert!(spec.validate().is_ok());
        assert_eq!(variation_descriptor(Some(Variation::Rotation(90.0))), "rotation:90");
        assert_eq!(HeatmapSpec::default().betas.len() * HeatmapSpec::default().epoch_counts.len(), 72);
    }
}
