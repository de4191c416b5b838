use crate::backbone::Backbone;
use crate::data::Sample;
use crate::imaging::{extract_iris, reinsert, EyeClass, EyeImage, ImagingError, SegMask};
use crate::tensor::Real;
use crate::transfer::{transfer, TransferConfig};

use super::{assign_donors, HarnessError, Result};

/// Per-class IoU; a class absent from both masks scores 1.
pub fn iou_per_class(pred: &SegMask, truth: &SegMask, class_id: u8) -> Result<f64, ImagingError> {
    let (i, u) = overlap(pred, truth, class_id)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Mean IoU over the four classes.
pub fn miou(pred: &SegMask, truth: &SegMask) -> Result<f64, ImagingError> {
    let mut total = 0.0;
    for c in 0..4 {
        total += iou_per_class(pred, truth, c)?;
    }
    Ok(total / 4.0)
}

fn overlap(pred: &SegMask, truth: &SegMask, class_id: u8) -> Result<(usize, usize), ImagingError> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(ImagingError::ShapeMismatch { image_h: truth.height(), image_w: truth.width(), mask_h: pred.height(), mask_w: pred.width() });
    }
    let (mut inter, mut union) = (0, 0);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let (a, b) = (p == class_id, t == class_id);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok((inter, union))
}

/// Anything that produces a segmentation for an eye image.
pub trait MaskProvider {
    fn name(&self) -> &str;
    /// `reference` is the annotated mask of the unstylized image; providers
    /// that really segment must ignore it.
    fn predict(&self, image: &EyeImage, reference: &SegMask) -> Result<SegMask, String>;
}

/// Returns the annotation unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthProvider;

impl MaskProvider for GroundTruthProvider {
    fn name(&self) -> &str {
        "ground-truth"
    }

    fn predict(&self, _image: &EyeImage, reference: &SegMask) -> Result<SegMask, String> {
        Ok(reference.clone())
    }
}

/// Intensity bands plus a distance gate around the dark pupil blob.
///
/// Pixels at or below `pupil_max` are pupil; pixels below `iris_max` (or
/// specular, at least `glint_min`) within `iris_reach` pupil radii of the
/// pupil centroid are iris; remaining pixels at or above `sclera_min` are
/// sclera; everything else is skin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPredictor {
    pub pupil_max: u8,
    pub iris_max: u8,
    pub sclera_min: u8,
    pub glint_min: u8,
    pub iris_reach: f64,
}

impl Default for ThresholdPredictor {
    fn default() -> Self {
        Self { pupil_max: 40, iris_max: 165, sclera_min: 195, glint_min: 250, iris_reach: 4.0 }
    }
}

impl MaskProvider for ThresholdPredictor {
    fn name(&self) -> &str {
        "threshold"
    }

    fn predict(&self, image: &EyeImage, _reference: &SegMask) -> Result<SegMask, String> {
        let (h, w) = (image.height(), image.width());
        let px = image.pixels();
        let (mut n, mut sy, mut sx) = (0usize, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if px[y * w + x] <= self.pupil_max {
                    n += 1;
                    sy += y as f64;
                    sx += x as f64;
                }
            }
        }
        let gate = if n == 0 {
            None
        } else {
            let r = (n as f64 / std::f64::consts::PI).sqrt() * self.iris_reach;
            Some((sy / n as f64, sx / n as f64, r * r))
        };
        let mut labels = vec![EyeClass::Skin.id(); h * w];
        for y in 0..h {
            for x in 0..w {
                let v = px[y * w + x];
                let near = gate.is_some_and(|(cy, cx, r2)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r2);
                labels[y * w + x] = if v <= self.pupil_max {
                    EyeClass::Pupil
                } else if near && (v < self.iris_max || v >= self.glint_min) {
                    EyeClass::Iris
                } else if v >= self.sclera_min {
                    EyeClass::Sclera
                } else {
                    EyeClass::Skin
                }
                .id();
            }
        }
        SegMask::new(h, w, labels).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Pre,
    Post,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouRow {
    pub phase: Phase,
    pub class_id: u8,
    pub iou: f64,
}

/// Provider IoU against the annotations before and after each image is
/// stylized with a seeded other-user donor. Intersections and unions are
/// pooled over all images.
pub fn segmentation_impact<T: Real>(
    transfer_net: &Backbone<T>,
    samples: &[&Sample],
    provider: &dyn MaskProvider,
    config: &TransferConfig,
    glint_threshold: u8,
    seed: u64,
) -> Result<Vec<IouRow>> {
    let donors = assign_donors(samples, seed)?;
    let mut counts = [[(0usize, 0usize); 4]; 2];
    for (s, &d) in samples.iter().zip(&donors) {
        let truth = s.mask()?;
        let content = extract_iris(&s.image, truth, glint_threshold)?;
        let donor = extract_iris(&samples[d].image, samples[d].mask()?, glint_threshold)?;
        let stylized = reinsert(&s.image, &transfer(transfer_net, &content, &donor, config)?.stylized, truth)?;
        for (phase, image) in [(0, &s.image), (1, &stylized)] {
            let pred = provider.predict(image, truth).map_err(HarnessError::Provider)?;
            for c in 0..4u8 {
                let (i, u) = overlap(&pred, truth, c)?;
                counts[phase][c as usize].0 += i;
                counts[phase][c as usize].1 += u;
            }
        }
    }
    let mut rows = Vec::with_capacity(8);
    for (phase, per_class) in [Phase::Pre, Phase::Post].into_iter().zip(counts) {
        for (c, (i, u)) in per_class.into_iter().enumerate() {
            rows.push(IouRow { phase, class_id: c as u8, iou: if u == 0 { 1.0 } else { i as f64 / u as f64 } });
        }
    }
    Ok(rows)
}

/// Mean IoU of one phase in a `segmentation_impact` table.
pub fn phase_miou(rows: &[IouRow], phase: Phase) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.phase == phase).map(|r| r.iou).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_mask(rows: &[u8]) -> SegMask {
        SegMask::new(rows.len(), 2, rows.iter().flat_map(|&c| [c, c]).collect()).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let m = rows_mask(&[0, 1, 2, 3]);
        for c in 0..4 {
            assert_eq!(iou_per_class(&m, &m, c).unwrap(), 1.0);
        }
        assert_eq!(miou(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn overlapping_rows() {
        let pred = rows_mask(&[2, 2, 0]);
        let truth = rows_mask(&[0, 2, 2]);
        assert!((iou_per_class(&pred, &truth, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // class 3 is absent from both
        assert_eq!(iou_per_class(&pred, &truth, 3).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(iou_per_class(&rows_mask(&[0, 1]), &rows_mask(&[0, 1, 2]), 0).is_err());
    }

    #[test]
    fn threshold_predictor_finds_the_eye() {
        let corpus = crate::data::generate_synthetic_corpus(2, 2, 120, 192, 3).unwrap();
        for s in &corpus.samples {
            let pred = ThresholdPredictor::default().predict(&s.image, &s.mask).unwrap();
            assert!(miou(&pred, &s.mask).unwrap() > 0.6, "{}", miou(&pred, &s.mask).unwrap());
        }
    }
}
