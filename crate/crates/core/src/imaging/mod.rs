//! Eye images, segmentation masks and the iris crop that features and
//! stylization operate on.
//!
//! [`extract_iris`] masks out everything but the iris, trims the image to the
//! iris bounding box and takes the glints out of the texture.
//! [`reinsert`] is its inverse: a (possibly stylized) crop is written back
//! over the iris pixels and the glints are restored.

mod warp;

use std::path::Path;

use thiserror::Error;

pub use warp::{homography_from_corners, random_perspective, random_rotation, apply_variation, Homography, Variation};

/// Default intensity at or above which an iris pixel counts as a glint.
pub const DEFAULT_GLINT_THRESHOLD: u8 = 250;
/// Smallest iris region accepted by [`extract_iris`].
pub const MIN_IRIS_PIXELS: usize = 64;
/// Smallest accepted eye image side.
pub const MIN_IMAGE_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}")]
    ImageTooSmall { height: usize, width: usize },
    #[error("pixel buffer has {got} entries, expected {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("mask label {0} is not one of 0 (skin), 1 (sclera), 2 (iris), 3 (pupil)")]
    InvalidLabel(u8),
    #[error("mask is {mask_h}x{mask_w} but image is {image_h}x{image_w}")]
    ShapeMismatch { image_h: usize, image_w: usize, mask_h: usize, mask_w: usize },
    #[error("mask contains no iris pixels")]
    EmptyIris,
    #[error("iris region too small: {0} pixels, need at least {MIN_IRIS_PIXELS}")]
    IrisTooSmall(usize),
    #[error("iris region consists of glints only")]
    NoValidIris,
    #[error("glint threshold must be in 1..=255")]
    InvalidThreshold,
    #[error("crop bounding box {crop:?} does not match the iris bounding box {mask:?} of the mask")]
    BBoxMismatch { crop: BBox, mask: BBox },
    #[error("{path}: {message}")]
    Png { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

/// Segmentation classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum EyeClass {
    Skin = 0,
    Sclera = 1,
    Iris = 2,
    Pupil = 3,
}

impl EyeClass {
    pub const ALL: [EyeClass; 4] = [EyeClass::Skin, EyeClass::Sclera, EyeClass::Iris, EyeClass::Pupil];

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// An 8-bit grayscale eye image with its identity metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EyeImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    pub user_id: String,
    pub record_id: String,
}

impl EyeImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, user_id: impl Into<String>, record_id: impl Into<String>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(ImagingError::ImageTooSmall { height, width });
        }
        if pixels.len() != height * width {
            return Err(ImagingError::BufferLength { expected: height * width, got: pixels.len() });
        }
        Ok(Self { height, width, pixels, user_id: user_id.into(), record_id: record_id.into() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn load_png(path: &Path, user_id: &str, record_id: &str) -> Result<Self> {
        let (h, w, pixels) = crate::io::read_gray_png(path)?;
        Self::new(h, w, pixels, user_id, record_id)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::io::write_gray_png(path, self.height, self.width, &self.pixels)
    }
}

/// Per-pixel class map aligned with an [`EyeImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(ImagingError::BufferLength { expected: height * width, got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 3) {
            return Err(ImagingError::InvalidLabel(bad));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: EyeClass) -> Self {
        Self { height, width, labels: vec![class.id(); height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: EyeClass) {
        self.labels[row * self.width + col] = class.id();
    }

    pub fn count(&self, class: EyeClass) -> usize {
        self.labels.iter().filter(|&&l| l == class.id()).count()
    }

    pub fn contains(&self, class: EyeClass) -> bool {
        self.labels.contains(&class.id())
    }

    /// Tight bounding box of `class`, if present.
    pub fn bbox_of(&self, class: EyeClass) -> Option<BBox> {
        let id = class.id();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.labels[r * self.width + c] == id {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        (r0 != usize::MAX).then(|| BBox { row0: r0, col0: c0, height: r1 - r0 + 1, width: c1 - c0 + 1 })
    }

    pub fn check_aligned(&self, image: &EyeImage) -> Result<()> {
        if self.height != image.height || self.width != image.width {
            return Err(ImagingError::ShapeMismatch {
                image_h: image.height,
                image_w: image.width,
                mask_h: self.height,
                mask_w: self.width,
            });
        }
        Ok(())
    }

    /// Reads a class map stored as a PNG (values 0..=3) or a `.npy` array.
    pub fn load(path: &Path) -> Result<Self> {
        let is_npy = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"));
        let (h, w, labels) = if is_npy { crate::io::read_label_npy(path)? } else { crate::io::read_gray_png(path)? };
        Self::new(h, w, labels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::io::write_gray_png(path, self.height, self.width, &self.labels)
    }
}

/// Axis-aligned box in source-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

/// Glint pixels removed from an iris crop, in crop coordinates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlintMap {
    pub coordinates: Vec<(usize, usize)>,
    pub original_values: Vec<u8>,
}

impl GlintMap {
    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }
}

/// Iris texture in `[0, 1]`, trimmed to the iris bounding box.
///
/// Non-iris pixels are exactly 0. Glint pixels hold the median of the valid
/// iris pixels and are listed in `glints`; `validity` marks the remaining
/// iris pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct IrisCrop {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub bbox: BBox,
    pub validity: Vec<bool>,
    pub glints: GlintMap,
}

impl IrisCrop {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Same crop with different pixel values.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), self.pixels.len());
        Self { pixels, ..self.clone() }
    }

    /// 8-bit rendering, mostly for inspection dumps.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::io::write_gray_png(path, self.height, self.width, &self.to_u8())
    }
}

fn median_u8(values: &[u8]) -> f64 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let n = values.len();
    let nth = |k: usize| {
        let mut acc = 0;
        for (v, &c) in hist.iter().enumerate() {
            acc += c;
            if acc > k {
                return v as f64;
            }
        }
        255.0
    };
    if n % 2 == 1 {
        nth(n / 2)
    } else {
        (nth(n / 2 - 1) + nth(n / 2)) / 2.0
    }
}

/// Masks out non-iris pixels, trims to the iris bounding box and removes
/// glints (pixels `>= glint_threshold`).
pub fn extract_iris(image: &EyeImage, mask: &SegMask, glint_threshold: u8) -> Result<IrisCrop> {
    mask.check_aligned(image)?;
    if glint_threshold == 0 {
        return Err(ImagingError::InvalidThreshold);
    }
    let iris_pixels = mask.count(EyeClass::Iris);
    if iris_pixels == 0 {
        return Err(ImagingError::EmptyIris);
    }
    if iris_pixels < MIN_IRIS_PIXELS {
        return Err(ImagingError::IrisTooSmall(iris_pixels));
    }
    let bbox = mask.bbox_of(EyeClass::Iris).expect("iris present");
    let (h, w) = (bbox.height, bbox.width);
    let mut raw = vec![0u8; h * w];
    let mut validity = vec![false; h * w];
    let mut glints = GlintMap::default();
    let mut valid_values = Vec::with_capacity(iris_pixels);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (bbox.row0 + r, bbox.col0 + c);
            if mask.get(sr, sc) != EyeClass::Iris.id() {
                continue;
            }
            let v = image.get(sr, sc);
            raw[r * w + c] = v;
            if v >= glint_threshold {
                glints.coordinates.push((r, c));
                glints.original_values.push(v);
            } else {
                validity[r * w + c] = true;
                valid_values.push(v);
            }
        }
    }
    if valid_values.is_empty() {
        return Err(ImagingError::NoValidIris);
    }
    let fill = median_u8(&valid_values) / 255.0;
    let mut pixels: Vec<f64> = raw.iter().map(|&v| v as f64 / 255.0).collect();
    for &(r, c) in &glints.coordinates {
        pixels[r * w + c] = fill;
    }
    Ok(IrisCrop { height: h, width: w, pixels, bbox, validity, glints })
}

/// Writes `stylized` back over the iris pixels of `original` and restores the
/// glints. Pixels outside the iris class are copied unchanged.
pub fn reinsert(original: &EyeImage, stylized: &IrisCrop, mask: &SegMask) -> Result<EyeImage> {
    mask.check_aligned(original)?;
    let expected = mask.bbox_of(EyeClass::Iris).ok_or(ImagingError::EmptyIris)?;
    if expected != stylized.bbox || stylized.height != expected.height || stylized.width != expected.width {
        return Err(ImagingError::BBoxMismatch { crop: stylized.bbox, mask: expected });
    }
    let bbox = stylized.bbox;
    let mut out = original.clone();
    let w = original.width;
    for r in 0..bbox.height {
        for c in 0..bbox.width {
            let (sr, sc) = (bbox.row0 + r, bbox.col0 + c);
            if mask.get(sr, sc) == EyeClass::Iris.id() {
                let v = stylized.pixels[r * bbox.width + c];
                out.pixels[sr * w + sc] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    for (&(r, c), &v) in stylized.glints.coordinates.iter().zip(&stylized.glints.original_values) {
        out.pixels[(bbox.row0 + r) * w + bbox.col0 + c] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_scene(h: usize, w: usize) -> (EyeImage, SegMask) {
        let mut labels = vec![0u8; h * w];
        let mut pixels = vec![90u8; h * w];
        let (cy, cx, r) = (h as f64 / 2.0, w as f64 / 2.0, h.min(w) as f64 / 3.0);
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d < r {
                    labels[y * w + x] = 2;
                    pixels[y * w + x] = (60 + (x * 7 + y * 3) % 80) as u8;
                }
            }
        }
        // two 2x2 glints inside the disc
        for &(gy, gx) in &[(h / 2, w / 2), (h / 2 + 4, w / 2 - 5)] {
            for dy in 0..2 {
                for dx in 0..2 {
                    pixels[(gy + dy) * w + gx + dx] = 255;
                }
            }
        }
        (EyeImage::new(h, w, pixels, "u", "r").unwrap(), SegMask::new(h, w, labels).unwrap())
    }

    #[test]
    fn extraction_records_glints_and_trims() {
        let (img, mask) = disc_scene(48, 64);
        let crop = extract_iris(&img, &mask, 250).unwrap();
        assert_eq!(crop.glints.len(), 8);
        assert!(crop.glints.original_values.iter().all(|&v| v == 255));
        assert_eq!(Some(crop.bbox), mask.bbox_of(EyeClass::Iris));
        for (i, &valid) in crop.validity.iter().enumerate() {
            let (r, c) = (i / crop.width, i % crop.width);
            let is_iris = mask.get(crop.bbox.row0 + r, crop.bbox.col0 + c) == 2;
            if !is_iris {
                assert_eq!(crop.pixels[i], 0.0);
                assert!(!valid);
            }
            if crop.glints.coordinates.contains(&(r, c)) {
                assert!(!valid && is_iris);
            }
        }
        assert!(crop.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn all_iris_without_glints_is_identity_scaling() {
        let pixels: Vec<u8> = (0..40 * 40).map(|i| (i % 200) as u8).collect();
        let img = EyeImage::new(40, 40, pixels.clone(), "u", "r").unwrap();
        let mask = SegMask::filled(40, 40, EyeClass::Iris);
        let crop = extract_iris(&img, &mask, 250).unwrap();
        assert!(crop.glints.is_empty());
        assert_eq!((crop.height, crop.width), (40, 40));
        for (a, &b) in crop.pixels.iter().zip(&pixels) {
            assert_eq!(*a, b as f64 / 255.0);
        }
    }

    #[test]
    fn empty_and_tiny_iris_are_rejected() {
        let img = EyeImage::new(40, 40, vec![100; 1600], "u", "r").unwrap();
        let mask = SegMask::filled(40, 40, EyeClass::Skin);
        assert!(matches!(extract_iris(&img, &mask, 250), Err(ImagingError::EmptyIris)));
        let mut small = mask.clone();
        for i in 0..10 {
            small.set(5, i, EyeClass::Iris);
        }
        assert!(matches!(extract_iris(&img, &small, 250), Err(ImagingError::IrisTooSmall(10))));
    }

    #[test]
    fn reinsert_roundtrip_and_constant_crop() {
        let (img, mask) = disc_scene(48, 64);
        let crop = extract_iris(&img, &mask, 250).unwrap();
        assert_eq!(reinsert(&img, &crop, &mask).unwrap(), img);

        let half = crop.with_pixels(vec![0.5; crop.len()]);
        let out = reinsert(&img, &half, &mask).unwrap();
        for r in 0..img.height() {
            for c in 0..img.width() {
                let (o, i) = (out.get(r, c), img.get(r, c));
                if mask.get(r, c) != 2 {
                    assert_eq!(o, i);
                } else if i == 255 {
                    assert_eq!(o, 255);
                } else {
                    assert_eq!(o, 128);
                }
            }
        }
    }

    #[test]
    fn reinsert_rejects_foreign_bbox() {
        let (img, mask) = disc_scene(48, 64);
        let mut crop = extract_iris(&img, &mask, 250).unwrap();
        crop.bbox.row0 += 1;
        assert!(matches!(reinsert(&img, &crop, &mask), Err(ImagingError::BBoxMismatch { .. })));
    }

    #[test]
    fn median_of_even_count_averages() {
        assert_eq!(median_u8(&[1, 3, 2, 10]), 2.5);
        assert_eq!(median_u8(&[7]), 7.0);
    }
}
