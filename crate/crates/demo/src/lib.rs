//! Browser bindings: render synthetic eyes, cut out and vary the iris, and
//! identify a sample by its nearest style feature.

use std::collections::HashMap;

use wasm_bindgen::prelude::*;

use iris_style::backbone::{Backbone, DEFAULT_STYLE_TAPS};
use iris_style::data::{generate_synthetic_corpus, SyntheticCorpus};
use iris_style::features::style_feature;
use iris_style::imaging::{apply_variation, extract_iris, EyeClass, IrisCrop, Variation, DEFAULT_GLINT_THRESHOLD};
use iris_style::recognition::Standardizer;
use iris_style::rng::keyed;

const HEIGHT: usize = 200;
const WIDTH: usize = 320;
const STYLE_INPUT: usize = 64;
/// Reference samples averaged per user when identifying.
const REFERENCES: usize = 3;

/// An RGBA raster for a canvas `ImageData`.
#[wasm_bindgen]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Copies the pixels out; JS wraps them in a `Uint8ClampedArray`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

fn gray_rgba(values: impl Iterator<Item = u8>) -> Vec<u8> {
    values.flat_map(|v| [v, v, v, 255]).collect()
}

const OVERLAY: [[u8; 3]; 4] = [[0, 0, 0], [70, 160, 255], [80, 220, 120], [255, 90, 90]];

fn class_color(id: u8) -> [u8; 3] {
    OVERLAY[id as usize % OVERLAY.len()]
}

/// Result of matching one sample against every user.
#[wasm_bindgen]
pub struct Match {
    predicted_user: usize,
    true_user: usize,
    distances: Vec<f64>,
}

#[wasm_bindgen]
impl Match {
    #[wasm_bindgen(getter)]
    pub fn predicted_user(&self) -> usize {
        self.predicted_user
    }

    #[wasm_bindgen(getter)]
    pub fn true_user(&self) -> usize {
        self.true_user
    }

    /// Distance to each user's reference centroid.
    pub fn distances(&self) -> Vec<f64> {
        self.distances.clone()
    }
}

#[wasm_bindgen]
pub struct Demo {
    corpus: SyntheticCorpus,
    seed: u64,
    backbone: Option<Backbone<f32>>,
    styles: HashMap<usize, Vec<f32>>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(users: usize, samples_per_user: usize, seed: u32) -> Result<Demo, JsError> {
        let seed = u64::from(seed);
        let corpus = generate_synthetic_corpus(users, samples_per_user, HEIGHT, WIDTH, seed)?;
        Ok(Demo { corpus, seed, backbone: None, styles: HashMap::new() })
    }

    #[wasm_bindgen(getter)]
    pub fn users(&self) -> usize {
        self.corpus.users.len()
    }

    #[wasm_bindgen(getter)]
    pub fn samples_per_user(&self) -> usize {
        self.corpus.config.samples_per_user
    }

    /// The eye image with the class map blended in at `overlay` (0 to 1).
    pub fn eye(&self, user: usize, sample: usize, overlay: f64) -> Result<Picture, JsError> {
        let s = &self.corpus.samples[self.index(user, sample)?];
        let a = overlay.clamp(0.0, 1.0);
        let rgba = s
            .image
            .pixels()
            .iter()
            .zip(s.mask.labels())
            .flat_map(|(&v, &c)| {
                let tint = class_color(c);
                let mix = |t: u8| ((1.0 - a) * v as f64 + a * t as f64).round() as u8;
                if c == EyeClass::Skin.id() {
                    [v, v, v, 255]
                } else {
                    [mix(tint[0]), mix(tint[1]), mix(tint[2]), 255]
                }
            })
            .collect();
        Ok(Picture { width: s.image.width(), height: s.image.height(), rgba })
    }

    /// The trimmed iris crop, optionally rotated (`degree` in degrees) or
    /// perspective-warped (`degree` in 0..=1). Glints show in red.
    pub fn iris(&self, user: usize, sample: usize, variation: &str, degree: f64) -> Result<Picture, JsError> {
        let crop = self.crop(user, sample)?;
        let variation = match variation {
            "none" => None,
            "rotation" => Some(Variation::Rotation(degree)),
            "perspective" => Some(Variation::Perspective(degree.clamp(0.0, 1.0))),
            other => return Err(JsError::new(&format!("unknown variation `{other}`"))),
        };
        let shown = match variation {
            Some(v) => apply_variation(&crop, v, &mut keyed(self.seed, &["demo-variation", &format!("{user}-{sample}")])),
            None => crop.clone(),
        };
        let mut rgba = gray_rgba(shown.to_u8().into_iter());
        if variation.is_none() {
            for &(r, c) in &crop.glints.coordinates {
                let i = 4 * (r * crop.width + c);
                rgba[i..i + 3].copy_from_slice(&[255, 40, 40]);
            }
        }
        Ok(Picture { width: shown.width, height: shown.height, rgba })
    }

    /// Nearest user by distance to the mean style feature of a few other
    /// samples of each user. Features are z-scored over those references,
    /// as the recognition heads do. The first call builds the backbone,
    /// which takes a few seconds.
    pub fn identify(&mut self, user: usize, sample: usize) -> Result<Match, JsError> {
        let probe = self.style(user, sample)?;
        let per_user = REFERENCES.min(self.samples_per_user() - 1);
        let mut references = Vec::with_capacity(self.users() * per_user);
        for u in 0..self.users() {
            for s in (0..self.samples_per_user()).filter(|&s| u != user || s != sample).take(per_user) {
                references.push(self.style(u, s)?);
            }
        }
        let scale = Standardizer::fit(&references);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        scale.apply(&probe, &mut a);
        let distances: Vec<f64> = references
            .chunks(per_user)
            .map(|group| {
                let mut centroid = vec![0.0f64; a.len()];
                for r in group {
                    b.clear();
                    scale.apply(r, &mut b);
                    centroid.iter_mut().zip(&b).for_each(|(c, v)| *c += f64::from(*v) / group.len() as f64);
                }
                a.iter().zip(&centroid).map(|(x, c)| (f64::from(*x) - c).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let predicted_user = distances.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
        Ok(Match { predicted_user, true_user: user, distances })
    }
}

impl Demo {
    fn index(&self, user: usize, sample: usize) -> Result<usize, JsError> {
        let per = self.samples_per_user();
        if user >= self.users() || sample >= per {
            return Err(JsError::new(&format!("no sample {sample} of user {user}")));
        }
        Ok(user * per + sample)
    }

    fn crop(&self, user: usize, sample: usize) -> Result<IrisCrop, JsError> {
        let s = &self.corpus.samples[self.index(user, sample)?];
        Ok(extract_iris(&s.image, &s.mask, DEFAULT_GLINT_THRESHOLD)?)
    }

    fn style(&mut self, user: usize, sample: usize) -> Result<Vec<f32>, JsError> {
        let key = self.index(user, sample)?;
        if let Some(v) = self.styles.get(&key) {
            return Ok(v.clone());
        }
        let crop = self.crop(user, sample)?;
        let seed = self.seed;
        let net = match &mut self.backbone {
            Some(net) => net,
            slot => slot.insert(Backbone::<f32>::seeded(seed).with_input_size(STYLE_INPUT)?),
        };
        let v = style_feature(net, &crop, &DEFAULT_STYLE_TAPS)?.to_f32();
        self.styles.insert(key, v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pictures_have_matching_buffers() {
        let demo = Demo::new(3, 3, 7).unwrap();
        let eye = demo.eye(1, 2, 0.5).unwrap();
        assert_eq!((eye.width(), eye.height()), (WIDTH, HEIGHT));
        assert_eq!(eye.rgba().len(), 4 * WIDTH * HEIGHT);
        for variation in ["none", "rotation", "perspective"] {
            let iris = demo.iris(1, 2, variation, 0.3).unwrap();
            assert_eq!(iris.rgba().len(), 4 * iris.width() * iris.height());
        }
    }

    #[test]
    fn identify_reports_one_distance_per_user() {
        let mut demo = Demo::new(3, 3, 7).unwrap();
        let m = demo.identify(2, 1).unwrap();
        assert_eq!(m.true_user(), 2);
        assert_eq!(m.distances().len(), 3);
        assert!(m.predicted_user() < 3);
        assert_eq!(demo.identify(2, 1).unwrap().distances(), m.distances());
    }
}
