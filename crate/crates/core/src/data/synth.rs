//! Procedural eye images with per-user iris signatures.
//!
//! Geometry is laid out for a 200×320 frame and scaled to the requested
//! size. The iris texture lives in normalised polar ("rubber sheet")
//! coordinates, so pupil dilation and gaze-dependent foreshortening move the
//! pattern without changing it.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{assign_splits, DataError, Dataset, GazeLabel, Result, Sample, Split};
use crate::imaging::{EyeClass, EyeImage, SegMask};
use crate::rng::keyed;

const BASE_HEIGHT: f64 = 200.0;
const BASE_WIDTH: f64 = 320.0;
const NOISE_RINGS: usize = 8;
const NOISE_SECTORS: usize = 32;
const PUPIL_LEVEL: f64 = 20.0;
/// Ordinary pixels are kept below this so only glints reach the glint range.
const MAX_BODY_LEVEL: f64 = 245.0;
pub const GLINT_LEVEL: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub samples_per_user: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_users: 10, samples_per_user: 10, height: 200, width: 320, seed: 42 }
    }
}

/// One sinusoid of the iris pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ripple {
    pub amplitude: f64,
    /// Cycles across the iris annulus.
    pub radial: f64,
    /// Whole cycles around the pupil.
    pub angular: i32,
    pub phase: f64,
}

/// Everything that stays fixed for one synthetic user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSignature {
    pub user_id: String,
    pub iris_level: f64,
    pub ripples: Vec<Ripple>,
    /// `NOISE_RINGS × NOISE_SECTORS` grid, wrapped around the pupil.
    pub noise: Vec<f64>,
    pub pupil_ratio: f64,
    pub iris_radius: f64,
    pub skin_level: f64,
    pub sclera_level: f64,
    /// Glint positions as (annulus fraction, angle).
    pub glints: [(f64, f64); 2],
}

impl UserSignature {
    pub fn random<R: Rng + ?Sized>(user_id: &str, rng: &mut R) -> Self {
        let count = rng.random_range(3..=6);
        let ripples = (0..count)
            .map(|_| Ripple {
                amplitude: rng.random_range(5.0..14.0),
                radial: rng.random_range(0.5..4.0),
                angular: rng.random_range(0..=16),
                phase: rng.random_range(0.0..TAU),
            })
            .collect();
        let normal = Normal::new(0.0, 7.0).expect("valid");
        let noise = (0..NOISE_RINGS * NOISE_SECTORS).map(|_| normal.sample(rng)).collect();
        Self {
            user_id: user_id.to_string(),
            iris_level: rng.random_range(70.0..120.0),
            ripples,
            noise,
            pupil_ratio: rng.random_range(0.30..0.42),
            iris_radius: rng.random_range(41.0..47.0),
            skin_level: rng.random_range(150.0..185.0),
            sclera_level: rng.random_range(205.0..225.0),
            glints: [
                (rng.random_range(0.25..0.85), rng.random_range(0.0..TAU)),
                (rng.random_range(0.25..0.85), rng.random_range(0.0..TAU)),
            ],
        }
    }

    fn noise_at(&self, rho: f64, phi: f64) -> f64 {
        let r = (rho.clamp(0.0, 1.0) * (NOISE_RINGS - 1) as f64).min((NOISE_RINGS - 1) as f64 - 1e-9);
        let a = phi.rem_euclid(TAU) / TAU * NOISE_SECTORS as f64;
        let (r0, a0) = (r.floor() as usize, a.floor() as usize % NOISE_SECTORS);
        let (fr, fa) = (r - r0 as f64, a - a.floor());
        let a1 = (a0 + 1) % NOISE_SECTORS;
        let g = |ri: usize, ai: usize| self.noise[ri * NOISE_SECTORS + ai];
        let lo = g(r0, a0) * (1.0 - fa) + g(r0, a1) * fa;
        let hi = g(r0 + 1, a0) * (1.0 - fa) + g(r0 + 1, a1) * fa;
        lo * (1.0 - fr) + hi * fr
    }

    /// Iris intensity at annulus fraction `rho` and angle `phi`.
    pub fn texture(&self, rho: f64, phi: f64) -> f64 {
        let ripple: f64 = self.ripples.iter().map(|r| r.amplitude * (TAU * r.radial * rho + r.angular as f64 * phi + r.phase).sin()).sum();
        let limbus = -12.0 * rho.powi(4);
        (self.iris_level + ripple + self.noise_at(rho, phi) + limbus).clamp(50.0, 140.0)
    }
}

/// Per-sample layout in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeGeometry {
    pub eye_cx: f64,
    pub eye_cy: f64,
    pub lid_half_width: f64,
    pub upper_opening: f64,
    pub lower_opening: f64,
    pub iris_cx: f64,
    pub iris_cy: f64,
    pub iris_rx: f64,
    pub iris_ry: f64,
    pub pupil_ratio: f64,
    pub glint_radius: f64,
}

impl EyeGeometry {
    pub fn pupil_rx(&self) -> f64 {
        self.iris_rx * self.pupil_ratio
    }

    pub fn pupil_ry(&self) -> f64 {
        self.iris_ry * self.pupil_ratio
    }

    fn inside_lids(&self, x: f64, y: f64) -> bool {
        let t = (x - self.eye_cx) / self.lid_half_width;
        if t.abs() >= 1.0 {
            return false;
        }
        let bulge = 1.0 - t * t;
        y > self.eye_cy - self.upper_opening * bulge && y < self.eye_cy + self.lower_opening * bulge
    }

    /// Elliptical radius relative to the iris boundary and the polar angle.
    fn iris_polar(&self, x: f64, y: f64) -> (f64, f64) {
        let u = (x - self.iris_cx) / self.iris_rx;
        let v = (y - self.iris_cy) / self.iris_ry;
        ((u * u + v * v).sqrt(), v.atan2(u))
    }

    pub fn classify(&self, x: f64, y: f64) -> EyeClass {
        if !self.inside_lids(x, y) {
            return EyeClass::Skin;
        }
        let (r, _) = self.iris_polar(x, y);
        if r <= self.pupil_ratio {
            EyeClass::Pupil
        } else if r <= 1.0 {
            EyeClass::Iris
        } else {
            EyeClass::Sclera
        }
    }
}

/// Per-sample draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleParams {
    pub yaw: f64,
    pub pitch: f64,
    pub dilation: f64,
    pub brightness: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub opening: f64,
}

impl SampleParams {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            yaw: rng.random_range(-25.0f64..25.0).to_radians(),
            pitch: rng.random_range(-15.0f64..15.0).to_radians(),
            dilation: rng.random_range(0.85..1.15),
            brightness: rng.random_range(0.9..1.1),
            shift_x: rng.random_range(-3.0..3.0),
            shift_y: rng.random_range(-3.0..3.0),
            opening: rng.random_range(0.95..1.05),
        }
    }

    pub fn neutral() -> Self {
        Self { yaw: 0.0, pitch: 0.0, dilation: 1.0, brightness: 1.0, shift_x: 0.0, shift_y: 0.0, opening: 1.0 }
    }

    pub fn gaze(&self) -> GazeLabel {
        GazeLabel::from_angles(self.yaw, self.pitch)
    }

    pub fn geometry(&self, user: &UserSignature, height: usize, width: usize) -> EyeGeometry {
        let k = (height as f64 / BASE_HEIGHT).min(width as f64 / BASE_WIDTH);
        let eye_cx = width as f64 / 2.0 - 0.5 + self.shift_x * k;
        let eye_cy = height as f64 / 2.0 - 0.5 + self.shift_y * k;
        let radius = user.iris_radius * k;
        EyeGeometry {
            eye_cx,
            eye_cy,
            lid_half_width: 130.0 * k,
            upper_opening: 62.0 * k * self.opening,
            lower_opening: 55.0 * k * self.opening,
            iris_cx: eye_cx + 70.0 * k * self.yaw.sin(),
            iris_cy: eye_cy - 45.0 * k * self.pitch.sin(),
            iris_rx: radius * self.yaw.cos(),
            iris_ry: radius * self.pitch.cos(),
            pupil_ratio: (user.pupil_ratio * self.dilation).min(0.6),
            glint_radius: (3.0 * k).max(1.0),
        }
    }
}

/// Draws an eye and its exact class map.
pub fn render_eye<R: Rng + ?Sized>(
    user: &UserSignature,
    params: &SampleParams,
    height: usize,
    width: usize,
    rng: &mut R,
    record_id: &str,
) -> Result<(EyeImage, SegMask, EyeGeometry)> {
    let g = params.geometry(user, height, width);
    let sensor = Normal::new(0.0, 1.5).expect("valid");
    let mut pixels = vec![0u8; height * width];
    let mut labels = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let class = g.classify(fx, fy);
            let level = match class {
                EyeClass::Skin => user.skin_level + 10.0 * (fy / height as f64 - 0.5),
                EyeClass::Sclera => {
                    let t = (fx - g.eye_cx) / g.lid_half_width;
                    user.sclera_level - 25.0 * t * t
                }
                EyeClass::Pupil => PUPIL_LEVEL,
                EyeClass::Iris => {
                    let (r, phi) = g.iris_polar(fx, fy);
                    let rho = (r - g.pupil_ratio) / (1.0 - g.pupil_ratio);
                    user.texture(rho, phi)
                }
            };
            let v = (level * params.brightness + sensor.sample(rng)).round().clamp(0.0, MAX_BODY_LEVEL);
            pixels[y * width + x] = v as u8;
            labels[y * width + x] = class.id();
        }
    }
    for &(rho, phi) in &user.glints {
        let r = g.pupil_ratio + rho * (1.0 - g.pupil_ratio);
        let (gx, gy) = (g.iris_cx + g.iris_rx * r * phi.cos(), g.iris_cy + g.iris_ry * r * phi.sin());
        let reach = g.glint_radius.ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (gx.round() as isize + dx, gy.round() as isize + dy);
                if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                    continue;
                }
                let (xu, yu) = (x as usize, y as usize);
                let d2 = (x as f64 - gx).powi(2) + (y as f64 - gy).powi(2);
                if d2 <= g.glint_radius * g.glint_radius && labels[yu * width + xu] == EyeClass::Iris.id() {
                    pixels[yu * width + xu] = GLINT_LEVEL;
                }
            }
        }
    }
    let image = EyeImage::new(height, width, pixels, user.user_id.clone(), record_id)?;
    let mask = SegMask::new(height, width, labels)?;
    Ok((image, mask, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub record_id: String,
    pub user: usize,
    pub image: EyeImage,
    pub mask: SegMask,
    pub gaze: GazeLabel,
    pub params: SampleParams,
    pub geometry: EyeGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub users: Vec<UserSignature>,
    pub samples: Vec<SyntheticSample>,
}

/// Builds `n_users × samples_per_user` eyes, deterministic in `seed`.
pub fn generate_synthetic_corpus(n_users: usize, samples_per_user: usize, height: usize, width: usize, seed: u64) -> Result<SyntheticCorpus> {
    SyntheticCorpus::generate(&SynthConfig { n_users, samples_per_user, height, width, seed })
}

impl SyntheticCorpus {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        if config.n_users < 2 {
            return Err(DataError::TooFewUsers(config.n_users));
        }
        if config.samples_per_user < 2 {
            return Err(DataError::TooFewSamples(config.samples_per_user));
        }
        let digits = config.n_users.to_string().len().max(2);
        let sample_digits = config.samples_per_user.to_string().len().max(2);
        let users: Vec<UserSignature> = (0..config.n_users)
            .map(|u| {
                let id = format!("u{u:0digits$}");
                UserSignature::random(&id, &mut keyed(config.seed, &["synth-user", &id]))
            })
            .collect();
        let mut samples = Vec::with_capacity(config.n_users * config.samples_per_user);
        for (u, user) in users.iter().enumerate() {
            for s in 0..config.samples_per_user {
                let record_id = format!("{}_s{s:0sample_digits$}", user.user_id);
                let mut rng = keyed(config.seed, &["synth-sample", &record_id]);
                let params = SampleParams::random(&mut rng);
                let (image, mask, geometry) = render_eye(user, &params, config.height, config.width, &mut rng, &record_id)?;
                samples.push(SyntheticSample { record_id, user: u, image, mask, gaze: params.gaze(), params, geometry });
            }
        }
        Ok(Self { config: config.clone(), users, samples })
    }

    /// In-memory dataset with per-user splits.
    pub fn to_dataset(&self, test_fraction: f64, seed: u64) -> Result<Dataset> {
        let items = self.samples.iter().map(|s| (self.users[s.user].user_id.as_str(), s.record_id.as_str()));
        let (users, assigned) = assign_splits(items, test_fraction, seed)?;
        let samples = self
            .samples
            .iter()
            .zip(assigned)
            .filter_map(|(s, a)| {
                a.map(|(label, split)| Sample {
                    record_id: s.record_id.clone(),
                    user_id: self.users[s.user].user_id.clone(),
                    label,
                    split,
                    image: s.image.clone(),
                    mask: Some(s.mask.clone()),
                    gaze: Some(s.gaze),
                })
            })
            .collect();
        Ok(Dataset { samples, users })
    }

    /// Writes the recognition layout: `images/`, `labels/` and `meta.csv`.
    pub fn write_recognition(&self, root: &Path) -> Result<()> {
        let mut meta = String::from("stem,user_id\n");
        for s in &self.samples {
            s.image.save_png(&root.join("images").join(format!("{}.png", s.record_id)))?;
            s.mask.save_png(&root.join("labels").join(format!("{}.png", s.record_id)))?;
            meta.push_str(&format!("{},{}\n", s.record_id, self.users[s.user].user_id));
        }
        std::fs::write(root.join("meta.csv"), meta)?;
        Ok(())
    }

    /// Writes the sequence layout under `root/{train,test}` with one sequence
    /// per user, frames split per user with `test_fraction`.
    pub fn write_gaze(&self, root: &Path, test_fraction: f64, seed: u64) -> Result<()> {
        let dataset = self.to_dataset(test_fraction, seed)?;
        let mut labels: std::collections::BTreeMap<(Split, String), String> = Default::default();
        for s in &dataset.samples {
            let base = root.join(s.split.name());
            let frame = s.record_id.rsplit('_').next().unwrap_or(&s.record_id).to_string();
            s.image.save_png(&base.join("sequences").join(&s.user_id).join(format!("{frame}.png")))?;
            if let Some(mask) = &s.mask {
                mask.save_png(&base.join("masks").join(&s.user_id).join(format!("{frame}.png")))?;
            }
            let [x, y, z] = s.gaze.expect("synthetic gaze").vector();
            labels.entry((s.split, s.user_id.clone())).or_default().push_str(&format!("{frame} {x:.9} {y:.9} {z:.9}\n"));
        }
        for ((split, user), text) in labels {
            let dir = root.join(split.name()).join("labels");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join(format!("{user}.txt")), text)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_gaze_dataset, load_recognition_dataset};

    #[test]
    fn deterministic_and_complete() {
        let a = generate_synthetic_corpus(3, 3, 100, 160, 7).unwrap();
        let b = generate_synthetic_corpus(3, 3, 100, 160, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 9);
        for s in &a.samples {
            for c in EyeClass::ALL {
                assert!(s.mask.contains(c), "{} lacks {c:?}", s.record_id);
            }
            let glints = s.image.pixels().iter().filter(|&&v| v >= 250).count();
            assert!(glints > 0);
            for (p, l) in s.image.pixels().iter().zip(s.mask.labels()) {
                if *p >= 250 {
                    assert_eq!(*l, EyeClass::Iris.id());
                }
            }
        }
        assert!(generate_synthetic_corpus(1, 3, 100, 160, 7).is_err());
        assert!(generate_synthetic_corpus(2, 1, 100, 160, 7).is_err());
    }

    #[test]
    fn neutral_pupil_is_centred() {
        let user = UserSignature::random("u", &mut keyed(1, &["x"]));
        let mut rng = keyed(1, &["y"]);
        let (_, mask, g) = render_eye(&user, &SampleParams::neutral(), 200, 320, &mut rng, "r").unwrap();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..200 {
            for x in 0..320 {
                if mask.get(y, x) == EyeClass::Pupil.id() {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        assert!((sx / n - g.iris_cx).abs() < 0.5 && (sy / n - g.iris_cy).abs() < 0.5);
    }

    #[test]
    fn layouts_roundtrip_through_loaders() {
        let corpus = generate_synthetic_corpus(3, 4, 64, 96, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_recognition(&dir.path().join("rec")).unwrap();
        let m = load_recognition_dataset(&dir.path().join("rec"), 0.25, 42).unwrap();
        assert_eq!(m.records.len(), 12);
        assert_eq!(m.split(Split::Test).count(), 3);
        let loaded = m.load().unwrap();
        let mem = corpus.to_dataset(0.25, 42).unwrap();
        assert_eq!(loaded.samples.iter().map(|s| (&s.record_id, s.split)).collect::<Vec<_>>(), mem.samples.iter().map(|s| (&s.record_id, s.split)).collect::<Vec<_>>());
        assert_eq!(loaded.samples[0].image.pixels(), mem.samples[0].image.pixels());

        corpus.write_gaze(&dir.path().join("gaze"), 0.25, 42).unwrap();
        let g = load_gaze_dataset(&dir.path().join("gaze")).unwrap();
        assert_eq!(g.records.len(), 12);
        for r in &g.records {
            let v = r.gaze.unwrap().vector();
            assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-4);
            assert!(r.mask_path.is_some());
        }
    }
}
