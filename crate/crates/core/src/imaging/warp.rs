//! Random rotation and random perspective variations of an iris crop.
//!
//! Pixels are resampled bilinearly; validity and glint masks use the nearest
//! source pixel so they stay boolean. Samples that map outside the source
//! frame are 0 and invalid.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;

use super::{GlintMap, IrisCrop};

/// One geometric variation with its degree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variation {
    /// Angle drawn uniformly from `(-d, +d)` degrees.
    Rotation(f64),
    /// Corner displacement scale in `[0, 1]`.
    Perspective(f64),
}

impl Variation {
    pub fn degree(&self) -> f64 {
        match *self {
            Variation::Rotation(d) | Variation::Perspective(d) => d,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Variation::Rotation(_) => "rotation",
            Variation::Perspective(_) => "perspective",
        }
    }
}

pub fn apply_variation<R: Rng + ?Sized>(crop: &IrisCrop, variation: Variation, rng: &mut R) -> IrisCrop {
    match variation {
        Variation::Rotation(d) => random_rotation(crop, d, rng),
        Variation::Perspective(p) => random_perspective(crop, p, rng),
    }
}

/// Projective map `dst ~ H · src` in `(x, y, 1)` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let v = self.0 * Vector3::new(x, y, 1.0);
        (v.x / v.z, v.y / v.z)
    }

    pub fn inverse(&self) -> Option<Self> {
        self.0.try_inverse().map(Self)
    }
}

/// Solves the 8-unknown linear system for the homography taking each `src`
/// corner to the matching `dst` corner (`h33 = 1`).
pub fn homography_from_corners(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Homography> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        let r = 2 * i;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Homography(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0)))
}

/// Resamples `crop` through `source_of`, which maps an output pixel centre to
/// the source coordinate it reads from.
fn resample(crop: &IrisCrop, source_of: impl Fn(f64, f64) -> (f64, f64)) -> IrisCrop {
    let (h, w) = (crop.height, crop.width);
    let mut pixels = vec![0.0; h * w];
    let mut validity = vec![false; h * w];
    let mut glint_src = vec![None; h * w];
    for (k, (&(r, c), &v)) in crop.glints.coordinates.iter().zip(&crop.glints.original_values).enumerate() {
        glint_src[r * w + c] = Some((k, v));
    }
    let mut glints = GlintMap::default();
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x as f64, y as f64);
            if !(sx >= 0.0 && sy >= 0.0 && sx <= max_x && sy <= max_y) {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let p = |yy: usize, xx: usize| crop.pixels[yy * w + xx];
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            let o = y * w + x;
            pixels[o] = top * (1.0 - fy) + bottom * fy;
            let (nx, ny) = (sx.round() as usize, sy.round() as usize);
            let n = ny * w + nx;
            validity[o] = crop.validity[n];
            if let Some((_, v)) = glint_src[n] {
                glints.coordinates.push((y, x));
                glints.original_values.push(v);
            }
        }
    }
    IrisCrop { height: h, width: w, pixels, bbox: crop.bbox, validity, glints }
}

/// Rotates the crop about its centre by an angle drawn uniformly from
/// `(-d, +d)` degrees.
pub fn random_rotation<R: Rng + ?Sized>(crop: &IrisCrop, d: f64, rng: &mut R) -> IrisCrop {
    assert!(d >= 0.0, "rotation degree must be non-negative");
    let u: f64 = rng.random();
    let theta = ((2.0 * u - 1.0) * d).to_radians();
    if theta == 0.0 {
        return crop.clone();
    }
    let (cx, cy) = ((crop.width as f64 - 1.0) / 2.0, (crop.height as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    // inverse rotation takes output pixels back to the source
    resample(crop, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    })
}

/// Corner displacements drawn for a perspective degree `p`: top-left,
/// top-right, bottom-right, bottom-left, `x` before `y`, each inward.
pub fn perspective_corners<R: Rng + ?Sized>(height: usize, width: usize, p: f64, rng: &mut R) -> ([(f64, f64); 4], [(f64, f64); 4]) {
    let (w, h) = (width as f64, height as f64);
    let (xmax, ymax) = (w - 1.0, h - 1.0);
    let src = [(0.0, 0.0), (xmax, 0.0), (xmax, ymax), (0.0, ymax)];
    let inward = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut dst = src;
    for (corner, dir) in dst.iter_mut().zip(inward) {
        let dx = rng.random::<f64>() * p * w / 2.0;
        let dy = rng.random::<f64>() * p * h / 2.0;
        corner.0 += dir.0 * dx;
        corner.1 += dir.1 * dy;
    }
    (src, dst)
}

/// Warps the crop with a random inward corner displacement of degree `p`.
pub fn random_perspective<R: Rng + ?Sized>(crop: &IrisCrop, p: f64, rng: &mut R) -> IrisCrop {
    assert!((0.0..=1.0).contains(&p), "perspective degree must be in [0, 1]");
    let (src, dst) = perspective_corners(crop.height, crop.width, p, rng);
    if src == dst {
        return crop.clone();
    }
    let Some(inv) = homography_from_corners(&src, &dst).and_then(|h| h.inverse()) else {
        return crop.with_pixels(vec![0.0; crop.len()]);
    };
    resample(crop, |x, y| inv.apply(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn crop(h: usize, w: usize) -> IrisCrop {
        let pixels: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        IrisCrop {
            height: h,
            width: w,
            pixels,
            bbox: BBox { row0: 3, col0: 4, height: h, width: w },
            validity: vec![true; h * w],
            glints: GlintMap { coordinates: vec![(h / 2, w / 2)], original_values: vec![255] },
        }
    }

    #[test]
    fn zero_degrees_are_identity() {
        let c = crop(20, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_rotation(&c, 0.0, &mut rng), c);
        assert_eq!(random_perspective(&c, 0.0, &mut rng), c);
    }

    #[test]
    fn identity_corners_give_identity_homography() {
        let src = [(0.0, 0.0), (9.0, 0.0), (9.0, 7.0), (0.0, 7.0)];
        let h = homography_from_corners(&src, &src).unwrap();
        assert!((h.0 - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn homography_maps_corners() {
        let src = [(0.0, 0.0), (9.0, 0.0), (9.0, 7.0), (0.0, 7.0)];
        let dst = [(1.0, 2.0), (8.0, 0.5), (7.0, 6.0), (0.5, 6.5)];
        let h = homography_from_corners(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = h.apply(s.0, s.1);
            assert!((u - d.0).abs() < 1e-9 && (v - d.1).abs() < 1e-9);
        }
    }

    #[test]
    fn full_degree_bounds_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (src, dst) = perspective_corners(40, 60, 1.0, &mut rng);
            for (s, d) in src.iter().zip(&dst) {
                assert!((s.0 - d.0).abs() <= 30.0 && (s.1 - d.1).abs() <= 20.0);
            }
        }
    }

    #[test]
    fn variations_are_deterministic_and_keep_dims() {
        let c = crop(25, 31);
        for v in [Variation::Rotation(180.0), Variation::Rotation(30.0), Variation::Perspective(0.6)] {
            let a = apply_variation(&c, v, &mut ChaCha8Rng::seed_from_u64(9));
            let b = apply_variation(&c, v, &mut ChaCha8Rng::seed_from_u64(9));
            assert_eq!(a, b);
            assert_eq!((a.height, a.width, a.pixels.len()), (25, 31, 25 * 31));
            for (&(r, col), _) in a.glints.coordinates.iter().zip(&a.glints.original_values) {
                assert!(r < 25 && col < 31);
            }
        }
    }

    #[test]
    fn half_turn_flips_the_crop() {
        let c = crop(9, 11);
        // u = 1 draws are impossible, so build the 180 degree case directly
        let (cx, cy) = (5.0, 4.0);
        let out = resample(&c, |x, y| (2.0 * cx - x, 2.0 * cy - y));
        for y in 0..9 {
            for x in 0..11 {
                assert!((out.pixels[y * 11 + x] - c.pixels[(8 - y) * 11 + 10 - x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outside_samples_are_zero_and_invalid() {
        let c = crop(20, 20);
        let out = random_perspective(&c, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let (src, dst) = perspective_corners(20, 20, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let inv = homography_from_corners(&src, &dst).unwrap().inverse().unwrap();
        let mut outside = 0;
        for y in 0..20 {
            for x in 0..20 {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                if !(0.0..=19.0).contains(&sx) || !(0.0..=19.0).contains(&sy) {
                    outside += 1;
                    assert_eq!(out.pixels[y * 20 + x], 0.0);
                    assert!(!out.validity[y * 20 + x]);
                }
            }
        }
        assert!(outside > 0);
    }
}
