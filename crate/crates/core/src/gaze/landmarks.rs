use super::{fit_ellipse, Ellipse, GazeError};
use crate::imaging::{EyeClass, SegMask};

pub const LANDMARK_COUNT: usize = 19;

/// Names of the landmark features, in vector order.
pub const LANDMARK_NAMES: [&str; LANDMARK_COUNT] = [
    "pupil_cx",
    "pupil_cy",
    "pupil_a",
    "pupil_b",
    "pupil_theta",
    "pupil_area",
    "iris_cx",
    "iris_cy",
    "iris_a",
    "iris_b",
    "iris_theta",
    "pupil_offset_x",
    "pupil_offset_y",
    "corner_left_x",
    "corner_left_y",
    "corner_right_x",
    "corner_right_y",
    "sclera_area",
    "iris_area",
];

/// Mask-derived eye geometry. Positions are divided by the image width or
/// height, lengths by the width, angles by π and areas by the pixel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkVector(pub [f64; LANDMARK_COUNT]);

impl LandmarkVector {
    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

fn in_class(mask: &SegMask, x: isize, y: isize, classes: &[EyeClass]) -> bool {
    if x < 0 || y < 0 || x >= mask.width() as isize || y >= mask.height() as isize {
        return false;
    }
    let l = mask.get(y as usize, x as usize);
    classes.iter().any(|c| c.id() == l)
}

/// Pixels of `region` with a 4-neighbour in `across`.
fn border(mask: &SegMask, region: &[EyeClass], across: &[EyeClass]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for y in 0..mask.height() as isize {
        for x in 0..mask.width() as isize {
            if in_class(mask, x, y, region) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| in_class(mask, x + dx, y + dy, across)) {
                out.push((x as f64, y as f64));
            }
        }
    }
    out
}

/// Fits the pupil and the iris (pupil included) outlines. The outline is
/// taken where the region meets its outer neighbour class, which skips
/// eyelid occlusions, and falls back to the full border when that is too
/// short.
fn region_ellipse(mask: &SegMask, region: &[EyeClass], outer: EyeClass) -> Result<Ellipse, GazeError> {
    let mut pts = border(mask, region, &[outer]);
    if pts.len() < 12 {
        let all = [EyeClass::Skin, EyeClass::Sclera, EyeClass::Iris, EyeClass::Pupil];
        let others: Vec<EyeClass> = all.into_iter().filter(|c| !region.contains(c)).collect();
        pts = border(mask, region, &others);
        // pixels on the image edge count as border too
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let edge = x == 0 || y == 0 || x + 1 == mask.width() || y + 1 == mask.height();
                if edge && in_class(mask, x as isize, y as isize, region) {
                    pts.push((x as f64, y as f64));
                }
            }
        }
    }
    Ok(fit_ellipse(&pts)?.ellipse)
}

pub fn extract_landmarks(mask: &SegMask) -> Result<LandmarkVector, GazeError> {
    for class in [EyeClass::Pupil, EyeClass::Iris] {
        if !mask.contains(class) {
            return Err(GazeError::MissingClass(class));
        }
    }
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let total = w * h;
    let pupil = region_ellipse(mask, &[EyeClass::Pupil], EyeClass::Iris)?;
    let iris = region_ellipse(mask, &[EyeClass::Iris, EyeClass::Pupil], EyeClass::Sclera)?;

    // Eye corners: the extreme columns of the visible eyeball (sclera,
    // or iris when no sclera is visible), at the mean row of that column.
    let corner_class: &[EyeClass] = if mask.contains(EyeClass::Sclera) { &[EyeClass::Sclera] } else { &[EyeClass::Iris, EyeClass::Pupil] };
    let column_rows = |x: usize| -> Vec<usize> { (0..mask.height()).filter(|&y| in_class(mask, x as isize, y as isize, corner_class)).collect() };
    let cols: Vec<usize> = (0..mask.width()).filter(|&x| !column_rows(x).is_empty()).collect();
    let corner = |x: usize| {
        let rows = column_rows(x);
        (x as f64 / w, rows.iter().sum::<usize>() as f64 / rows.len() as f64 / h)
    };
    let (left, right) = (corner(cols[0]), corner(*cols.last().unwrap()));

    let area = |c: EyeClass| mask.count(c) as f64 / total;
    let pi = std::f64::consts::PI;
    Ok(LandmarkVector([
        pupil.cx / w,
        pupil.cy / h,
        pupil.a / w,
        pupil.b / w,
        pupil.theta / pi,
        area(EyeClass::Pupil),
        iris.cx / w,
        iris.cy / h,
        iris.a / w,
        iris.b / w,
        iris.theta / pi,
        (pupil.cx - iris.cx) / w,
        (pupil.cy - iris.cy) / h,
        left.0,
        left.1,
        right.0,
        right.1,
        area(EyeClass::Sclera),
        area(EyeClass::Iris),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_corpus;

    #[test]
    fn pupil_centre_matches_region_centroid() {
        let corpus = generate_synthetic_corpus(2, 3, 200, 320, 9).unwrap();
        for s in &corpus.samples {
            let lm = extract_landmarks(&s.mask).unwrap();
            let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for y in 0..s.mask.height() {
                for x in 0..s.mask.width() {
                    if s.mask.get(y, x) == EyeClass::Pupil.id() {
                        n += 1.0;
                        sx += x as f64;
                        sy += y as f64;
                    }
                }
            }
            assert!((lm.0[0] * 320.0 - sx / n).abs() <= 0.5, "{} vs {}", lm.0[0] * 320.0, sx / n);
            assert!((lm.0[1] * 200.0 - sy / n).abs() <= 0.5);
            assert!(lm.0.iter().all(|v| v.is_finite()));
            assert_eq!(extract_landmarks(&s.mask).unwrap(), lm);
        }
    }

    #[test]
    fn background_mask_is_rejected() {
        let m = SegMask::filled(40, 40, EyeClass::Skin);
        assert!(matches!(extract_landmarks(&m), Err(GazeError::MissingClass(EyeClass::Pupil))));
    }
}
