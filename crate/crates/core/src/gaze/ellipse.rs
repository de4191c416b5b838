//! Direct least-squares ellipse fitting (numerically stable variant that
//! splits the scatter matrix into quadratic and linear blocks).

use nalgebra::{Matrix3, Vector3};

use super::GazeError;

/// Ellipse with `a ≥ b > 0` and `theta ∈ [0, π)` measured from the x axis
/// to the major axis (image coordinates, y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }

    pub fn point_at(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (x, y) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + x * c - y * s, self.cy + x * s + y * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub ellipse: Ellipse,
    /// Root mean square Sampson distance of the points to the conic.
    pub residual: f64,
}

pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<EllipseFit, GazeError> {
    if points.len() < 5 {
        return Err(GazeError::TooFewPoints(points.len()));
    }
    // Centre and scale the points so the scatter matrices are well conditioned.
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let spread = (points.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n).sqrt();
    if !(spread > 0.0) {
        return Err(GazeError::DegenerateFit);
    }
    let norm: Vec<(f64, f64)> = points.iter().map(|p| ((p.0 - mx) / spread, (p.1 - my) / spread)).collect();

    let (mut s1, mut s2, mut s3) = (Matrix3::<f64>::zeros(), Matrix3::<f64>::zeros(), Matrix3::<f64>::zeros());
    for &(x, y) in &norm {
        let q = Vector3::new(x * x, x * y, y * y);
        let l = Vector3::new(x, y, 1.0);
        s1 += q * q.transpose();
        s2 += q * l.transpose();
        s3 += l * l.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or(GazeError::DegenerateFit)?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the constraint matrix 4ac - b² = 1.
    let reduced = Matrix3::new(m[(2, 0)] / 2.0, m[(2, 1)] / 2.0, m[(2, 2)] / 2.0, -m[(1, 0)], -m[(1, 1)], -m[(1, 2)], m[(0, 0)] / 2.0, m[(0, 1)] / 2.0, m[(0, 2)] / 2.0);

    let mut best: Option<Vector3<f64>> = None;
    for lambda in reduced.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let Some(v) = null_vector(&(reduced - Matrix3::identity() * lambda.re)) else { continue };
        if 4.0 * v[0] * v[2] - v[1] * v[1] > 0.0 {
            best = Some(v);
            break;
        }
    }
    let quad = best.ok_or(GazeError::DegenerateFit)?;
    let lin = t * quad;
    let conic = [quad[0], quad[1], quad[2], lin[0], lin[1], lin[2]];

    let ellipse = conic_to_ellipse(&conic).ok_or(GazeError::DegenerateFit)?;
    let ellipse = Ellipse { cx: ellipse.cx * spread + mx, cy: ellipse.cy * spread + my, a: ellipse.a * spread, b: ellipse.b * spread, ..ellipse };
    let residual = (norm.iter().map(|&(x, y)| sampson(&conic, x, y).powi(2)).sum::<f64>() / n).sqrt() * spread;
    if ![ellipse.cx, ellipse.cy, ellipse.a, ellipse.b, ellipse.theta, residual].iter().all(|v| v.is_finite()) {
        return Err(GazeError::DegenerateFit);
    }
    Ok(EllipseFit { ellipse, residual })
}

/// A unit vector spanning the (numerical) null space of a rank-2 matrix.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
    let v = candidates.into_iter().max_by(|a, b| a.norm().total_cmp(&b.norm()))?;
    let len = v.norm();
    (len > 1e-300).then(|| v / len)
}

fn sampson(c: &[f64; 6], x: f64, y: f64) -> f64 {
    let f = c[0] * x * x + c[1] * x * y + c[2] * y * y + c[3] * x + c[4] * y + c[5];
    let gx = 2.0 * c[0] * x + c[1] * y + c[3];
    let gy = c[1] * x + 2.0 * c[2] * y + c[4];
    let g = (gx * gx + gy * gy).sqrt();
    if g > 0.0 {
        f / g
    } else {
        f
    }
}

/// Geometric parameters of `A x² + B xy + C y² + D x + E y + F = 0`.
fn conic_to_ellipse(c: &[f64; 6]) -> Option<Ellipse> {
    let [a, b, cc, d, e, f] = *c;
    let det = 4.0 * a * cc - b * b;
    if det <= 0.0 {
        return None;
    }
    let cx = (b * e - 2.0 * cc * d) / det;
    let cy = (b * d - 2.0 * a * e) / det;
    let fc = a * cx * cx + b * cx * cy + cc * cy * cy + d * cx + e * cy + f;
    // Eigen-decomposition of the quadratic form [[a, b/2], [b/2, c]].
    let mean = (a + cc) / 2.0;
    let diff = ((a - cc) / 2.0).hypot(b / 2.0);
    let (l_small, l_large) = (mean - diff, mean + diff);
    let (r_major, r_minor) = (-fc / l_small, -fc / l_large);
    if !(r_major > 0.0 && r_minor > 0.0) {
        return None;
    }
    // The major axis follows the eigenvector of the smaller eigenvalue.
    let mut theta = 0.5 * b.atan2(a - cc) + std::f64::consts::FRAC_PI_2;
    theta = theta.rem_euclid(std::f64::consts::PI);
    if diff == 0.0 {
        theta = 0.0;
    }
    Some(Ellipse { cx, cy, a: r_major.sqrt(), b: r_minor.sqrt(), theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(e: &Ellipse, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| e.point_at(i as f64 * std::f64::consts::TAU / n as f64)).collect()
    }

    #[test]
    fn circle() {
        let c = Ellipse { cx: 50.0, cy: 40.0, a: 10.0, b: 10.0, theta: 0.0 };
        let fit = fit_ellipse(&sample(&c, 100)).unwrap().ellipse;
        assert!((fit.cx - 50.0).abs() < 0.1 && (fit.cy - 40.0).abs() < 0.1);
        assert!((fit.a - 10.0).abs() < 0.1 && (fit.b - 10.0).abs() < 0.1);
    }

    #[test]
    fn axis_aligned_ellipse_at_one_degree_steps() {
        let e = Ellipse { cx: 0.0, cy: 0.0, a: 20.0, b: 10.0, theta: 0.0 };
        let fit = fit_ellipse(&sample(&e, 360)).unwrap();
        let f = fit.ellipse;
        assert!(f.theta.min(std::f64::consts::PI - f.theta) < 1e-6, "{}", f.theta);
        assert!((f.a - 20.0).abs() < 0.1 && (f.b - 10.0).abs() < 0.1);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn too_few_or_degenerate() {
        assert!(matches!(fit_ellipse(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]), Err(GazeError::TooFewPoints(4))));
        let line: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(fit_ellipse(&line), Err(GazeError::DegenerateFit)));
        assert!(fit_ellipse(&[(1.0, 1.0); 8]).is_err());
    }

    proptest! {
        #[test]
        fn recovers_generating_ellipse(
            cx in -100.0..100.0f64, cy in -100.0..100.0f64,
            b in 2.0..40.0f64, ratio in 1.05..3.0f64,
            theta in 0.0..3.1f64, n in 36usize..200,
        ) {
            let e = Ellipse { cx, cy, a: b * ratio, b, theta };
            let f = fit_ellipse(&sample(&e, n)).unwrap().ellipse;
            let tol = |v: f64| 0.01 * v.abs().max(1.0);
            prop_assert!((f.cx - cx).abs() <= tol(cx) && (f.cy - cy).abs() <= tol(cy));
            prop_assert!((f.a - e.a).abs() <= tol(e.a) && (f.b - b).abs() <= tol(b));
            let dt = (f.theta - theta).abs();
            prop_assert!(dt.min(std::f64::consts::PI - dt) <= 0.01 * theta.max(1.0), "{} vs {}", f.theta, theta);
        }
    }
}
