//! Limited-memory BFGS over a box, one outer step at a time.

use std::collections::VecDeque;

/// Sufficient-decrease constant for the backtracking search.
const ARMIJO_C1: f64 = 1e-4;
/// Curvature pairs with `s·y` at or below this are dropped.
const CURVATURE_FLOOR: f64 = 1e-10;
/// A gradient with every entry at or below this is treated as stationary.
pub const GRADIENT_TOLERANCE: f64 = 1e-12;

/// A point with its objective value, gradient and caller payload.
#[derive(Debug, Clone)]
pub struct Evaluated<P> {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub payload: P,
}

#[derive(Debug)]
pub enum StepError<E> {
    /// The objective returned a non-finite value at a trial point.
    NonFinite,
    Eval(E),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Moved,
    /// Gradient vanished or no trial point decreased the objective.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct Lbfgs {
    pub history: usize,
    pub step_size: f64,
    pub max_evals: usize,
    pub lower: f64,
    pub upper: f64,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(history: usize, step_size: f64, max_evals: usize) -> Self {
        Self { history, step_size, max_evals: max_evals.max(1), lower: 0.0, upper: 1.0, pairs: VecDeque::new() }
    }

    /// Two-loop recursion: approximate `-H·g`.
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in &mut q {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q
    }

    /// Takes one projected quasi-Newton step from `state`, replacing it only
    /// when a trial point satisfies sufficient decrease.
    pub fn step<P, E>(
        &mut self,
        state: &mut Evaluated<P>,
        eval: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>, P), E>,
    ) -> Result<StepOutcome, StepError<E>> {
        let g = &state.grad;
        let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if g_inf <= GRADIENT_TOLERANCE {
            return Ok(StepOutcome::Stalled);
        }
        let mut d = self.direction(g);
        if dot(g, &d) >= 0.0 {
            self.pairs.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let mut t = if self.pairs.is_empty() {
            let g1: f64 = g.iter().map(|v| v.abs()).sum();
            (1.0f64).min(1.0 / g1) * self.step_size
        } else {
            self.step_size
        };

        for _ in 0..self.max_evals {
            let trial: Vec<f64> =
                state.x.iter().zip(&d).map(|(x, di)| (x + t * di).clamp(self.lower, self.upper)).collect();
            if trial == state.x {
                break;
            }
            let (value, grad, payload) = eval(&trial).map_err(StepError::Eval)?;
            if !value.is_finite() {
                return Err(StepError::NonFinite);
            }
            let moved: Vec<f64> = trial.iter().zip(&state.x).map(|(a, b)| a - b).collect();
            let decrease = dot(&state.grad, &moved);
            if value <= state.value && value <= state.value + ARMIJO_C1 * decrease {
                let y: Vec<f64> = grad.iter().zip(&state.grad).map(|(a, b)| a - b).collect();
                let sy = dot(&moved, &y);
                if sy > CURVATURE_FLOOR {
                    if self.pairs.len() == self.history {
                        self.pairs.pop_front();
                    }
                    self.pairs.push_back((moved, y, 1.0 / sy));
                }
                *state = Evaluated { x: trial, value, grad, payload };
                return Ok(StepOutcome::Moved);
            }
            t *= 0.5;
        }
        self.pairs.clear();
        Ok(StepOutcome::Stalled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>, ()), ()> {
        // minimum at (0.3, 0.7, 0.2) with uneven curvature
        let c = [0.3, 0.7, 0.2];
        let w = [1.0, 10.0, 100.0];
        let v = x.iter().zip(c).zip(w).map(|((x, c), w)| w * (x - c) * (x - c)).sum();
        let g = x.iter().zip(c).zip(w).map(|((x, c), w)| 2.0 * w * (x - c)).collect();
        Ok((v, g, ()))
    }

    fn start(x: Vec<f64>) -> Evaluated<()> {
        let (value, grad, payload) = quadratic(&x).unwrap();
        Evaluated { x, value, grad, payload }
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut opt = Lbfgs::new(100, 1.0, 20);
        let mut s = start(vec![0.9, 0.1, 0.9]);
        let mut last = s.value;
        for _ in 0..50 {
            opt.step(&mut s, &mut quadratic).unwrap();
            assert!(s.value <= last);
            last = s.value;
        }
        assert!(s.value < 1e-10, "{}", s.value);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>, ()), ()> { Ok((-x[0], vec![-1.0], ())) };
        let mut f = f;
        let mut opt = Lbfgs::new(5, 1.0, 20);
        let (value, grad, payload) = f(&[0.5]).unwrap();
        let mut s = Evaluated { x: vec![0.5], value, grad, payload };
        for _ in 0..5 {
            opt.step(&mut s, &mut f).unwrap();
        }
        assert_eq!(s.x, vec![1.0]);
    }

    #[test]
    fn stationary_point_does_not_move() {
        let mut opt = Lbfgs::new(100, 1.0, 20);
        let mut s = start(vec![0.3, 0.7, 0.2]);
        let mut calls = 0;
        let mut f = |x: &[f64]| {
            calls += 1;
            quadratic(x)
        };
        assert_eq!(opt.step(&mut s, &mut f).unwrap(), StepOutcome::Stalled);
        assert_eq!(calls, 0);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut opt = Lbfgs::new(5, 1.0, 20);
        let mut s = start(vec![0.5, 0.5, 0.5]);
        let mut f = |_: &[f64]| -> Result<(f64, Vec<f64>, ()), ()> { Ok((f64::NAN, vec![0.0; 3], ())) };
        assert!(matches!(opt.step(&mut s, &mut f), Err(StepError::NonFinite)));
    }
}
