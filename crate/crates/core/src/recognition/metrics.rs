/// Counts indexed by `(true class, predicted class)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(predicted: &[usize], truth: &[usize], classes: usize) -> Self {
        let mut counts = vec![0; classes * classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            counts[t * classes + p] += 1;
        }
        Self { classes, counts }
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        Self { classes: rows.len(), counts: rows.concat() }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn true_counts(&self) -> Vec<usize> {
        (0..self.classes).map(|t| (0..self.classes).map(|p| self.get(t, p)).sum()).collect()
    }

    fn predicted_counts(&self) -> Vec<usize> {
        (0..self.classes).map(|p| (0..self.classes).map(|t| self.get(t, p)).sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        (0..self.classes).map(|k| self.get(k, k)).sum::<usize>() as f64 / n as f64
    }

    /// Unweighted mean F1 over classes that occur in the truth or the predictions.
    pub fn macro_f1(&self) -> f64 {
        let (t, p) = (self.true_counts(), self.predicted_counts());
        let scores: Vec<f64> = (0..self.classes)
            .filter(|&k| t[k] + p[k] > 0)
            .map(|k| 2.0 * self.get(k, k) as f64 / (t[k] + p[k]) as f64)
            .collect();
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }

    /// Multiclass Matthews correlation; 0 when undefined.
    pub fn mcc(&self) -> f64 {
        let (t, p) = (self.true_counts(), self.predicted_counts());
        let s = self.total() as f64;
        let c = (0..self.classes).map(|k| self.get(k, k)).sum::<usize>() as f64;
        let tp: f64 = t.iter().zip(&p).map(|(a, b)| (*a * *b) as f64).sum();
        let pp: f64 = p.iter().map(|v| (*v * *v) as f64).sum();
        let tt: f64 = t.iter().map(|v| (*v * *v) as f64).sum();
        let den = (s * s - pp).sqrt() * (s * s - tt).sqrt();
        if den == 0.0 {
            0.0
        } else {
            (c * s - tp) / den
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognitionMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
}

impl From<&ConfusionMatrix> for RecognitionMetrics {
    fn from(m: &ConfusionMatrix) -> Self {
        Self { accuracy: m.accuracy(), macro_f1: m.macro_f1(), mcc: m.mcc() }
    }
}

pub fn metrics_from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> RecognitionMetrics {
    (&ConfusionMatrix::new(predicted, truth, classes)).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = metrics_from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        assert!((m.mcc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_class_case() {
        let m = ConfusionMatrix::from_rows(&[vec![2, 0, 0], vec![0, 1, 1], vec![0, 0, 2]]);
        assert!((m.accuracy() - 5.0 / 6.0).abs() < 1e-12);
        // per-class F1: 1, 2/3, 4/5
        assert!((m.macro_f1() - (1.0 + 2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-12);
        // c = 5, s = 6, t = (2,2,2), p = (2,1,3): (30 - 12) / sqrt((36 - 14) * (36 - 12))
        assert!((m.mcc() - 18.0 / 528f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_skips_classes_never_seen() {
        // class 2 appears neither in truth nor predictions
        let m = metrics_from_predictions(&[0, 1], &[0, 1], 3);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn balanced_chance_has_zero_mcc() {
        let m = metrics_from_predictions(&[0, 1, 0, 1], &[0, 0, 1, 1], 2);
        assert_eq!(m.mcc, 0.0);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn constant_prediction_mcc_is_zero() {
        assert_eq!(metrics_from_predictions(&[0, 0, 0], &[0, 1, 1], 2).mcc, 0.0);
    }
}
