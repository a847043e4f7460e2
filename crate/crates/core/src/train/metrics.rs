use serde::{Deserialize, Serialize};

/// Classification metrics. `confusion[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// Undefined precision or recall (no predictions of, or no samples in, a
    /// class) counts as 0, so such a class scores F1 = 0.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };

        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let mut precision = Vec::with_capacity(num_classes);
        let mut recall = Vec::with_capacity(num_classes);
        let mut f1 = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let tp = confusion[c][c];
            let predicted_c: usize = (0..num_classes).map(|t| confusion[t][c]).sum();
            let actual_c: usize = confusion[c].iter().sum();
            let p = ratio(tp, predicted_c);
            let r = ratio(tp, actual_c);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        }
        let macro_f1 = if num_classes == 0 { 0.0 } else { f1.iter().sum::<f64>() / num_classes as f64 };
        Self { accuracy, macro_f1, precision, recall, f1, confusion }
    }
}
