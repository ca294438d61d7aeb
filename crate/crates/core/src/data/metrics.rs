//! Overall accuracy, average accuracy and Cohen's kappa.

use crate::error::{Error, Result};

/// Accuracy summary of one prediction run. `confusion[t][p]` counts samples
/// of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// Metrics of an existing confusion matrix.
    ///
    /// AA averages recall over the classes that occur in the truth. When the
    /// expected chance agreement is 1 (a single class everywhere), kappa is
    /// undefined and reported as 1.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let c = confusion.len();
        if confusion.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidParameter("confusion matrix must be square".into()));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Empty("compute_metrics"));
        }
        let n = total as f64;
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let oa = correct as f64 / n;

        let row_sums: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let present: Vec<usize> = (0..c).filter(|&i| row_sums[i] > 0).collect();
        let aa = present
            .iter()
            .map(|&i| confusion[i][i] as f64 / row_sums[i] as f64)
            .sum::<f64>()
            / present.len() as f64;

        let pe = (0..c)
            .map(|i| (row_sums[i] as f64 / n) * (col_sums[i] as f64 / n))
            .sum::<f64>();
        let kappa = if pe >= 1.0 { 1.0 } else { (oa - pe) / (1.0 - pe) };
        Ok(Self {
            oa,
            aa,
            kappa,
            confusion,
        })
    }
}

/// Compares zero-based predictions against the truth over `class_count`
/// classes.
pub fn compute_metrics(predicted: &[usize], truth: &[usize], class_count: usize) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            op: "compute_metrics",
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("compute_metrics"));
    }
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    for (&p, &t) in predicted.iter().zip(truth) {
        for class in [p, t] {
            if class >= class_count {
                return Err(Error::ClassOutOfRange { class, class_count });
            }
        }
        confusion[t][p] += 1;
    }
    Metrics::from_confusion(confusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let y = [0, 1, 2, 2, 1];
        let m = compute_metrics(&y, &y, 3).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_kappa_convention() {
        let m = compute_metrics(&[1, 1, 1], &[1, 1, 1], 3).unwrap();
        assert_eq!(m.kappa, 1.0);
        assert_eq!(m.aa, 1.0);
    }

    #[test]
    fn hand_example() {
        // truth 0 0 0 1 ; pred 0 0 1 1
        let m = compute_metrics(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(m.confusion, vec![vec![2, 1], vec![0, 1]]);
        assert!((m.oa - 0.75).abs() < 1e-15);
        assert!((m.aa - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        // pe = 3/4*2/4 + 1/4*2/4 = 1/2 → kappa = (3/4 - 1/2) / (1/2)
        assert!((m.kappa - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_metrics(&[], &[], 2), Err(Error::Empty(_))));
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(matches!(
            compute_metrics(&[3], &[0], 2),
            Err(Error::ClassOutOfRange {
                class: 3,
                class_count: 2
            })
        ));
    }

    proptest! {
        #[test]
        fn matches_per_sample_oracle(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..200)
        ) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = compute_metrics(&pred, &truth, 3).unwrap();
            let n = pred.len() as f64;
            let po = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / n;
            let mut pe = 0.0;
            let mut recalls = Vec::new();
            for c in 0..3 {
                let t = truth.iter().filter(|&&x| x == c).count() as f64;
                let p = pred.iter().filter(|&&x| x == c).count() as f64;
                pe += t * p / (n * n);
                if t > 0.0 {
                    let hit = pred.iter().zip(&truth).filter(|(a, b)| **a == c && **b == c).count();
                    recalls.push(hit as f64 / t);
                }
            }
            let kappa = if pe >= 1.0 { 1.0 } else { (po - pe) / (1.0 - pe) };
            let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
            prop_assert!((m.oa - po).abs() <= 1e-12);
            prop_assert!((m.aa - aa).abs() <= 1e-12);
            prop_assert!((m.kappa - kappa).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&m.kappa));
        }
    }
}
