//! Evaluation: confusion-matrix metrics, stratified k-fold splitting, the
//! cross-validation protocol, and the lambda/loss-variant ablation runner.

mod cv;
mod kfold;

pub use cv::{
    run_ablation, run_cv, run_cv_with_folds, AblationResult, AggregateMetrics, CvOptions,
    CvOutcome, FoldDetail, MeanStd,
};
pub use kfold::{kfold_indices, kfold_split};

use serde::Serialize;

use crate::error::{Error, Result};

/// C x C counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
        if preds.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} predictions vs {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &t) in preds.iter().zip(labels) {
            if p >= num_classes || t >= num_classes {
                return Err(Error::contract(format!(
                    "class index out of range: pred {p}, label {t}, C={num_classes}"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_counts(counts: Vec<Vec<usize>>) -> Result<ConfusionMatrix> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|row| row.len() != c) {
            return Err(Error::contract("confusion matrix must be square".to_string()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> usize {
        self.counts[true_class][pred_class]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// trace / total
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::contract("accuracy of an empty matrix".to_string()));
        }
        let trace: usize = (0..self.num_classes()).map(|i| self.counts[i][i]).sum();
        Ok(trace as f64 / total as f64)
    }

    /// One-vs-rest recall per class. Every class needs at least one true
    /// instance.
    pub fn per_class_recall(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_classes());
        for c in 0..self.num_classes() {
            let row: usize = self.counts[c].iter().sum();
            if row == 0 {
                return Err(Error::contract(format!(
                    "class {c} has no true instances; stratify folds"
                )));
            }
            out.push(self.counts[c][c] as f64 / row as f64);
        }
        Ok(out)
    }

    /// One-vs-rest specificity per class: TN / (TN + FP).
    pub fn per_class_specificity(&self) -> Result<Vec<f64>> {
        let total = self.total();
        let mut out = Vec::with_capacity(self.num_classes());
        for c in 0..self.num_classes() {
            let row: usize = self.counts[c].iter().sum();
            let col: usize = (0..self.num_classes()).map(|t| self.counts[t][c]).sum();
            let tp = self.counts[c][c];
            let fp = col - tp;
            let negatives = total - row;
            if negatives == 0 {
                return Err(Error::contract(format!(
                    "class {c} has no true negatives"
                )));
            }
            let tn = negatives - fp;
            out.push(tn as f64 / negatives as f64);
        }
        Ok(out)
    }

    /// Mean one-vs-rest recall over classes.
    pub fn macro_sensitivity(&self) -> Result<f64> {
        let recalls = self.per_class_recall()?;
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// Mean one-vs-rest specificity over classes.
    pub fn macro_specificity(&self) -> Result<f64> {
        let specs = self.per_class_specificity()?;
        Ok(specs.iter().sum::<f64>() / specs.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub recall: f64,
    pub specificity: f64,
}

/// Instance-level metrics for one evaluation (one fold).
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub fold_id: usize,
    pub accuracy: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn from_confusion(fold_id: usize, cm: &ConfusionMatrix) -> Result<MetricsReport> {
        let recalls = cm.per_class_recall()?;
        let specs = cm.per_class_specificity()?;
        Ok(MetricsReport {
            fold_id,
            accuracy: cm.accuracy()?,
            macro_sensitivity: recalls.iter().sum::<f64>() / recalls.len() as f64,
            macro_specificity: specs.iter().sum::<f64>() / specs.len() as f64,
            per_class: recalls
                .into_iter()
                .zip(specs)
                .map(|(recall, specificity)| ClassMetrics { recall, specificity })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 2, 2], 3)
            .unwrap();
        assert_eq!(cm.accuracy().unwrap(), 1.0);
        assert_eq!(cm.macro_sensitivity().unwrap(), 1.0);
        assert_eq!(cm.macro_specificity().unwrap(), 1.0);
    }

    #[test]
    fn all_majority_collapse_signature() {
        // fixed single-class predictor on a 3-class task: exactly 1/3 and 2/3
        let labels = [0, 0, 1, 1, 1, 1, 2, 2, 2];
        let preds = vec![1; labels.len()];
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, 3).unwrap();
        assert_eq!(cm.macro_sensitivity().unwrap(), 1.0 / 3.0);
        assert_eq!(cm.macro_specificity().unwrap(), 2.0 / 3.0);
        // single nonzero column
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(t, p) > 0, p == 1 && [2, 4, 3][t] > 0);
            }
        }
    }

    #[test]
    fn majority_fraction_accuracy() {
        // 57 instances, 35 in the majority class, predictor collapsed on it
        let mut labels = vec![1usize; 35];
        labels.extend(vec![0usize; 13]);
        labels.extend(vec![2usize; 9]);
        let preds = vec![1usize; 57];
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, 3).unwrap();
        let acc = cm.accuracy().unwrap();
        assert_eq!(acc, 35.0 / 57.0);
        assert!((acc - 0.6140).abs() < 1e-3);
    }

    #[test]
    fn hand_built_matrix_values() {
        let cm = ConfusionMatrix::from_counts(vec![
            vec![2, 1, 0],
            vec![0, 3, 0],
            vec![1, 0, 1],
        ])
        .unwrap();
        let sens = cm.macro_sensitivity().unwrap();
        assert!((sens - (2.0 / 3.0 + 1.0 + 0.5) / 3.0).abs() < 1e-15);
        // specificity per class by hand: total 8
        // class 0: neg 5, fp 1 -> 4/5; class 1: neg 5, fp 1 -> 4/5;
        // class 2: neg 6, fp 0 -> 1
        let spec = cm.macro_specificity().unwrap();
        assert!((spec - (0.8 + 0.8 + 1.0) / 3.0).abs() < 1e-15);
    }

    /// Brute-force per-sample metrics, sharing nothing with the matrix path.
    fn brute_force(preds: &[usize], labels: &[usize], c: usize) -> (f64, f64, f64) {
        let n = preds.len() as f64;
        let correct = preds.iter().zip(labels).filter(|(p, t)| p == t).count() as f64;
        let mut sens = 0.0;
        let mut spec = 0.0;
        for class in 0..c {
            let tp = preds
                .iter()
                .zip(labels)
                .filter(|&(&p, &t)| t == class && p == class)
                .count() as f64;
            let fn_ = preds
                .iter()
                .zip(labels)
                .filter(|&(&p, &t)| t == class && p != class)
                .count() as f64;
            let tn = preds
                .iter()
                .zip(labels)
                .filter(|&(&p, &t)| t != class && p != class)
                .count() as f64;
            let fp = preds
                .iter()
                .zip(labels)
                .filter(|&(&p, &t)| t != class && p == class)
                .count() as f64;
            sens += tp / (tp + fn_);
            spec += tn / (tn + fp);
        }
        (correct / n, sens / c as f64, spec / c as f64)
    }

    #[test]
    fn matrix_metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let c = [2, 3, 5][rng.random_range(0..3)];
            let n = rng.random_range(c..60);
            // guarantee every class appears as a label at least once
            let mut labels: Vec<usize> = (0..c).collect();
            labels.extend((c..n).map(|_| rng.random_range(0..c)));
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let cm = ConfusionMatrix::from_predictions(&preds, &labels, c).unwrap();
            let (acc, sens, spec) = brute_force(&preds, &labels, c);
            assert_eq!(cm.accuracy().unwrap(), acc);
            assert_eq!(cm.macro_sensitivity().unwrap(), sens);
            assert_eq!(cm.macro_specificity().unwrap(), spec);
        }
    }

    #[test]
    fn uniform_random_accuracy_near_one_over_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 3;
        let n = 100_000;
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, c).unwrap();
        assert!((cm.accuracy().unwrap() - 1.0 / c as f64).abs() < 0.02);
    }

    #[test]
    fn degenerate_matrices_are_contract_errors() {
        let cm = ConfusionMatrix::from_counts(vec![vec![0, 0], vec![1, 1]]).unwrap();
        assert!(cm.per_class_recall().is_err());
        let all_one_class = ConfusionMatrix::from_counts(vec![vec![4, 0], vec![0, 0]]).unwrap();
        assert!(all_one_class.macro_specificity().is_err());
        let empty = ConfusionMatrix::from_counts(vec![vec![0, 0], vec![0, 0]]).unwrap();
        assert!(empty.accuracy().is_err());
    }

    #[test]
    fn out_of_range_indices_rejected() {
        assert!(ConfusionMatrix::from_predictions(&[3], &[0], 3).is_err());
        assert!(ConfusionMatrix::from_predictions(&[0], &[5], 3).is_err());
        assert!(ConfusionMatrix::from_predictions(&[0, 1], &[0], 3).is_err());
    }
}
