use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::MlpParams;

/// Confusion matrix (rows = true class, columns = predicted) with per-class
/// recall and their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub mean_class_accuracy: f64,
}

impl EvalResult {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Validation(format!(
                    "class index {} out of range for {k} classes",
                    t.max(p)
                )));
            }
            confusion[t][p] += 1;
        }
        // classes absent from the evaluation set are left out of the mean
        let mut per_class_accuracy = Vec::with_capacity(k);
        let mut present = 0usize;
        let mut sum = 0.0;
        for (c, row) in confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            let acc = if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            };
            if n > 0 {
                present += 1;
                sum += acc;
            }
            per_class_accuracy.push(acc);
        }
        let mean_class_accuracy = if present == 0 {
            0.0
        } else {
            sum / present as f64
        };
        Ok(Self {
            confusion,
            per_class_accuracy,
            mean_class_accuracy,
        })
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let correct: usize = (0..self.confusion.len())
            .map(|c| self.confusion[c][c])
            .sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Arg-max predictions of `params` on a labeled set (ties to the lowest index).
pub fn evaluate(params: &MlpParams, set: &LabeledSet) -> Result<EvalResult> {
    let k = params.n_classes();
    if set.n_classes() > k {
        return Err(Error::Validation(format!(
            "evaluation set has {} classes, model has {k}",
            set.n_classes()
        )));
    }
    let predicted = set
        .features()
        .iter_rows()
        .map(|x| params.predict(x))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_predictions(set.labels(), &predicted, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::numerics::Matrix;

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = [0, 1, 2, 0, 1, 2];
        let r = EvalResult::from_predictions(&truth, &truth, 3).unwrap();
        assert_eq!(r.mean_class_accuracy, 1.0);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 2 } else { 0 });
            }
        }
        let r = EvalResult::from_predictions(&truth, &[0; 6], 3).unwrap();
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.mean_class_accuracy, 1.0 / 3.0);
    }

    #[test]
    fn hand_tallied_confusion() {
        // truth:     0 0 0 0 1 1 1 2 2 2 2 2
        // predicted: 0 1 0 2 1 1 0 2 2 1 2 2
        let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2];
        let pred = [0, 1, 0, 2, 1, 1, 0, 2, 2, 1, 2, 2];
        let r = EvalResult::from_predictions(&truth, &pred, 3).unwrap();
        assert_eq!(
            r.confusion,
            vec![vec![2, 1, 1], vec![1, 2, 0], vec![0, 1, 4]]
        );
        assert_eq!(r.per_class_accuracy, vec![0.5, 2.0 / 3.0, 0.8]);
        assert!((r.mean_class_accuracy - (0.5 + 2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-15);
        for (row, n) in r.confusion.iter().zip([4, 3, 5]) {
            assert_eq!(row.iter().sum::<usize>(), n);
        }
        assert!(EvalResult::from_predictions(&[3], &[0], 3).is_err());
    }

    #[test]
    fn zero_network_is_chance_on_balanced_data() {
        let params = MlpParams::zeros(&[2, 4, 2]).unwrap();
        let x = Matrix::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![2.0, 2.0],
            vec![3.0, 1.0],
        ])
        .unwrap();
        let set = LabeledSet::new(x, vec![0, 1, 0, 1], 2, Domain::TargetEval).unwrap();
        let before = params.clone();
        let r = evaluate(&params, &set).unwrap();
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.0]);
        assert_eq!(r.mean_class_accuracy, 0.5);
        assert_eq!(params, before);
    }
}
