use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_examples, Example, GruParameters};
use crate::sim::ActivityClass;

/// Per-class and class-averaged accuracy, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub per_class: Vec<f64>,
    pub totals: Vec<usize>,
    pub correct: Vec<usize>,
    /// Unweighted mean of `per_class`.
    pub overall: f64,
}

impl AccuracyTable {
    /// Scores `(predicted, truth)` class indices. Every class must occur in
    /// the truth.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let n = ActivityClass::COUNT;
        let mut totals = vec![0usize; n];
        let mut correct = vec![0usize; n];
        for (pred, truth) in pairs {
            if truth >= n {
                return Err(Error::InvalidLabel {
                    label: truth,
                    classes: n,
                });
            }
            totals[truth] += 1;
            if pred == truth {
                correct[truth] += 1;
            }
        }
        if let Some(c) = totals.iter().position(|&t| t == 0) {
            return Err(Error::invalid(format!(
                "test set has no samples of class {}",
                ActivityClass::ALL[c].name()
            )));
        }
        let per_class: Vec<f64> = correct
            .iter()
            .zip(&totals)
            .map(|(&c, &t)| 100.0 * c as f64 / t as f64)
            .collect();
        let overall = per_class.iter().sum::<f64>() / n as f64;
        Ok(Self {
            per_class,
            totals,
            correct,
            overall,
        })
    }
}

pub fn evaluate<E: Example>(params: &GruParameters, data: &[E]) -> Result<AccuracyTable> {
    if data.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let preds = predict_examples(params, data)?;
    AccuracyTable::from_pairs(
        preds
            .iter()
            .zip(data)
            .map(|(p, e)| (p.class_index, e.label_index())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictor() {
        let t = AccuracyTable::from_pairs((0..80).map(|i| (i % 8, i % 8))).unwrap();
        assert!(t.per_class.iter().all(|&a| a == 100.0));
        assert_eq!(t.overall, 100.0);
    }

    #[test]
    fn uniform_random_predictor_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(usize, usize)> = (0..10_000)
            .map(|i| (rng.random_range(0..8), i % 8))
            .collect();
        let t = AccuracyTable::from_pairs(pairs).unwrap();
        assert!((t.overall - 12.5).abs() < 2.0, "{}", t.overall);
    }

    #[test]
    fn class_average_is_not_sample_weighted() {
        // class 0 has 90 samples all right, others 10 samples all wrong
        let mut pairs: Vec<(usize, usize)> = (0..90).map(|_| (0, 0)).collect();
        for c in 1..8 {
            pairs.extend((0..10).map(|_| ((c + 1) % 8, c)));
        }
        let t = AccuracyTable::from_pairs(pairs).unwrap();
        assert_eq!(t.overall, 12.5);
    }

    #[test]
    fn missing_class_is_an_error() {
        assert!(AccuracyTable::from_pairs((0..70).map(|i| (i % 7, i % 7))).is_err());
    }
}
