use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gru::{forward_batch, predict_batch, Prediction};
use super::params::GruParameters;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, clip_global_norm, AdamHyper, AdamState, RealMatrix};

/// Anything that can be fed to the trainer: a `T x D` window and a class.
pub trait Example {
    fn window(&self) -> &RealMatrix;
    fn label_index(&self) -> usize;
}

/// Plain window/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub window: RealMatrix,
    pub label: usize,
}

impl Example for WindowSample {
    fn window(&self) -> &RealMatrix {
        &self.window
    }

    fn label_index(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamHyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Settings used for on-device adaptation.
    pub fn adaptation(seed: u64) -> Self {
        Self {
            adam: AdamHyper::with_learning_rate(1e-4),
            epochs: 50,
            batch_size: 32,
            seed,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamHyper::with_learning_rate(3e-3),
            epochs: 20,
            batch_size: 32,
            seed: 0,
            clip_norm: None,
        }
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: GruParameters,
    /// Mean training loss of every epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch Adam on the final-step cross-entropy. The input parameters
/// are left untouched.
pub fn fine_tune<E: Example>(
    params: &GruParameters,
    data: &[E],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let classes = params.num_classes();
    if let Some(e) = data.iter().find(|e| e.label_index() >= classes) {
        return Err(Error::InvalidLabel {
            label: e.label_index(),
            classes,
        });
    }

    let mut model = params.clone();
    let mut flat = model.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let views: Vec<ArrayView2<'_, f64>> =
                chunk.iter().map(|&i| data[i].window().view()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label_index()).collect();
            let (grads, loss) = forward_batch(&model, &views)?.backward(&model, &labels)?;
            epoch_loss += loss * chunk.len() as f64;
            let mut g = grads.to_flat();
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut g, max);
            }
            adam_step(&mut flat, &g, &mut state, &config.adam)?;
            model.copy_from_flat(&flat)?;
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                index: loss_history.len(),
                value: mean,
            });
        }
        loss_history.push(mean);
    }
    Ok(TrainReport {
        params: model,
        loss_history,
    })
}

/// Predictions for a labelled set, in order.
pub fn predict_examples<E: Example>(params: &GruParameters, data: &[E]) -> Result<Vec<Prediction>> {
    let windows: Vec<&RealMatrix> = data.iter().map(Example::window).collect();
    predict_batch(params, &windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn toy_set(n: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let level = if label == 0 { 0.2 } else { 0.8 };
                let data = (0..6 * 3)
                    .map(|_| level + rng.random_range(-0.1..0.1))
                    .collect();
                WindowSample {
                    window: RealMatrix::new(6, 3, data).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn tiny() -> GruParameters {
        GruParameters::init(
            &ModelConfig {
                input_dim: 3,
                hidden_dim: 6,
                layers: 2,
                classes: 2,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn learns_separable_toy_problem() {
        let data = toy_set(64, 2);
        let cfg = TrainConfig {
            adam: AdamHyper::with_learning_rate(1e-2),
            epochs: 40,
            batch_size: 16,
            seed: 3,
            clip_norm: None,
        };
        let report = fine_tune(&tiny(), &data, &cfg).unwrap();
        assert_eq!(report.loss_history.len(), 40);
        assert!(report.loss_history[39] < 0.5 * report.loss_history[0]);
        let preds = predict_examples(&report.params, &data).unwrap();
        let correct = preds
            .iter()
            .zip(&data)
            .filter(|(p, d)| p.class_index == d.label)
            .count();
        assert!(correct >= 60);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_set(20, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 7,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = fine_tune(&tiny(), &data, &cfg).unwrap();
        let b = fine_tune(&tiny(), &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = tiny();
        assert!(fine_tune::<WindowSample>(&p, &[], &TrainConfig::default()).is_err());
        let mut data = toy_set(4, 1);
        data[0].label = 5;
        assert!(fine_tune(&p, &data, &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(fine_tune(&p, &toy_set(4, 1), &cfg).is_err());
    }

    #[test]
    fn clipping_keeps_training_finite() {
        let data = toy_set(16, 6);
        let cfg = TrainConfig {
            adam: AdamHyper::with_learning_rate(0.5),
            epochs: 5,
            batch_size: 4,
            seed: 1,
            clip_norm: Some(5.0),
        };
        let r = fine_tune(&tiny(), &data, &cfg).unwrap();
        assert!(r.params.to_flat().iter().all(|v| v.is_finite()));
    }
}
