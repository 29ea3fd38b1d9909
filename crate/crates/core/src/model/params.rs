use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the recurrent classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 52,
            hidden_dim: 32,
            layers: 3,
            classes: crate::sim::ActivityClass::COUNT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::invalid(format!(
                "model config {self:?} has a zero dimension"
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if self.layers > u8::MAX as usize {
            return Err(Error::invalid("too many layers"));
        }
        Ok(())
    }
}

/// Gate weights of one GRU layer. `w_*` are `hidden x input`, `u_*` are
/// `hidden x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams {
    pub w_z: Array2<f64>,
    pub u_z: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_h: Array2<f64>,
    pub u_h: Array2<f64>,
    pub b_h: Array1<f64>,
}

impl GruLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Array2::zeros((hidden_dim, input_dim));
        let u = || Array2::zeros((hidden_dim, hidden_dim));
        let b = || Array1::zeros(hidden_dim);
        Self {
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    fn random(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(input_dim, hidden_dim);
        let k = 1.0 / (hidden_dim as f64).sqrt();
        for m in [
            &mut layer.w_z,
            &mut layer.u_z,
            &mut layer.w_r,
            &mut layer.u_r,
            &mut layer.w_h,
            &mut layer.u_h,
        ] {
            m.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden_dim(), self.input_dim());
        let ok = [&self.w_r, &self.w_h].iter().all(|m| m.dim() == (h, d))
            && [&self.u_z, &self.u_r, &self.u_h]
                .iter()
                .all(|m| m.dim() == (h, h))
            && [&self.b_z, &self.b_r, &self.b_h]
                .iter()
                .all(|b| b.len() == h);
        if !ok {
            return Err(Error::shape(format!(
                "inconsistent GRU layer shapes for hidden {h}, input {d}"
            )));
        }
        Ok(())
    }

    /// Tensors in checkpoint order: W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h.
    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            self.w_z.as_slice().expect("standard layout"),
            self.u_z.as_slice().expect("standard layout"),
            self.b_z.as_slice().expect("standard layout"),
            self.w_r.as_slice().expect("standard layout"),
            self.u_r.as_slice().expect("standard layout"),
            self.b_r.as_slice().expect("standard layout"),
            self.w_h.as_slice().expect("standard layout"),
            self.u_h.as_slice().expect("standard layout"),
            self.b_h.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_z.as_slice_mut().expect("standard layout"),
            self.u_z.as_slice_mut().expect("standard layout"),
            self.b_z.as_slice_mut().expect("standard layout"),
            self.w_r.as_slice_mut().expect("standard layout"),
            self.u_r.as_slice_mut().expect("standard layout"),
            self.b_r.as_slice_mut().expect("standard layout"),
            self.w_h.as_slice_mut().expect("standard layout"),
            self.u_h.as_slice_mut().expect("standard layout"),
            self.b_h.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Stacked GRU layers plus the softmax output head.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParameters {
    pub layers: Vec<GruLayerParams>,
    /// `classes x hidden`
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl GruParameters {
    /// Seeded initialization: every matrix uniform in `(-1/sqrt(H), 1/sqrt(H))`,
    /// biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers);
        let mut input = config.input_dim;
        for _ in 0..config.layers {
            layers.push(GruLayerParams::random(input, config.hidden_dim, &mut rng));
            input = config.hidden_dim;
        }
        let k = 1.0 / (config.hidden_dim as f64).sqrt();
        let w_o = Array2::from_shape_fn((config.classes, config.hidden_dim), |_| {
            rng.random_range(-k..k)
        });
        Ok(Self {
            layers,
            w_o,
            b_o: Array1::zeros(config.classes),
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut input = config.input_dim;
        let layers = (0..config.layers)
            .map(|_| {
                let l = GruLayerParams::zeros(input, config.hidden_dim);
                input = config.hidden_dim;
                l
            })
            .collect();
        Ok(Self {
            layers,
            w_o: Array2::zeros((config.classes, config.hidden_dim)),
            b_o: Array1::zeros(config.classes),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        out
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(GruLayerParams::hidden_dim).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn config(&self) -> Option<ModelConfig> {
        let hidden = self.layers[0].hidden_dim();
        self.layers
            .iter()
            .all(|l| l.hidden_dim() == hidden)
            .then(|| ModelConfig {
                input_dim: self.input_dim(),
                hidden_dim: hidden,
                layers: self.layers.len(),
                classes: self.num_classes(),
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model needs at least one GRU layer"));
        }
        let mut input = self.layers[0].input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.input_dim() != input {
                return Err(Error::shape(format!(
                    "layer {i} expects input {}, previous layer emits {input}",
                    layer.input_dim()
                )));
            }
            input = layer.hidden_dim();
        }
        if self.w_o.ncols() != input || self.b_o.len() != self.w_o.nrows() {
            return Err(Error::shape(
                "output head does not match the last hidden layer",
            ));
        }
        if self.num_classes() < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if self
            .tensors()
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(())
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.push(self.w_o.as_slice().expect("standard layout"));
        out.push(self.b_o.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect();
        out.push(self.w_o.as_slice_mut().expect("standard layout"));
        out.push(self.b_o.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// L2 norm over every parameter.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_bounds() {
        let cfg = ModelConfig::default();
        let p = GruParameters::init(&cfg, 1).unwrap();
        p.validate().unwrap();
        assert_eq!(p.layers.len(), 3);
        assert_eq!(p.input_dim(), 52);
        assert_eq!(p.hidden_dims(), vec![32, 32, 32]);
        assert_eq!(p.num_classes(), 8);
        let k = 1.0 / 32f64.sqrt();
        assert!(p.layers[1].u_h.iter().all(|v| v.abs() < k));
        assert!(p.layers[0].b_z.iter().all(|&v| v == 0.0));
        assert_eq!(p.config(), Some(cfg));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(
            GruParameters::init(&cfg, 3).unwrap(),
            GruParameters::init(&cfg, 3).unwrap()
        );
        assert_ne!(
            GruParameters::init(&cfg, 3).unwrap(),
            GruParameters::init(&cfg, 4).unwrap()
        );
    }

    #[test]
    fn flat_round_trip() {
        let p = GruParameters::init(
            &ModelConfig {
                input_dim: 3,
                hidden_dim: 4,
                layers: 2,
                classes: 3,
            },
            2,
        )
        .unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.num_params());
        let mut q = p.zeros_like();
        q.copy_from_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.copy_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn validate_catches_layer_mismatch() {
        let mut p = GruParameters::init(
            &ModelConfig {
                input_dim: 3,
                hidden_dim: 4,
                layers: 2,
                classes: 3,
            },
            2,
        )
        .unwrap();
        p.layers[1] = GruLayerParams::zeros(5, 4);
        assert!(p.validate().is_err());
    }
}
