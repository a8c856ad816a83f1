//! ReLU multilayer perceptrons over a flat parameter vector.
//!
//! Layer `l` maps width `w_{l-1}` to `w_l` with a weight block of shape
//! `w_l x w_{l-1}` (row-major, one row per output unit) followed by a bias
//! block of length `w_l`. Blocks are laid out layer by layer, weights first.
//! Hidden layers apply the configured activation; the last layer emits raw
//! logits.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Seeded generator used everywhere randomness is needed: xoshiro256++
/// (rotation 23, shift 17, rotation 45) seeded through SplitMix64.
pub type Prng = Xoshiro256PlusPlus;

pub fn prng(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

/// Offsets of one layer's blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn weights(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn bias(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self { layer_widths, activation };
        spec.validate()?;
        Ok(spec)
    }

    /// Single affine layer followed by softmax.
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self { layer_widths: vec![input_dim, classes], activation: Activation::Identity }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument("a model needs at least an input and an output width".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                slot
            })
            .collect()
    }
}

pub fn param_count(spec: &ModelSpec) -> usize {
    spec.param_count()
}

/// One layer's parameters in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerSlot>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self { values: vec![0.0; spec.param_count()], layout: spec.layout() }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch { expected: spec.param_count(), actual: values.len() });
        }
        Ok(Self { values, layout: spec.layout() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { values, layout: self.layout.clone() }
    }

    pub fn unflatten(&self) -> Vec<LayerParams> {
        self.layout
            .iter()
            .map(|slot| LayerParams {
                weights: DenseMatrix::from_row_major(
                    slot.fan_out,
                    slot.fan_in,
                    self.values[slot.weights()].to_vec(),
                )
                .expect("layout sizes agree"),
                bias: self.values[slot.bias()].to_vec(),
            })
            .collect()
    }

    pub fn flatten(spec: &ModelSpec, layers: &[LayerParams]) -> Result<Self> {
        let layout = spec.layout();
        if layers.len() != layout.len() {
            return Err(Error::DimensionMismatch { expected: layout.len(), actual: layers.len() });
        }
        let mut values = Vec::with_capacity(spec.param_count());
        for (slot, layer) in layout.iter().zip(layers) {
            if layer.weights.rows() != slot.fan_out || layer.weights.cols() != slot.fan_in {
                return Err(Error::DimensionMismatch {
                    expected: slot.fan_in * slot.fan_out,
                    actual: layer.weights.rows() * layer.weights.cols(),
                });
            }
            if layer.bias.len() != slot.fan_out {
                return Err(Error::DimensionMismatch { expected: slot.fan_out, actual: layer.bias.len() });
            }
            values.extend_from_slice(layer.weights.as_slice());
            values.extend_from_slice(&layer.bias);
        }
        Ok(Self { values, layout })
    }
}

/// He initialization: weights drawn from `Normal(0, 2/fan_in)`, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = prng(seed);
    let mut params = ParamVector::zeros(spec);
    for slot in spec.layout() {
        let std = (2.0 / slot.fan_in as f64).sqrt();
        for w in &mut params.values[slot.weights()] {
            let z: f64 = rng.sample(StandardNormal);
            *w = std * z;
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::linear(2, 3).param_count(), 9);
        let mnist = ModelSpec::new(vec![784, 32, 10], Activation::Relu).unwrap();
        assert_eq!(mnist.param_count(), 25_450);
        for d in 1..6 {
            assert_eq!(param_count(&ModelSpec::linear(d, 4)), (d + 1) * 4);
        }
    }

    #[test]
    fn init_layout_and_determinism() {
        let spec = ModelSpec::linear(2, 3);
        let p = init_params(&spec, 42);
        assert_eq!(p.len(), 9);
        assert!(p.as_slice()[6..].iter().all(|&b| b == 0.0));
        assert_eq!(p.as_slice(), init_params(&spec, 42).as_slice());
        assert_ne!(p.as_slice(), init_params(&spec, 43).as_slice());
    }

    #[test]
    fn he_variance_per_layer() {
        let spec = ModelSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
        // pool many seeds so the sample variance is meaningful for a 24-entry layer
        for (l, slot) in spec.layout().iter().enumerate() {
            let target = 2.0 / slot.fan_in as f64;
            let mut sum_sq = 0.0;
            let mut count = 0.0;
            for seed in 0..200 {
                let p = init_params(&spec, seed);
                for w in &p.as_slice()[slot.weights()] {
                    sum_sq += w * w;
                    count += 1.0;
                }
            }
            let var = sum_sq / count;
            assert!((var - target).abs() < 0.3 * target, "layer {l}: {var} vs {target}");
        }
    }

    #[test]
    fn flatten_round_trip() {
        let spec = ModelSpec::new(vec![3, 5, 2], Activation::Relu).unwrap();
        let p = init_params(&spec, 1);
        let layers = p.unflatten();
        assert_eq!(layers[0].weights.rows(), 5);
        assert_eq!(layers[0].weights.cols(), 3);
        let q = ParamVector::flatten(&spec, &layers).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_degenerate_spec() {
        assert!(ModelSpec::new(vec![3], Activation::Relu).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], Activation::Relu).is_err());
    }
}
