//! Multi-layer perceptron feature encoders built on the autodiff graph.
//!
//! An [`MlpConfig`] describes the architecture and owns parameter
//! registration/binding; the bound [`Mlp`] holds graph handles and runs
//! forward passes. An empty width list is the identity encoder, which is
//! useful when raw inputs are already the desired features.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParameterStore, Value};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: &Value) -> Value {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v.clone(),
        }
    }

    /// Gain for weight initialization: He for relu, Xavier otherwise.
    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::Tanh | Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpConfig {
    pub fn new(input_dim: usize, widths: Vec<usize>, activations: Vec<Activation>) -> Self {
        assert_eq!(
            widths.len(),
            activations.len(),
            "need one activation per layer: {} widths vs {} activations",
            widths.len(),
            activations.len()
        );
        MlpConfig { input_dim, widths, activations }
    }

    /// The identity encoder: no layers, output = input.
    pub fn identity(input_dim: usize) -> Self {
        MlpConfig { input_dim, widths: vec![], activations: vec![] }
    }

    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input_dim)
    }

    /// Register weight and bias tensors under `prefix` with fan-in-scaled
    /// Gaussian initialization.
    pub fn init_params(&self, prefix: &str, store: &mut ParameterStore, rng: &mut impl Rng) {
        let mut fan_in = self.input_dim;
        for (i, (&width, &act)) in self.widths.iter().zip(&self.activations).enumerate() {
            let std = (act.init_gain() / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid init std");
            let w: Vec<f64> = (0..width * fan_in).map(|_| normal.sample(rng)).collect();
            store.insert(&format!("{prefix}.w{i}"), Tensor::matrix(width, fan_in, w));
            store.insert(&format!("{prefix}.b{i}"), Tensor::zeros(&[width]));
            fan_in = width;
        }
    }

    /// Resolve this architecture against bound parameter values.
    pub fn bind(&self, prefix: &str, binding: &Binding) -> Mlp {
        let layers = (0..self.widths.len())
            .map(|i| Layer {
                w: binding.value(&format!("{prefix}.w{i}")),
                b: binding.value(&format!("{prefix}.b{i}")),
                act: self.activations[i],
            })
            .collect();
        Mlp { input_dim: self.input_dim, layers }
    }
}

struct Layer {
    w: Value,
    b: Value,
    act: Activation,
}

/// A bound MLP ready to encode inputs into the graph.
pub struct Mlp {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Encode a raw input vector. The input enters the graph as a constant;
    /// gradients flow to the layer parameters only.
    pub fn forward(&self, x: &Tensor) -> Value {
        assert_eq!(
            x.shape(),
            &[self.input_dim],
            "encoder expects input shape [{}], got {:?}",
            self.input_dim,
            x.shape()
        );
        let mut h = Value::constant(x.clone());
        for layer in &self.layers {
            h = layer.act.apply(&layer.w.matvec(&h).add(&layer.b));
        }
        h
    }
}
