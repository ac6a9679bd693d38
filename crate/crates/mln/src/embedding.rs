//! The embedding network f_θ: a configurable affine+ReLU stack mapping raw
//! inputs to D-dimensional vectors. The final layer is linear so embeddings
//! can occupy all orthants.

use crate::error::{MlnError, Result};
use crate::num::matrix::Matrix;
use crate::num::rng::RngStream;
use crate::num::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    /// Widths of every layer including the final output dimension D.
    pub layer_widths: Vec<usize>,
    pub init_seed: u64,
}

impl EmbeddingConfig {
    pub fn new(input_dim: usize, layer_widths: Vec<usize>, init_seed: u64) -> Result<Self> {
        if input_dim == 0 || layer_widths.is_empty() || layer_widths.contains(&0) {
            return Err(MlnError::InvalidConfig(
                "embedding needs a positive input dim and at least one nonzero layer".into(),
            ));
        }
        Ok(EmbeddingConfig { input_dim, layer_widths, init_seed })
    }

    /// Output dimension D.
    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

/// θ: per-layer weight matrices (fan_in x fan_out) and bias rows (1 x fan_out).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl EmbeddingParams {
    pub fn check_shapes(&self, config: &EmbeddingConfig) -> Result<()> {
        if self.weights.len() != config.layer_widths.len() || self.biases.len() != self.weights.len() {
            return Err(MlnError::InvalidConfig("layer count mismatch".into()));
        }
        let mut fan_in = config.input_dim;
        for (i, &w) in config.layer_widths.iter().enumerate() {
            if self.weights[i].rows() != fan_in || self.weights[i].cols() != w {
                return Err(MlnError::InvalidConfig(format!(
                    "layer {i} weight is {}x{}, expected {fan_in}x{w}",
                    self.weights[i].rows(),
                    self.weights[i].cols()
                )));
            }
            if self.biases[i].rows() != 1 || self.biases[i].cols() != w {
                return Err(MlnError::InvalidConfig(format!("layer {i} bias shape mismatch")));
            }
            fan_in = w;
        }
        Ok(())
    }
}

/// Glorot-uniform weights (bound = sqrt(6/(fan_in+fan_out))), zero biases.
/// Deterministic per seed.
pub fn init_params(config: &EmbeddingConfig, rng: &mut RngStream) -> EmbeddingParams {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut fan_in = config.input_dim;
    for &fan_out in &config.layer_widths {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(rng.uniform_matrix(fan_in, fan_out, -bound, bound));
        biases.push(Matrix::zeros(1, fan_out));
        fan_in = fan_out;
    }
    EmbeddingParams { weights, biases }
}

/// Forward pass: affine+ReLU per layer, no ReLU after the final layer.
pub fn embed_batch(params: &EmbeddingParams, inputs: &Matrix) -> Result<Matrix> {
    let mut h = inputs.clone();
    let last = params.weights.len() - 1;
    for (i, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let mut z = h.matmul(w)?;
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                let v = z.get(r, c) + b.get(0, c);
                z.set(r, c, v);
            }
        }
        h = if i == last { z } else { z.relu() };
    }
    Ok(h)
}

/// Parameter node handles for one tape-recorded forward pass.
pub struct EmbeddingNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

/// Registers θ as leaves on the tape.
pub fn params_on_tape(tape: &mut Tape, params: &EmbeddingParams) -> EmbeddingNodes {
    EmbeddingNodes {
        weights: params.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
        biases: params.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
    }
}

/// Differentiable forward pass over already-registered parameters.
pub fn embed_batch_on_tape(tape: &mut Tape, nodes: &EmbeddingNodes, inputs: NodeId) -> Result<NodeId> {
    let mut h = inputs;
    let last = nodes.weights.len() - 1;
    for i in 0..nodes.weights.len() {
        let z = tape.matmul(h, nodes.weights[i])?;
        let z = tape.add_row_broadcast(z, nodes.biases[i])?;
        h = if i == last { z } else { tape.relu(z) };
    }
    Ok(h)
}
