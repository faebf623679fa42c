//! Multilayer perceptron feature extractor.
//!
//! Hidden layers use a rectifier; the output layer is linear. Parameters are
//! exposed as an ordered list of blocks `[w0, b0, w1, b1, ...]` where `wi` is
//! `out × in` and `bi` is `1 × out`. Gradients use the same ordering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    widths: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    frozen: bool,
}

/// Layer inputs and pre-activations from one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl FeatureExtractor {
    /// Glorot-uniform weights, zero biases.
    pub fn random(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-limit..=limit)
            }));
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            frozen: false,
        })
    }

    pub fn from_parameters(weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::config(format!(
                "need one bias per weight matrix and at least one layer, got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        let mut widths = vec![weights[0].cols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *widths.last().unwrap() {
                return Err(Error::shape(
                    "FeatureExtractor",
                    format!("layer {i} expects {} inputs, previous layer gives {}", w.cols(), widths[i]),
                ));
            }
            if b.shape() != (1, w.rows()) {
                return Err(Error::shape(
                    "FeatureExtractor",
                    format!("layer {i} bias is {:?}, expected (1, {})", b.shape(), w.rows()),
                ));
            }
            widths.push(w.rows());
        }
        Ok(Self {
            widths,
            weights,
            biases,
            frozen: false,
        })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!(
                "layer widths must list at least input and output size, all positive; got {widths:?}"
            )));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freeze in place. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn parameters(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Mutable parameter blocks in gradient order. Refused once frozen.
    pub fn parameters_mut(&mut self) -> Result<Vec<&mut Matrix>> {
        if self.frozen {
            return Err(Error::State("feature extractor is frozen".into()));
        }
        Ok(self
            .weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_traced(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "FeatureExtractor::forward",
                format!("input has {} columns, extractor expects {}", x.cols(), self.input_dim()),
            ));
        }
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers);
        let mut current = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = current.matmul_t(w)?;
            let bias = b.as_slice();
            for r in 0..z.rows() {
                for (v, bb) in z.row_mut(r).iter_mut().zip(bias) {
                    *v += bb;
                }
            }
            let next = if i + 1 < layers { z.map(relu) } else { z.clone() };
            inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(z);
        }
        Ok((
            current,
            ForwardTrace {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Gradient of `Σ upstream ⊙ forward(x)` with respect to every parameter
    /// block.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Matrix) -> Result<Vec<Matrix>> {
        if self.frozen {
            return Err(Error::State("backward called on a frozen feature extractor".into()));
        }
        let layers = self.weights.len();
        let n = trace.inputs.first().map_or(0, Matrix::rows);
        if trace.inputs.len() != layers || upstream.shape() != (n, self.output_dim()) {
            return Err(Error::shape(
                "FeatureExtractor::backward",
                format!(
                    "upstream is {:?}, expected ({n}, {})",
                    upstream.shape(),
                    self.output_dim()
                ),
            ));
        }
        let mut grads = vec![Matrix::zeros(0, 0); 2 * layers];
        let mut delta = upstream.clone();
        for l in (0..layers).rev() {
            grads[2 * l] = delta.t_matmul(&trace.inputs[l])?;
            grads[2 * l + 1] = delta.column_sums();
            if l > 0 {
                let mut prev = delta.matmul(&self.weights[l])?;
                let z = &trace.pre_activations[l - 1];
                for (d, &zv) in prev.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}
