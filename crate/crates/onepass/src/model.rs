//! Multi-layer perceptron builder shared by the training loop and the
//! hypergradient engines.
//!
//! A model is a stack of dense layers with ReLU between them and either a
//! mean squared error or a softmax cross-entropy head. The builder attaches
//! the forward pass and the loss to a caller-supplied [`Graph`], so the same
//! description can be instantiated with differentiable weight leaves (for
//! training and hypergradients) or plain constants (for evaluation).

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("a model needs an input and an output layer, got {0} sizes")]
    TooFewLayers(usize),
    #[error("layer {index} has zero width")]
    ZeroWidth { index: usize },
    #[error("cross-entropy needs at least two output classes, got {0}")]
    TooFewClasses(usize),
}

/// Which loss the final layer feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean of squared residuals over every output entry.
    MeanSquaredError,
    /// Mean softmax cross-entropy against integer class targets.
    CrossEntropy,
}

/// Architecture description: layer widths from input to output plus the loss.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    layers: Vec<usize>,
    loss: LossKind,
}

/// Handles into a graph returned by [`MlpSpec::attach_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    /// Input placeholder, shape `[rows, input_dim]`.
    pub x: NodeId,
    /// Target placeholder. `[rows, output_dim]` for squared error,
    /// `[rows, 1]` class indices for cross-entropy.
    pub y: NodeId,
    /// Scalar loss node.
    pub loss: NodeId,
    /// Network output before the loss, shape `[rows, output_dim]`.
    pub predictions: NodeId,
}

impl MlpSpec {
    pub fn new(layers: Vec<usize>, loss: LossKind) -> Result<Self, ModelError> {
        if layers.len() < 2 {
            return Err(ModelError::TooFewLayers(layers.len()));
        }
        if let Some(index) = layers.iter().position(|&w| w == 0) {
            return Err(ModelError::ZeroWidth { index });
        }
        let out = *layers.last().expect("checked above");
        if loss == LossKind::CrossEntropy && out < 2 {
            return Err(ModelError::TooFewClasses(out));
        }
        Ok(Self { layers, loss })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().expect("validated at construction")
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    /// Shapes of the parameter tensors in storage order: weight then bias for
    /// each layer, input side first.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(2 * (self.layers.len() - 1));
        for pair in self.layers.windows(2) {
            shapes.push(vec![pair[0], pair[1]]);
            shapes.push(vec![pair[1]]);
        }
        shapes
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Draw initial parameters: each weight entry uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero. Weight entries are
    /// drawn row-major, layer by layer, so the stream of RNG draws is fixed
    /// by the architecture alone.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        let mut params = Vec::with_capacity(2 * (self.layers.len() - 1));
        for pair in self.layers.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], data));
            params.push(Tensor::zeros(&[fan_out]));
        }
        params
    }

    /// Record the forward pass and loss on `g`, reading parameters from
    /// `weights` (storage order from [`param_shapes`](Self::param_shapes)).
    /// Inputs and targets become unbound placeholders sized for `rows` rows,
    /// so the graph must be fed through [`Graph::bind`] or [`Graph::forward`]
    /// before it is read.
    pub fn attach_loss(
        &self,
        g: &mut Graph,
        weights: &[NodeId],
        rows: usize,
    ) -> Result<LossParts, AdError> {
        assert_eq!(
            weights.len(),
            2 * (self.layers.len() - 1),
            "one weight and one bias node per layer"
        );
        let x = g.placeholder(&[rows, self.input_dim()]);
        let y = match self.loss {
            LossKind::MeanSquaredError => g.placeholder(&[rows, self.output_dim()]),
            LossKind::CrossEntropy => g.placeholder(&[rows, 1]),
        };
        let mut h = x;
        let hidden_layers = self.layers.len() - 2;
        for l in 0..self.layers.len() - 1 {
            let z = g.matmul(h, weights[2 * l])?;
            let z = g.add_row_broadcast(z, weights[2 * l + 1])?;
            h = if l < hidden_layers { g.relu(z)? } else { z };
        }
        let predictions = h;
        let loss = match self.loss {
            LossKind::MeanSquaredError => {
                let diff = g.sub(predictions, y)?;
                let sq = g.mul(diff, diff)?;
                g.mean(sq)?
            }
            LossKind::CrossEntropy => g.softmax_cross_entropy(predictions, y)?,
        };
        Ok(LossParts { x, y, loss, predictions })
    }

    /// Build a fresh graph holding `params` as differentiable leaves plus the
    /// attached loss. Convenience for evaluation and tests.
    pub fn spawn_graph(
        &self,
        params: &[Tensor],
        rows: usize,
    ) -> Result<(Graph, Vec<NodeId>, LossParts), AdError> {
        let mut g = Graph::new();
        let weights: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let parts = self.attach_loss(&mut g, &weights, rows)?;
        Ok((g, weights, parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_diff_grad, central_diff_jacobian, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_degenerate_architectures() {
        assert_eq!(
            MlpSpec::new(vec![8], LossKind::MeanSquaredError).unwrap_err(),
            ModelError::TooFewLayers(1)
        );
        assert_eq!(
            MlpSpec::new(vec![8, 0, 1], LossKind::MeanSquaredError).unwrap_err(),
            ModelError::ZeroWidth { index: 1 }
        );
        assert_eq!(
            MlpSpec::new(vec![8, 1], LossKind::CrossEntropy).unwrap_err(),
            ModelError::TooFewClasses(1)
        );
    }

    #[test]
    fn parameter_count_matches_layer_sizes() {
        let spec = MlpSpec::new(vec![8, 15, 1], LossKind::MeanSquaredError).unwrap();
        assert_eq!(spec.param_count(), 8 * 15 + 15 + 15 + 1);
        assert_eq!(spec.param_count(), 151);
        assert_eq!(
            spec.param_shapes(),
            vec![vec![8, 15], vec![15], vec![15, 1], vec![1]]
        );
    }

    #[test]
    fn init_is_bounded_zero_biased_and_reproducible() {
        let spec = MlpSpec::new(vec![6, 9, 3], LossKind::CrossEntropy).unwrap();
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        let again = spec.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        for (a, b) in params.iter().zip(&again) {
            assert_eq!(a.data(), b.data());
        }
        for (tensor, shape) in params.iter().zip(spec.param_shapes()) {
            assert_eq!(tensor.shape(), &shape[..]);
            if shape.len() == 2 {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                assert!(tensor.data().iter().all(|w| w.abs() <= bound));
                assert!(tensor.data().iter().any(|w| w.abs() > 1e-4));
            } else {
                assert!(tensor.data().iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn squared_error_matches_hand_computation() {
        let spec = MlpSpec::new(vec![2, 1], LossKind::MeanSquaredError).unwrap();
        let params = vec![
            Tensor::new(vec![2, 1], vec![0.5, -1.0]),
            Tensor::new(vec![1], vec![0.25]),
        ];
        let (mut g, _, parts) = spec.spawn_graph(&params, 2).unwrap();
        let loss = g
            .forward(
                parts.loss,
                vec![
                    (parts.x, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])),
                    (parts.y, Tensor::new(vec![2, 1], vec![0.0, 1.0])),
                ],
            )
            .unwrap();
        // Residuals are -1.25 and -3.25, so the mean square is 6.0625.
        assert!((loss.item() - 6.0625).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_log_class_count_cross_entropy() {
        let spec = MlpSpec::new(vec![4, 3], LossKind::CrossEntropy).unwrap();
        let params = vec![Tensor::zeros(&[4, 3]), Tensor::zeros(&[3])];
        let (mut g, _, parts) = spec.spawn_graph(&params, 3).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let y = Tensor::new(vec![3, 1], vec![2.0, 0.0, 1.0]);
        let loss = g.forward(parts.loss, vec![(parts.x, x), (parts.y, y)]).unwrap();
        assert!((loss.item() - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shifting_every_logit_leaves_cross_entropy_unchanged() {
        let spec = MlpSpec::new(vec![3, 4], LossKind::CrossEntropy).unwrap();
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(11));
        let (mut g, weights, parts) = spec.spawn_graph(&params, 5).unwrap();
        let x = Tensor::new(vec![5, 3], (0..15).map(|i| (i as f64 * 0.7).sin()).collect());
        let y = Tensor::new(vec![5, 1], vec![0.0, 3.0, 1.0, 2.0, 3.0]);
        let before = g
            .forward(parts.loss, vec![(parts.x, x), (parts.y, y)])
            .unwrap()
            .item();
        let shifted = params[1].map(|b| b + 7.5);
        let after = g.forward(parts.loss, vec![(weights[1], shifted)]).unwrap().item();
        assert!((before - after).abs() < 1e-12);
    }

    /// Inputs and first-layer weights are kept strictly positive so every
    /// hidden unit is active and finite differences never cross the ReLU kink.
    fn positive_fixture(spec: &MlpSpec, rows: usize) -> (Vec<Tensor>, Tensor, Tensor) {
        let shapes = spec.param_shapes();
        let mut params = Vec::new();
        for (k, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| 0.15 + 0.35 * ((1.3 * (i as f64 + 1.0) + k as f64).sin() * 0.5 + 0.5))
                .collect();
            params.push(Tensor::new(shape.clone(), data));
        }
        let x = Tensor::new(
            vec![rows, spec.input_dim()],
            (0..rows * spec.input_dim())
                .map(|i| 0.4 + 0.3 * ((0.9 * i as f64).cos() * 0.5 + 0.5))
                .collect(),
        );
        let y = Tensor::new(
            vec![rows, spec.output_dim()],
            (0..rows * spec.output_dim()).map(|i| ((i as f64) * 0.61).sin()).collect(),
        );
        (params, x, y)
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![3, 4, 2], LossKind::MeanSquaredError).unwrap();
        let (params, x, y) = positive_fixture(&spec, 6);
        let (mut g, weights, parts) = spec.spawn_graph(&params, 6).unwrap();
        g.bind(parts.x, x).unwrap();
        g.bind(parts.y, y).unwrap();
        g.refresh().unwrap();
        let grads = g.grad(parts.loss, &weights).unwrap();
        for (leaf, grad) in weights.iter().zip(&grads) {
            let fd = central_diff_grad(&mut g, parts.loss, *leaf, 1e-5).unwrap();
            assert!(
                max_rel_err(grad, &fd) < 1e-6,
                "gradient mismatch on leaf {leaf:?}: {}",
                max_rel_err(grad, &fd)
            );
        }
    }

    #[test]
    fn dense_jacobian_of_twelve_parameter_network_matches_finite_differences() {
        let spec = MlpSpec::new(vec![2, 2, 2], LossKind::MeanSquaredError).unwrap();
        assert_eq!(spec.param_count(), 12);
        let (params, x, y) = positive_fixture(&spec, 4);
        let (mut g, weights, parts) = spec.spawn_graph(&params, 4).unwrap();
        g.bind(parts.x, x).unwrap();
        g.bind(parts.y, y).unwrap();
        g.refresh().unwrap();
        let out_numel = g.value(parts.predictions).numel();
        for leaf in &weights {
            let fd = central_diff_jacobian(&mut g, parts.predictions, *leaf, 1e-6).unwrap();
            let n = g.value(*leaf).numel();
            for row in 0..out_numel {
                let mut seed = Tensor::zeros(g.value(parts.predictions).shape());
                seed.data_mut()[row] = 1.0;
                let ad_row = &g.vjp(parts.predictions, seed, &[*leaf]).unwrap()[0];
                for col in 0..n {
                    let diff = (ad_row.data()[col] - fd.data()[row * n + col]).abs();
                    assert!(diff < 1e-9, "jacobian entry ({row},{col}) differs by {diff}");
                }
            }
        }
    }
}
