//! Learning rules, optimizers and the epoch loop.
//!
//! Error signals `delta_l` are always gradients with respect to a layer's
//! pre-activation, per sample and unscaled; parameter gradients are the
//! batch mean of `delta_l h_{l-1}^T`.

mod optim;
mod sweeps;
mod train;

pub use optim::{adam_update, sgd_update, AdamState, LearningRate, Optimizer, OptimizerKind};
pub use sweeps::{
    backprop_sweep, dfa_sweep, layerwise_instant_sweep, Backward, FeedbackMatrices, UpdateReport,
};
pub use train::{
    evaluate_loss, train, train_with_observer, EpochRecord, RuleKind, SnapshotMode, TrainerConfig,
    TrainingRun, UpdateRule,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{activation_derivative, Activation, LayerCache, Network, Params};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Cross-entropy on a softmax output layer.
    #[default]
    SoftmaxCrossEntropy,
    /// Half squared error, `0.5 * ||h - T||^2` per sample.
    MeanSquaredError,
}

/// Batch-mean loss and the output error `dL/dz_L` (per sample).
///
/// Softmax + cross-entropy collapses to `h - T`; MSE gives
/// `(h - T) * f'(z_L)`.
pub fn output_error(
    activation: Activation,
    output: &LayerCache,
    targets: &Tensor,
    loss: Loss,
) -> Result<(f64, Tensor)> {
    let h = &output.activation;
    if h.shape() != targets.shape() {
        return Err(Error::dim("output_error", h.shape(), targets.shape()));
    }
    let batch = h.shape()[0] as f64;
    let diff = h.sub(targets)?;
    match loss {
        Loss::SoftmaxCrossEntropy => {
            if activation != Activation::Softmax {
                return Err(Error::Config(format!(
                    "cross-entropy loss needs a softmax output layer, found {}",
                    activation.name()
                )));
            }
            Ok((cross_entropy(h, targets) / batch, diff))
        }
        Loss::MeanSquaredError => {
            let value = 0.5 * diff.data().iter().map(|d| d * d).sum::<f64>() / batch;
            let slope = activation_derivative(activation, &output.pre_activation, h)?;
            Ok((value, diff.mul(&slope)?))
        }
    }
}

/// Clamps from below without swallowing NaN, which `f64::max` would.
pub(crate) fn clamp_probability(p: f64) -> f64 {
    if p < LOG_CLAMP {
        LOG_CLAMP
    } else {
        p
    }
}

fn cross_entropy(h: &Tensor, targets: &Tensor) -> f64 {
    -h.data()
        .iter()
        .zip(targets.data())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| t * clamp_probability(p).ln())
        .sum::<f64>()
}

/// Per-layer error signals; `None` where a rule assigns no signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSignal {
    pub deltas: Vec<Option<Tensor>>,
}

impl ErrorSignal {
    /// Mean over samples of the L2 norm of each sample's `delta_l`.
    pub fn norms(&self) -> Vec<Option<f64>> {
        self.deltas.iter().map(|d| d.as_ref().map(mean_sample_norm)).collect()
    }
}

pub(crate) fn mean_sample_norm(delta: &Tensor) -> f64 {
    let batch = delta.shape()[0];
    let width = delta.len() / batch;
    delta
        .data()
        .chunks(width)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / batch as f64
}

/// `dL/dW_l`, `dL/db_l` for every parameterized layer, aligned with
/// `Network::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Params>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Gradients {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| l.params().map(Params::zeros_like))
                .collect(),
        }
    }

    pub fn layer(&self, l: usize) -> Option<&Params> {
        self.layers[l].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weights.all_finite() && p.bias.all_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weights.max_abs().max(p.bias.max_abs()))
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_against(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.depth() {
            return Err(Error::Contract(format!(
                "gradients cover {} layers, network has {}",
                self.layers.len(),
                net.depth()
            )));
        }
        for (i, (g, layer)) in self.layers.iter().zip(net.layers()).enumerate() {
            match (g, layer.params()) {
                (Some(g), Some(p))
                    if g.weights.shape() == p.weights.shape() && g.bias.shape() == p.bias.shape() => {}
                (None, None) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "gradient for layer {i} does not match its parameters"
                    )))
                }
            }
        }
        Ok(())
    }
}
