//! The three learning rules. Backprop and DFA only compute gradients; the
//! layer-wise instant rule updates each layer during its own sweep.

use rand::Rng;

use super::{output_error, ErrorSignal, Gradients, LearningRate, Loss, Optimizer, SnapshotMode};
use crate::error::{Error, Result};
use crate::nn::{
    activation_derivative, input_gradient, param_gradients, Activation, ForwardCache, Network,
};
use crate::rng;
use crate::tensor::Tensor;

/// Result of a gradient-only sweep.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub errors: ErrorSignal,
    pub grads: Gradients,
}

/// `dL/dh_{l-1}` turned into `delta_{l-1}` by the slope of layer `l-1`.
fn through_activation(net: &Network, cache: &ForwardCache, l: usize, upstream: Tensor) -> Result<Tensor> {
    let act = net.layers()[l].activation();
    if act == Activation::Identity {
        return Ok(upstream);
    }
    let c = &cache.layers[l];
    upstream.mul(&activation_derivative(act, &c.pre_activation, &c.activation)?)
}

fn output_delta(net: &Network, cache: &ForwardCache, targets: &Tensor, loss: Loss) -> Result<(f64, Tensor)> {
    let last = net.depth() - 1;
    output_error(net.layers()[last].activation(), &cache.layers[last], targets, loss)
}

/// Chain-rule backpropagation: `delta_l = (delta_{l+1} W_{l+1}) * f'(z_l)`,
/// routed through pooling winners and conv adjoints. Leaves the network
/// untouched.
pub fn backprop_sweep(net: &Network, cache: &ForwardCache, targets: &Tensor, loss: Loss) -> Result<Backward> {
    cache.ensure_fresh(net)?;
    let depth = net.depth();
    let (loss_value, mut delta) = output_delta(net, cache, targets, loss)?;
    let mut deltas = vec![None; depth];
    let mut grads = vec![None; depth];
    for l in (0..depth).rev() {
        let layer = &net.layers()[l];
        let input = cache.layer_input(l);
        grads[l] = param_gradients(layer.kind(), input, &delta)?;
        if l > 0 {
            let up = input_gradient(layer.kind(), layer.params(), &cache.layers[l], input, &delta)?;
            let below = through_activation(net, cache, l - 1, up)?;
            deltas[l] = Some(std::mem::replace(&mut delta, below));
        } else {
            deltas[l] = Some(delta.clone());
        }
    }
    Ok(Backward {
        loss: loss_value,
        errors: ErrorSignal { deltas },
        grads: Gradients { layers: grads },
    })
}

/// Fixed random matrices `B_l` of shape `[dim(h_l), dim(output)]`, one per
/// hidden parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMatrices {
    matrices: Vec<Option<Tensor>>,
    /// `B_l^T`, cached for the batched projection `delta_L B_l^T`.
    transposed: Vec<Option<Tensor>>,
}

impl FeedbackMatrices {
    /// Validates that every hidden parameterized layer has a correctly
    /// shaped matrix.
    pub fn new(net: &Network, matrices: Vec<Option<Tensor>>) -> Result<Self> {
        if matrices.len() != net.depth() {
            return Err(Error::Config(format!(
                "{} feedback slots for a {}-layer network",
                matrices.len(),
                net.depth()
            )));
        }
        let shapes = net.layer_output_shapes();
        let out_dim = net.output_len();
        let last = net.depth() - 1;
        for (l, layer) in net.layers().iter().enumerate() {
            let needed = layer.params().is_some() && l != last;
            match (&matrices[l], needed) {
                (Some(b), true) => {
                    let dim = shapes[l].iter().product();
                    if b.shape() != [dim, out_dim] {
                        return Err(Error::Config(format!(
                            "feedback matrix for layer {l} is {:?}, expected [{dim}, {out_dim}]",
                            b.shape()
                        )));
                    }
                }
                (None, true) => {
                    return Err(Error::Config(format!("missing feedback matrix for layer {l}")))
                }
                (Some(_), false) => {
                    return Err(Error::Config(format!("layer {l} takes no feedback matrix")))
                }
                (None, false) => {}
            }
        }
        let transposed = matrices
            .iter()
            .map(|b| b.as_ref().map(Tensor::transpose).transpose())
            .collect::<Result<_>>()?;
        Ok(FeedbackMatrices { matrices, transposed })
    }

    /// Entries uniform in `[-1/sqrt(out_dim), 1/sqrt(out_dim)]`, drawn from
    /// the run seed.
    pub fn random(net: &Network, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::STREAM_FEEDBACK);
        let shapes = net.layer_output_shapes();
        let out_dim = net.output_len();
        let limit = 1.0 / (out_dim as f64).sqrt();
        let last = net.depth() - 1;
        let matrices = net
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (layer.params().is_some() && l != last).then(|| {
                    let dim: usize = shapes[l].iter().product();
                    let data = (0..dim * out_dim).map(|_| rng.random_range(-limit..=limit)).collect();
                    Tensor::from_parts(vec![dim, out_dim], data)
                })
            })
            .collect();
        Self::new(net, matrices)
    }

    pub fn matrix(&self, l: usize) -> Option<&Tensor> {
        self.matrices[l].as_ref()
    }
}

/// Direct feedback alignment: every hidden layer gets
/// `delta_l = (B_l delta_L) * f'(z_l)` straight from the output error;
/// nothing is chained through the forward weights.
pub fn dfa_sweep(
    net: &Network,
    cache: &ForwardCache,
    targets: &Tensor,
    loss: Loss,
    feedback: &FeedbackMatrices,
) -> Result<Backward> {
    cache.ensure_fresh(net)?;
    if feedback.matrices.len() != net.depth() {
        return Err(Error::Config("feedback matrices do not match the network".into()));
    }
    let depth = net.depth();
    let last = depth - 1;
    let (loss_value, out_delta) = output_delta(net, cache, targets, loss)?;
    let mut deltas = vec![None; depth];
    let mut grads = vec![None; depth];
    grads[last] = param_gradients(net.layers()[last].kind(), cache.layer_input(last), &out_delta)?;
    for l in (0..last).rev() {
        let layer = &net.layers()[l];
        if layer.params().is_none() {
            continue;
        }
        let bt = feedback.transposed[l]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing feedback matrix for layer {l}")))?;
        let z_shape = cache.layers[l].pre_activation.shape();
        let projected = out_delta.matmul(bt)?.reshape(z_shape)?;
        let delta = through_activation(net, cache, l, projected)?;
        grads[l] = param_gradients(layer.kind(), cache.layer_input(l), &delta)?;
        deltas[l] = Some(delta);
    }
    deltas[last] = Some(out_delta);
    Ok(Backward {
        loss: loss_value,
        errors: ErrorSignal { deltas },
        grads: Gradients { layers: grads },
    })
}

/// Outcome of one layer-wise instant sweep.
#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub loss: f64,
    pub errors: ErrorSignal,
    /// Mean per-sample `||delta_l||_2`, the per-layer loss surrogate.
    pub error_norms: Vec<Option<f64>>,
    /// `||Delta theta_l||_2` of the applied update.
    pub update_norms: Vec<Option<f64>>,
}

/// Top-down sweep that updates each layer as soon as its error is known.
///
/// For layer `l` the sweep computes `delta_l`, immediately applies the
/// optimizer to `W_l, b_l` with gradient `delta_l h_{l-1}^T` (batch mean),
/// and then derives `delta_{l-1}` from `W_l`. In [`SnapshotMode::PostUpdate`]
/// that is the freshly updated `W_l`; in [`SnapshotMode::PreUpdate`] it is
/// the value from before the sweep, which reproduces backprop exactly.
pub fn layerwise_instant_sweep(
    net: &mut Network,
    cache: &ForwardCache,
    targets: &Tensor,
    loss: Loss,
    optimizer: &mut Optimizer,
    lr: &LearningRate,
    mode: SnapshotMode,
) -> Result<UpdateReport> {
    cache.ensure_fresh(net)?;
    let depth = net.depth();
    let param_rank: Vec<Option<usize>> = {
        let mut k = 0;
        net.layers()
            .iter()
            .map(|l| {
                l.params().map(|_| {
                    k += 1;
                    k - 1
                })
            })
            .collect()
    };
    let (loss_value, mut delta) = output_delta(net, cache, targets, loss)?;
    optimizer.begin_step();
    let mut deltas = vec![None; depth];
    let mut update_norms = vec![None; depth];
    for l in (0..depth).rev() {
        let kind = net.layers()[l].kind();
        let input = cache.layer_input(l);
        let grads = param_gradients(kind, input, &delta)?;
        let propagate = |net: &Network, delta: &Tensor| -> Result<Tensor> {
            let up = input_gradient(kind, net.layers()[l].params(), &cache.layers[l], input, delta)?;
            through_activation(net, cache, l - 1, up)
        };
        let mut below = if l > 0 && mode == SnapshotMode::PreUpdate {
            Some(propagate(net, &delta)?)
        } else {
            None
        };
        if let (Some(g), Some(k)) = (grads, param_rank[l]) {
            let params = net.params_mut(l).expect("parameterized layer");
            update_norms[l] = Some(optimizer.apply_layer(l, params, &g, lr.for_param_layer(k))?);
        }
        if l > 0 && below.is_none() {
            below = Some(propagate(net, &delta)?);
        }
        match below {
            Some(b) => deltas[l] = Some(std::mem::replace(&mut delta, b)),
            None => deltas[l] = Some(delta.clone()),
        }
    }
    let errors = ErrorSignal { deltas };
    Ok(UpdateReport {
        loss: loss_value,
        error_norms: errors.norms(),
        errors,
        update_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, forward_pass};
    use crate::trainers::{sgd_update, OptimizerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(net: &Network, n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim: usize = net.input_shape().iter().product();
        let classes = net.output_len();
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = vec![0.0; n * classes];
        for i in 0..n {
            t[i * classes + rng.random_range(0..classes)] = 1.0;
        }
        let mut shape = vec![n];
        shape.extend_from_slice(net.input_shape());
        (Tensor::new(shape, x).unwrap(), Tensor::new(vec![n, classes], t).unwrap())
    }

    #[test]
    fn zero_output_error_gives_zero_gradients() {
        let net = build_mlp(&[3, 4, 2], Activation::Sigmoid, 1).unwrap();
        let (x, _) = batch(&net, 5, 2);
        let cache = forward_pass(&net, &x).unwrap();
        let targets = cache.output().clone();
        let bp = backprop_sweep(&net, &cache, &targets, Loss::SoftmaxCrossEntropy).unwrap();
        assert_eq!(bp.grads.max_abs(), 0.0);
        let fb = FeedbackMatrices::random(&net, 3).unwrap();
        let dfa = dfa_sweep(&net, &cache, &targets, Loss::SoftmaxCrossEntropy, &fb).unwrap();
        assert_eq!(dfa.grads.max_abs(), 0.0);
    }

    #[test]
    fn single_softmax_layer_gradient_is_outer_product() {
        let net = build_mlp(&[4, 3], Activation::Relu, 1).unwrap();
        let (x, t) = batch(&net, 1, 4);
        let cache = forward_pass(&net, &x).unwrap();
        let bp = backprop_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
        let err = cache.output().sub(&t).unwrap();
        let expected = err.transpose().unwrap().matmul(&x).unwrap();
        let g = bp.grads.layer(0).unwrap();
        assert_eq!(g.weights, expected);
        assert_eq!(g.bias.data(), err.data());
    }

    #[test]
    fn dfa_top_layer_matches_backprop() {
        let net = build_mlp(&[5, 6, 4, 3], Activation::Tanh, 7).unwrap();
        let (x, t) = batch(&net, 8, 8);
        let cache = forward_pass(&net, &x).unwrap();
        let bp = backprop_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
        let fb = FeedbackMatrices::random(&net, 9).unwrap();
        let dfa = dfa_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy, &fb).unwrap();
        assert_eq!(dfa.grads.layer(2), bp.grads.layer(2));
        assert_ne!(dfa.grads.layer(0), bp.grads.layer(0));
    }

    #[test]
    fn dfa_hidden_gradient_by_hand() {
        let net = build_mlp(&[3, 4, 2], Activation::Sigmoid, 11).unwrap();
        let (x, t) = batch(&net, 1, 12);
        let cache = forward_pass(&net, &x).unwrap();
        let fb = FeedbackMatrices::random(&net, 13).unwrap();
        let dfa = dfa_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy, &fb).unwrap();

        let b = fb.matrix(0).unwrap();
        let e: Vec<f64> = cache.output().data().iter().zip(t.data()).map(|(h, t)| h - t).collect();
        let h1 = cache.layers[0].activation.data();
        let xs = x.data();
        let g = dfa.grads.layer(0).unwrap();
        for i in 0..4 {
            let proj: f64 = (0..2).map(|k| b.get(&[i, k]) * e[k]).sum();
            let d = proj * h1[i] * (1.0 - h1[i]);
            assert!((g.bias.data()[i] - d).abs() < 1e-15);
            for j in 0..3 {
                assert!((g.weights.get(&[i, j]) - d * xs[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dfa_hidden_error_ignores_forward_weights_above() {
        let mut net = build_mlp(&[3, 5, 4, 2], Activation::Relu, 21).unwrap();
        let (x, t) = batch(&net, 6, 22);
        let fb = FeedbackMatrices::random(&net, 23).unwrap();
        let cache = forward_pass(&net, &x).unwrap();
        let before = dfa_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy, &fb).unwrap();
        // Perturb W_2 but keep the forward values (and hence delta_L) as cached.
        net.params_mut(1).unwrap().weights.data_mut()[0] += 10.0;
        let cache = restamp(cache, &net);
        let after = dfa_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy, &fb).unwrap();
        assert_eq!(before.errors.deltas[0], after.errors.deltas[0]);
        let bp_before = backprop_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
        assert_ne!(bp_before.errors.deltas[0], before.errors.deltas[0]);
    }

    /// Marks `cache` as current for `net` while keeping its old values.
    fn restamp(cache: ForwardCache, net: &Network) -> ForwardCache {
        let mut fresh = forward_pass(net, &cache.input).unwrap();
        fresh.layers = cache.layers;
        fresh
    }

    #[test]
    fn feedback_validation() {
        let net = build_mlp(&[3, 4, 2], Activation::Relu, 0).unwrap();
        assert!(FeedbackMatrices::new(&net, vec![None, None]).is_err());
        assert!(FeedbackMatrices::new(&net, vec![Some(Tensor::zeros(&[2, 4])), None]).is_err());
        assert!(FeedbackMatrices::new(&net, vec![Some(Tensor::zeros(&[4, 2])), None]).is_ok());
        let fb = FeedbackMatrices::random(&net, 5).unwrap();
        let limit = 1.0 / 2f64.sqrt();
        assert!(fb.matrix(0).unwrap().data().iter().all(|v| v.abs() <= limit));
        assert_eq!(fb, FeedbackMatrices::random(&net, 5).unwrap());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = build_mlp(&[3, 4, 2], Activation::Relu, 0).unwrap();
        let (x, t) = batch(&net, 2, 1);
        let cache = forward_pass(&net, &x).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &net);
        layerwise_instant_sweep(&mut net, &cache, &t, Loss::SoftmaxCrossEntropy, &mut opt, &0.1.into(), SnapshotMode::PostUpdate)
            .unwrap();
        let again = layerwise_instant_sweep(
            &mut net,
            &cache,
            &t,
            Loss::SoftmaxCrossEntropy,
            &mut opt,
            &0.1.into(),
            SnapshotMode::PostUpdate,
        );
        assert!(matches!(again, Err(Error::Contract(_))));
        assert!(backprop_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy).is_err());
    }

    #[test]
    fn pre_update_mode_reproduces_backprop_with_sgd() {
        let net0 = build_mlp(&[4, 6, 3], Activation::Tanh, 31).unwrap();
        let (x, t) = batch(&net0, 7, 32);
        let cache = forward_pass(&net0, &x).unwrap();

        let mut bp_net = net0.clone();
        let bp = backprop_sweep(&bp_net, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
        sgd_update(&mut bp_net, &bp.grads, 0.1).unwrap();

        let mut lw_net = net0.clone();
        let cache = forward_pass(&lw_net, &x).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &lw_net);
        let report = layerwise_instant_sweep(
            &mut lw_net,
            &cache,
            &t,
            Loss::SoftmaxCrossEntropy,
            &mut opt,
            &0.1.into(),
            SnapshotMode::PreUpdate,
        )
        .unwrap();
        assert_eq!(report.errors, bp.errors);
        for (a, b) in lw_net.layers().iter().zip(bp_net.layers()) {
            let (a, b) = (a.params().unwrap(), b.params().unwrap());
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn post_update_hidden_error_shifts_by_the_weight_step() {
        let alpha = 0.1;
        let net0 = build_mlp(&[4, 6, 3], Activation::Sigmoid, 41).unwrap();
        let (x, t) = batch(&net0, 5, 42);
        let cache = forward_pass(&net0, &x).unwrap();
        let bp = backprop_sweep(&net0, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();

        let mut net = net0.clone();
        let cache = forward_pass(&net, &x).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &net);
        let report = layerwise_instant_sweep(
            &mut net,
            &cache,
            &t,
            Loss::SoftmaxCrossEntropy,
            &mut opt,
            &alpha.into(),
            SnapshotMode::PostUpdate,
        )
        .unwrap();

        // delta_post - delta_bp = (delta_2 (W2' - W2)) * f'(z_1), W2' - W2 = -alpha dW2.
        let d2 = bp.errors.deltas[1].as_ref().unwrap();
        let dw = bp.grads.layer(1).unwrap().weights.scale(-alpha);
        let h1 = &cache.layers[0].activation;
        let slope = h1.map(|h| h * (1.0 - h));
        let expected_shift = d2.matmul(&dw).unwrap().mul(&slope).unwrap();
        let shift = report.errors.deltas[0]
            .as_ref()
            .unwrap()
            .sub(bp.errors.deltas[0].as_ref().unwrap())
            .unwrap();
        assert!(shift.max_abs() > 0.0);
        for (a, b) in shift.data().iter().zip(expected_shift.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_layers_work_under_every_rule() {
        let net0 = crate::nn::build_cnn(&[1, 6, 6], &[2], 5, 3, Activation::Relu, 51).unwrap();
        let (x, t) = batch(&net0, 3, 52);
        let cache = forward_pass(&net0, &x).unwrap();
        let bp = backprop_sweep(&net0, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
        let fb = FeedbackMatrices::random(&net0, 53).unwrap();
        assert_eq!(fb.matrix(0).unwrap().shape(), &[2 * 4 * 4, 3]);
        let dfa = dfa_sweep(&net0, &cache, &t, Loss::SoftmaxCrossEntropy, &fb).unwrap();
        assert!(bp.grads.all_finite() && dfa.grads.all_finite());
        assert!(dfa.errors.deltas[1].is_none() && dfa.errors.deltas[2].is_none());
        let mut net = net0.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &net);
        let fresh = cache_for(&net, &x);
        let report = layerwise_instant_sweep(
            &mut net,
            &fresh,
            &t,
            Loss::SoftmaxCrossEntropy,
            &mut opt,
            &0.01.into(),
            SnapshotMode::PostUpdate,
        )
        .unwrap();
        assert_eq!(report.update_norms.iter().flatten().count(), 3);
        assert_ne!(net, net0);
    }

    fn cache_for(net: &Network, x: &Tensor) -> ForwardCache {
        forward_pass(net, x).unwrap()
    }
}
