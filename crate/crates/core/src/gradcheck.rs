//! Central finite differences as an independent gradient oracle, plus
//! comparison and alignment diagnostics.
//!
//! The numeric loss here is computed directly from the network output and
//! shares no code with the learning rules beyond the forward pass.
//!
//! ReLU and max-pool make the loss piecewise smooth. A parameter is left
//! out of the comparison when its finite difference straddles a kink:
//!
//! - the `+eps` and `-eps` probes disagree on the sign of any ReLU
//!   pre-activation or on any max-pool winner at or above its layer, or
//! - at the base point, a pre-activation of the ReLU unit it feeds
//!   directly lies within `10 * eps` of zero.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{forward_pass, Activation, ForwardCache, LayerKind, Network, Params};
use crate::tensor::Tensor;
use crate::trainers::{Gradients, Loss, LOG_CLAMP};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-4;
pub const DEFAULT_ATOL: f64 = 1e-7;
/// Kink guard band, in multiples of `eps`.
pub const KINK_BAND: f64 = 10.0;

/// `(f(theta + eps) - f(theta - eps)) / 2 eps`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, theta: f64, eps: f64) -> Result<f64> {
    let plus = f(theta + eps)?;
    let minus = f(theta - eps)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Oracle(format!(
            "non-finite loss while probing at {theta} (+{plus}, -{minus})"
        )));
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// Per-element exclusion flags, shaped like a layer's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionMask {
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

impl ExclusionMask {
    pub fn count(&self) -> usize {
        self.weights.iter().chain(&self.bias).filter(|&&e| e).count()
    }
}

#[derive(Debug, Clone)]
pub struct NumericGradients {
    pub grads: Gradients,
    pub excluded: Vec<Option<ExclusionMask>>,
}

impl NumericGradients {
    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().flatten().map(ExclusionMask::count).sum()
    }
}

/// The loss the learning rules minimize, from the output alone.
pub fn loss_value(output: &Tensor, targets: &Tensor, loss: Loss) -> Result<f64> {
    if output.shape() != targets.shape() {
        return Err(Error::dim("loss_value", output.shape(), targets.shape()));
    }
    let batch = output.shape()[0] as f64;
    let pairs = output.data().iter().zip(targets.data());
    let total: f64 = match loss {
        Loss::SoftmaxCrossEntropy => pairs.map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * p.max(LOG_CLAMP).ln() + if p.is_nan() { p } else { 0.0 } }).sum(),
        Loss::MeanSquaredError => pairs.map(|(&p, &t)| 0.5 * (p - t) * (p - t)).sum(),
    };
    Ok(total / batch)
}

/// Kink fingerprint of a forward pass from layer `from` upward.
#[derive(PartialEq)]
struct Regime {
    relu_signs: Vec<Vec<bool>>,
    pool_winners: Vec<Vec<crate::tensor::ArgmaxIndices>>,
}

fn regime(net: &Network, cache: &ForwardCache, from: usize) -> Regime {
    let mut relu_signs = Vec::new();
    let mut pool_winners = Vec::new();
    for (layer, c) in net.layers().iter().zip(&cache.layers).skip(from) {
        if layer.activation() == Activation::Relu {
            relu_signs.push(c.pre_activation.data().iter().map(|&z| z > 0.0).collect());
        }
        if matches!(layer.kind(), LayerKind::MaxPool2d { .. }) {
            pool_winners.push(c.argmax.clone());
        }
    }
    Regime { relu_signs, pool_winners }
}

/// Whether output unit `unit` of ReLU layer `l` has any pre-activation
/// within the guard band at the base point.
fn near_kink(net: &Network, base: &ForwardCache, l: usize, unit: usize, band: f64) -> bool {
    if net.layers()[l].activation() != Activation::Relu {
        return false;
    }
    let z = &base.layers[l].pre_activation;
    let batch = z.shape()[0];
    let units = match net.layers()[l].kind() {
        LayerKind::Dense { outputs, .. } => outputs,
        LayerKind::Conv2d { out_channels, .. } => out_channels,
        _ => return false,
    };
    let per_sample = z.len() / batch;
    let plane = per_sample / units;
    z.data()
        .chunks(per_sample)
        .any(|s| s[unit * plane..(unit + 1) * plane].iter().any(|v| v.abs() < band))
}

/// Which output unit a flat parameter index feeds.
fn unit_of(kind: LayerKind, weights_len: usize, is_bias: bool, i: usize) -> usize {
    if is_bias {
        return i;
    }
    let units = match kind {
        LayerKind::Dense { outputs, .. } => outputs,
        LayerKind::Conv2d { out_channels, .. } => out_channels,
        _ => 1,
    };
    i / (weights_len / units)
}

/// Central-difference gradient of the batch-mean loss with respect to
/// every parameter. Probing happens on a private copy, and each probed
/// parameter is restored bitwise before the next one.
pub fn finite_difference_grads(
    net: &Network,
    x: &Tensor,
    targets: &Tensor,
    loss: Loss,
    eps: f64,
) -> Result<NumericGradients> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    for p in net.layers().iter().filter_map(|l| l.params()) {
        if !p.weights.all_finite() || !p.bias.all_finite() {
            return Err(Error::Oracle("network parameters are not finite".into()));
        }
    }
    let mut probe = net.clone();
    let base = forward_pass(&probe, x)?;
    let band = KINK_BAND * eps;
    let mut grads = Vec::with_capacity(net.depth());
    let mut excluded = Vec::with_capacity(net.depth());

    for l in 0..net.depth() {
        let Some(original) = net.layers()[l].params().cloned() else {
            grads.push(None);
            excluded.push(None);
            continue;
        };
        let kind = net.layers()[l].kind();
        let mut g = original.zeros_like();
        let mut mask = ExclusionMask {
            weights: vec![false; original.weights.len()],
            bias: vec![false; original.bias.len()],
        };
        for is_bias in [false, true] {
            let n = if is_bias { original.bias.len() } else { original.weights.len() };
            for i in 0..n {
                let theta = element(&original, is_bias, i);
                let mut regimes = Vec::with_capacity(2);
                let d = central_difference(
                    |value| {
                        set_element(probe.params_mut(l).expect("parameterized"), is_bias, i, value);
                        let cache = forward_pass(&probe, x)?;
                        regimes.push(regime(&probe, &cache, l));
                        loss_value(cache.output(), targets, loss)
                    },
                    theta,
                    eps,
                );
                set_element(probe.params_mut(l).expect("parameterized"), is_bias, i, theta);
                let d = d?;
                let unit = unit_of(kind, original.weights.len(), is_bias, i);
                let kink = regimes[0] != regimes[1] || near_kink(net, &base, l, unit, band);
                let (gv, mv) = if is_bias {
                    (&mut g.bias.data_mut()[i], &mut mask.bias[i])
                } else {
                    (&mut g.weights.data_mut()[i], &mut mask.weights[i])
                };
                *gv = d;
                *mv = kink;
            }
        }
        grads.push(Some(g));
        excluded.push(Some(mask));
    }
    Ok(NumericGradients {
        grads: Gradients { layers: grads },
        excluded,
    })
}

fn element(p: &Params, is_bias: bool, i: usize) -> f64 {
    if is_bias {
        p.bias.data()[i]
    } else {
        p.weights.data()[i]
    }
}

fn set_element(p: &mut Params, is_bias: bool, i: usize, value: f64) {
    if is_bias {
        p.bias.data_mut()[i] = value;
    } else {
        p.weights.data_mut()[i] = value;
    }
}

/// Comparison result for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub layer: usize,
    /// `"weights"` or `"bias"`.
    pub tensor: &'static str,
    pub compared: usize,
    pub excluded: usize,
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|)` among elements where
    /// `max(|a|, |n|)` exceeds `atol`.
    pub max_rel_error: f64,
    /// Multi-index of the element with the largest violation ratio.
    pub worst_index: Option<Vec<usize>>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub rtol: f64,
    pub atol: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.tensors.iter().map(|t| t.excluded).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<8} {:>8} {:>8} {:>12} {:>12}  {:<14} {}",
            "layer", "tensor", "compared", "excluded", "max_abs", "max_rel", "worst_at", "status"
        );
        for t in &self.tensors {
            let at = t
                .worst_index
                .as_ref()
                .map(|ix| format!("{ix:?}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<6} {:<8} {:>8} {:>8} {:>12.3e} {:>12.3e}  {:<14} {}",
                t.layer,
                t.tensor,
                t.compared,
                t.excluded,
                t.max_abs_error,
                t.max_rel_error,
                at,
                if t.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "rtol={:e} atol={:e}: {}",
            self.rtol,
            self.atol,
            if self.passed { "PASS" } else { "FAIL" }
        );
        s
    }
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut ix = vec![0; shape.len()];
    for (slot, &extent) in ix.iter_mut().zip(shape).rev() {
        *slot = i % extent;
        i /= extent;
    }
    ix
}

fn check_tensor(
    layer: usize,
    name: &'static str,
    a: &Tensor,
    n: &Tensor,
    mask: Option<&[bool]>,
    rtol: f64,
    atol: f64,
) -> Result<TensorCheck> {
    if a.shape() != n.shape() {
        return Err(Error::Contract(format!(
            "layer {layer} {name}: analytic shape {:?} vs numeric {:?}",
            a.shape(),
            n.shape()
        )));
    }
    let mut out = TensorCheck {
        layer,
        tensor: name,
        compared: 0,
        excluded: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        passed: true,
    };
    let mut worst_ratio = f64::NEG_INFINITY;
    for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
        if mask.is_some_and(|m| m[i]) {
            out.excluded += 1;
            continue;
        }
        out.compared += 1;
        let err = (av - nv).abs();
        if err.is_nan() {
            out.passed = false;
        }
        out.max_abs_error = out.max_abs_error.max(err);
        let scale = av.abs().max(nv.abs());
        if scale > atol {
            out.max_rel_error = out.max_rel_error.max(err / scale);
        }
        let allowed = atol + rtol * nv.abs();
        if !(err <= allowed) {
            out.passed = false;
        }
        let ratio = if err.is_nan() { f64::INFINITY } else { err / allowed };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            out.worst_index = Some(unravel(i, a.shape()));
            out.worst_analytic = av;
            out.worst_numeric = nv;
        }
    }
    Ok(out)
}

fn compare_inner(
    analytic: &Gradients,
    numeric: &Gradients,
    masks: Option<&[Option<ExclusionMask>]>,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport> {
    if analytic.layers.len() != numeric.layers.len() {
        return Err(Error::Contract(format!(
            "analytic gradients cover {} layers, numeric {}",
            analytic.layers.len(),
            numeric.layers.len()
        )));
    }
    let mut tensors = Vec::new();
    for (l, (a, n)) in analytic.layers.iter().zip(&numeric.layers).enumerate() {
        match (a, n) {
            (None, None) => {}
            (Some(a), Some(n)) => {
                let mask = masks.and_then(|m| m.get(l)).and_then(Option::as_ref);
                tensors.push(check_tensor(
                    l,
                    "weights",
                    &a.weights,
                    &n.weights,
                    mask.map(|m| m.weights.as_slice()),
                    rtol,
                    atol,
                )?);
                tensors.push(check_tensor(
                    l,
                    "bias",
                    &a.bias,
                    &n.bias,
                    mask.map(|m| m.bias.as_slice()),
                    rtol,
                    atol,
                )?);
            }
            _ => return Err(Error::Contract(format!("layer {l} has gradients on one side only"))),
        }
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradCheckReport {
        rtol,
        atol,
        tensors,
        passed,
    })
}

/// Element-wise comparison; an element passes when
/// `|a - n| <= atol + rtol * |n|`.
pub fn compare_grads(analytic: &Gradients, numeric: &Gradients, rtol: f64, atol: f64) -> Result<GradCheckReport> {
    compare_inner(analytic, numeric, None, rtol, atol)
}

/// Like [`compare_grads`], skipping the oracle's kink-excluded elements.
pub fn compare_with_exclusions(
    analytic: &Gradients,
    numeric: &NumericGradients,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport> {
    compare_inner(analytic, &numeric.grads, Some(&numeric.excluded), rtol, atol)
}

/// Angle in degrees between two gradients, per parameterized layer
/// (weights and bias flattened together); `None` for layers without
/// parameters.
pub fn alignment_angle(a: &Gradients, b: &Gradients) -> Result<Vec<Option<f64>>> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Contract("gradients cover different layer counts".into()));
    }
    a.layers
        .iter()
        .zip(&b.layers)
        .enumerate()
        .map(|(l, pair)| match pair {
            (None, None) => Ok(None),
            (Some(pa), Some(pb)) => {
                if pa.weights.shape() != pb.weights.shape() || pa.bias.shape() != pb.bias.shape() {
                    return Err(Error::Contract(format!("layer {l} gradients differ in shape")));
                }
                let dot = pa.weights.dot(&pb.weights)? + pa.bias.dot(&pb.bias)?;
                let na = (pa.weights.dot(&pa.weights)? + pa.bias.dot(&pa.bias)?).sqrt();
                let nb = (pb.weights.dot(&pb.weights)? + pb.bias.dot(&pb.bias)?).sqrt();
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::UndefinedAngle(format!("layer {l} has a zero-norm gradient")));
                }
                Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()))
            }
            _ => Err(Error::Contract(format!("layer {l} has gradients on one side only"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_cnn, build_mlp, Layer};
    use crate::rng;
    use crate::trainers::backprop_sweep;
    use rand::Rng;

    fn batch(net: &Network, n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut r = rng::stream(seed, rng::STREAM_PROBE);
        let mut shape = vec![n];
        shape.extend_from_slice(net.input_shape());
        let len: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let k = net.output_len();
        let mut t = vec![0.0; n * k];
        for i in 0..n {
            t[i * k + r.random_range(0..k)] = 1.0;
        }
        (x, Tensor::new(vec![n, k], t).unwrap())
    }

    #[test]
    fn linear_and_quadratic() {
        let d = central_difference(|t| Ok(t * 2.0), 0.7, 1e-5).unwrap();
        assert!((d - 2.0).abs() < 1e-9);
        let d = central_difference(|t| Ok(t * t), 3.0, 1e-5).unwrap();
        assert!((d - 6.0).abs() < 1e-8);
        assert!(central_difference(|_| Ok(f64::NAN), 0.0, 1e-5).is_err());
    }

    #[test]
    fn probing_leaves_network_untouched() {
        let net = build_mlp(&[4, 5, 3], Activation::Tanh, 2).unwrap();
        let before = net.clone();
        let (x, t) = batch(&net, 3, 1);
        finite_difference_grads(&net, &x, &t, Loss::SoftmaxCrossEntropy, 1e-5).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn mlp_backprop_matches_oracle() {
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
            let net = build_mlp(&[4, 5, 3], act, 11).unwrap();
            let (x, t) = batch(&net, 4, 3);
            let cache = forward_pass(&net, &x).unwrap();
            let bp = backprop_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
            let fd = finite_difference_grads(&net, &x, &t, Loss::SoftmaxCrossEntropy, DEFAULT_EPSILON).unwrap();
            let report = compare_with_exclusions(&bp.grads, &fd, DEFAULT_RTOL, DEFAULT_ATOL).unwrap();
            assert!(report.passed, "{act:?}\n{}", report.to_table());
            assert!(report.max_rel_error() <= 1e-4, "{act:?}");
            if act != Activation::Relu {
                assert_eq!(fd.excluded_count(), 0);
            }
        }
    }

    #[test]
    fn mse_sigmoid_output_matches_oracle() {
        let net = build_mlp(&[3, 4, 2], Activation::Tanh, 4).unwrap();
        let mut layers = net.layers().to_vec();
        let last = layers.pop().unwrap();
        layers.push(Layer::with_params(last.kind(), Activation::Sigmoid, last.params().unwrap().clone()).unwrap());
        let net = Network::new(vec![3], layers).unwrap();
        let (x, t) = batch(&net, 5, 8);
        let cache = forward_pass(&net, &x).unwrap();
        let bp = backprop_sweep(&net, &cache, &t, Loss::MeanSquaredError).unwrap();
        let fd = finite_difference_grads(&net, &x, &t, Loss::MeanSquaredError, DEFAULT_EPSILON).unwrap();
        assert!(compare_grads(&bp.grads, &fd.grads, DEFAULT_RTOL, DEFAULT_ATOL).unwrap().passed);
    }

    #[test]
    fn toy_cnn_matches_oracle() {
        let net = build_cnn(&[1, 6, 6], &[2], 4, 3, Activation::Relu, 5).unwrap();
        let (x, t) = batch(&net, 2, 6);
        let cache = forward_pass(&net, &x).unwrap();
        let bp = backprop_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
        let fd = finite_difference_grads(&net, &x, &t, Loss::SoftmaxCrossEntropy, DEFAULT_EPSILON).unwrap();
        let report = compare_with_exclusions(&bp.grads, &fd, DEFAULT_RTOL, DEFAULT_ATOL).unwrap();
        assert!(report.passed, "{}", report.to_table());
        assert!(report.max_rel_error() <= 1e-4);
    }

    #[test]
    fn halving_eps_quarters_error() {
        let net = build_mlp(&[4, 5, 3], Activation::Tanh, 9).unwrap();
        let (x, t) = batch(&net, 3, 2);
        let cache = forward_pass(&net, &x).unwrap();
        let bp = backprop_sweep(&net, &cache, &t, Loss::SoftmaxCrossEntropy).unwrap();
        let err = |eps| {
            let fd = finite_difference_grads(&net, &x, &t, Loss::SoftmaxCrossEntropy, eps).unwrap();
            compare_grads(&bp.grads, &fd.grads, 0.0, 0.0).unwrap().max_abs_error()
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn comparison_reports() {
        let net = build_mlp(&[3, 2], Activation::Relu, 0).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].as_mut().unwrap().weights.data_mut()[4] = 0.5;
        let same = compare_grads(&g, &g, 1e-4, 1e-7).unwrap();
        assert!(same.passed);
        assert_eq!(same.max_abs_error(), 0.0);

        let mut shifted = g.clone();
        for p in shifted.layers.iter_mut().flatten() {
            p.weights = p.weights.add_scalar(1.0);
            p.bias = p.bias.add_scalar(1.0);
        }
        let r = compare_grads(&shifted, &g, 1e-4, 1e-7).unwrap();
        assert!(!r.passed);
        assert_eq!(r.tensors[0].worst_index, Some(vec![0, 0]));
        assert!((r.max_abs_error() - 1.0).abs() < 1e-15);
        assert!(r.to_table().contains("FAIL"));

        let other = Gradients::zeros_like(&build_mlp(&[3, 4, 2], Activation::Relu, 0).unwrap());
        assert!(matches!(compare_grads(&g, &other, 1e-4, 1e-7), Err(Error::Contract(_))));
    }

    #[test]
    fn angles() {
        let net = build_mlp(&[2, 2], Activation::Relu, 0).unwrap();
        let mut a = Gradients::zeros_like(&net);
        a.layers[0].as_mut().unwrap().weights.data_mut()[0] = 1.0;
        let mut b = Gradients::zeros_like(&net);
        b.layers[0].as_mut().unwrap().weights.data_mut()[1] = 2.0;
        let mut neg = a.clone();
        for p in neg.layers.iter_mut().flatten() {
            p.weights = p.weights.scale(-1.0);
        }
        let deg = |x: &Gradients, y: &Gradients| alignment_angle(x, y).unwrap()[0].unwrap();
        assert!(deg(&a, &a).abs() < 1e-6);
        assert!((deg(&a, &neg) - 180.0).abs() < 1e-6);
        assert!((deg(&a, &b) - 90.0).abs() < 1e-12);
        let zero = Gradients::zeros_like(&net);
        assert!(matches!(alignment_angle(&a, &zero), Err(Error::UndefinedAngle(_))));
    }
}
