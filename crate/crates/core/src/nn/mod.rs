//! Layers, networks and the caching forward pass.
//!
//! Every layer works on batched tensors whose leading axis is the sample
//! index. A dense layer computes `z = h W^T + b` per row, which is the
//! per-sample `z = W h + b` with `W` stored as `[outputs, inputs]`.

mod activation;
mod checkpoint;

pub use activation::{activate, activation_derivative, sigmoid, Activation};
pub use checkpoint::{write_atomic, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_kernels, conv2d_forward, maxpool2d, maxpool2d_backward,
    ArgmaxIndices, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    MaxPool2d {
        pool: usize,
    },
    /// Row-major flatten of everything after the batch axis.
    Flatten,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    fn param_shapes(self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            LayerKind::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => Some((
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    fn fans(self) -> (usize, usize) {
        match self {
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => (
                in_channels * kernel_h * kernel_w,
                out_channels * kernel_h * kernel_w,
            ),
            _ => (0, 0),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (LayerKind::Dense { inputs, outputs }, [n]) if *n == inputs => Ok(vec![outputs]),
            (
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                },
                [c, h, w],
            ) if *c == in_channels && kernel_h <= *h && kernel_w <= *w => {
                Ok(vec![out_channels, h - kernel_h + 1, w - kernel_w + 1])
            }
            (LayerKind::MaxPool2d { pool }, [c, h, w])
                if pool > 0 && h % pool == 0 && w % pool == 0 =>
            {
                Ok(vec![*c, h / pool, w / pool])
            }
            (LayerKind::Flatten, [_, ..]) => Ok(vec![input.iter().product()]),
            _ => Err(Error::Config(format!(
                "layer {self:?} cannot accept input of shape {input:?}"
            ))),
        }
    }
}

/// Weight initialization. `Auto` picks He-uniform for ReLU layers and
/// Xavier-uniform for everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Auto,
    HeUniform,
    XavierUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    kind: LayerKind,
    activation: Activation,
    params: Option<Params>,
}

impl Layer {
    /// A parameterized layer with explicit weights and bias.
    pub fn with_params(kind: LayerKind, activation: Activation, params: Params) -> Result<Layer> {
        let Some((w, b)) = kind.param_shapes() else {
            return Err(Error::Config(format!("{kind:?} carries no parameters")));
        };
        if params.weights.shape() != w.as_slice() {
            return Err(Error::dim("layer weights", params.weights.shape(), &w));
        }
        if params.bias.shape() != b.as_slice() {
            return Err(Error::dim("layer bias", params.bias.shape(), &b));
        }
        Ok(Layer {
            kind,
            activation,
            params: Some(params),
        })
    }

    /// A parameterized layer with seeded random weights and zero bias.
    pub fn init(
        kind: LayerKind,
        activation: Activation,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> Result<Layer> {
        let Some((w, b)) = kind.param_shapes() else {
            return Err(Error::Config(format!("{kind:?} carries no parameters")));
        };
        let (fan_in, fan_out) = kind.fans();
        let he = match scheme {
            InitScheme::Auto => activation == Activation::Relu,
            InitScheme::HeUniform => true,
            InitScheme::XavierUniform => false,
        };
        let limit = if he {
            (6.0 / fan_in as f64).sqrt()
        } else {
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        };
        let n = w.iter().product();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Layer::with_params(
            kind,
            activation,
            Params {
                weights: Tensor::new(w, weights)?,
                bias: Tensor::zeros(&b),
            },
        )
    }

    pub fn max_pool(pool: usize) -> Layer {
        Layer {
            kind: LayerKind::MaxPool2d { pool },
            activation: Activation::Identity,
            params: None,
        }
    }

    pub fn flatten() -> Layer {
        Layer {
            kind: LayerKind::Flatten,
            activation: Activation::Identity,
            params: None,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> Option<&Params> {
        self.params.as_ref()
    }

    fn validate(&self) -> Result<()> {
        match (&self.params, self.kind.param_shapes()) {
            (Some(p), Some((w, b))) => {
                if p.weights.shape() != w.as_slice() {
                    return Err(Error::dim("layer weights", p.weights.shape(), &w));
                }
                if p.bias.shape() != b.as_slice() {
                    return Err(Error::dim("layer bias", p.bias.shape(), &b));
                }
                Ok(())
            }
            (None, None) if self.activation == Activation::Identity => Ok(()),
            (None, None) => Err(Error::Config(format!(
                "{:?} must use the identity activation",
                self.kind
            ))),
            _ => Err(Error::Config(format!(
                "parameters do not match layer kind {:?}",
                self.kind
            ))),
        }
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// An ordered stack of layers with validated shapes.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Changes on every parameter mutation; forward caches record it.
    generation: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Network> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        let last = layers.len() - 1;
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if layer.activation == Activation::Softmax && i != last {
                return Err(Error::Config(format!(
                    "softmax is only allowed on the final layer (found at layer {i})"
                )));
            }
            shape = layer.kind.output_shape(&shape)?;
        }
        Ok(Network {
            input_shape,
            layers,
            generation: next_generation(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Per-sample shapes of every layer output, in order.
    pub fn layer_output_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = l.kind.output_shape(&shape).expect("validated at construction");
                shape.clone()
            })
            .collect()
    }

    pub fn output_len(&self) -> usize {
        self.layer_output_shapes().last().map_or(0, |s| s.iter().product())
    }

    /// Indices of layers with trainable parameters.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].params.is_some())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params.as_ref()).map(Params::len).sum()
    }

    /// Mutable access to one layer's parameters. Invalidates forward caches.
    pub fn params_mut(&mut self, layer: usize) -> Option<&mut Params> {
        self.generation = next_generation();
        self.layers[layer].params.as_mut()
    }

    /// Replaces all parameters with those of `other`, which must share this
    /// network's architecture.
    pub fn load_params_from(&mut self, other: &Network) -> Result<()> {
        if self.input_shape != other.input_shape
            || self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.kind != b.kind || a.activation != b.activation)
        {
            return Err(Error::Config("architectures differ".into()));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.params.clone_from(&src.params);
        }
        self.generation = next_generation();
        Ok(())
    }

    fn batched_input(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() == self.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(&self.input_shape);
            return x.reshape(&shape);
        }
        if x.rank() == self.input_shape.len() + 1 && x.shape()[1..] == self.input_shape[..] {
            return Ok(x.clone());
        }
        Err(Error::dim("forward_pass input", x.shape(), &self.input_shape))
    }

    /// Network outputs for a batch without keeping intermediate values.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.batched_input(x)?;
        for layer in &self.layers {
            let (z, _) = layer_forward(layer, &h)?;
            h = activate(layer.activation, &z);
        }
        Ok(h)
    }
}

/// Pre-activation and activation of one layer for a batch.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub pre_activation: Tensor,
    pub activation: Tensor,
    /// One entry per sample for max-pool layers, empty otherwise.
    pub argmax: Vec<ArgmaxIndices>,
}

/// Everything the learning rules need from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Tensor,
    pub layers: Vec<LayerCache>,
    generation: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.layers.last().expect("non-empty network").activation
    }

    pub fn batch_size(&self) -> usize {
        self.input.shape()[0]
    }

    /// Activation feeding layer `l` (the input for `l == 0`).
    pub fn layer_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].activation
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Errors unless this cache was produced from `net`'s current parameters.
    pub fn ensure_fresh(&self, net: &Network) -> Result<()> {
        if self.generation != net.generation || self.layers.len() != net.depth() {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the network on `x` (`[batch, ..input_shape]`, or a single unbatched
/// sample which is treated as a batch of one) and records `z_l` and
/// `h_l = f(z_l)` for every layer.
pub fn forward_pass(net: &Network, x: &Tensor) -> Result<ForwardCache> {
    let input = net.batched_input(x)?;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(net.depth());
    for layer in &net.layers {
        let h_prev = layers.last().map_or(&input, |c| &c.activation);
        let (z, argmax) = layer_forward(layer, h_prev)?;
        let h = activate(layer.activation, &z);
        layers.push(LayerCache {
            pre_activation: z,
            activation: h,
            argmax,
        });
    }
    Ok(ForwardCache {
        input,
        layers,
        generation: net.generation,
    })
}

fn per_sample(t: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let shape = t.shape()[1..].to_vec();
    let n: usize = shape.iter().product();
    t.data()
        .chunks(n)
        .map(move |c| Tensor::from_parts(shape.clone(), c.to_vec()))
}

fn stack(batch: usize, parts: Vec<Tensor>) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_parts(shape, data)
}

fn layer_forward(layer: &Layer, h: &Tensor) -> Result<(Tensor, Vec<ArgmaxIndices>)> {
    let batch = h.shape()[0];
    match layer.kind {
        LayerKind::Dense { .. } => {
            let p = layer.params.as_ref().expect("dense layer has params");
            let mut z = h.matmul(&p.weights.transpose()?)?;
            let width = p.bias.len();
            for row in z.data_mut().chunks_mut(width) {
                for (v, b) in row.iter_mut().zip(p.bias.data()) {
                    *v += b;
                }
            }
            Ok((z, Vec::new()))
        }
        LayerKind::Conv2d { .. } => {
            let p = layer.params.as_ref().expect("conv layer has params");
            let outs = per_sample(h)
                .map(|x| conv2d_forward(&x, &p.weights, &p.bias))
                .collect::<Result<Vec<_>>>()?;
            Ok((stack(batch, outs), Vec::new()))
        }
        LayerKind::MaxPool2d { pool } => {
            let (outs, idx): (Vec<_>, Vec<_>) = per_sample(h)
                .map(|x| maxpool2d(&x, pool))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            Ok((stack(batch, outs), idx))
        }
        LayerKind::Flatten => Ok((h.flatten_batch(), Vec::new())),
    }
}

/// Batch-mean parameter gradients of a layer given its error signal
/// `delta = dL/dz` (per sample, unscaled) and its input activation.
pub fn param_gradients(kind: LayerKind, input: &Tensor, delta: &Tensor) -> Result<Option<Params>> {
    let batch = input.shape()[0];
    let inv = 1.0 / batch as f64;
    match kind {
        LayerKind::Dense { .. } => {
            let weights = delta.transpose()?.matmul(input)?.scale(inv);
            let width = delta.shape()[1];
            let mut bias = vec![0.0; width];
            for row in delta.data().chunks(width) {
                for (b, d) in bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            let bias = Tensor::from_parts(vec![width], bias).scale(inv);
            Ok(Some(Params { weights, bias }))
        }
        LayerKind::Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let mut weights: Option<Tensor> = None;
            let mut bias = vec![0.0; out_channels];
            for (x, d) in per_sample(input).zip(per_sample(delta)) {
                let g = conv2d_backward_kernels(&x, &d, kernel_h, kernel_w)?;
                match weights.as_mut() {
                    Some(w) => w.axpy(1.0, &g)?,
                    None => weights = Some(g),
                }
                let plane = d.len() / out_channels;
                for (b, chunk) in bias.iter_mut().zip(d.data().chunks(plane)) {
                    *b += chunk.iter().sum::<f64>();
                }
            }
            Ok(Some(Params {
                weights: weights.expect("non-empty batch").scale(inv),
                bias: Tensor::from_parts(vec![out_channels], bias).scale(inv),
            }))
        }
        LayerKind::MaxPool2d { .. } | LayerKind::Flatten => Ok(None),
    }
}

/// `dL/dh_{l-1}` from `delta = dL/dz_l`, reading the weights from `params`
/// (which need not be the layer's current weights).
pub fn input_gradient(
    kind: LayerKind,
    params: Option<&Params>,
    cache: &LayerCache,
    input: &Tensor,
    delta: &Tensor,
) -> Result<Tensor> {
    let batch = input.shape()[0];
    let sample_shape = &input.shape()[1..];
    match kind {
        LayerKind::Dense { .. } => {
            let p = params.ok_or_else(|| Error::Contract("dense layer without params".into()))?;
            delta.matmul(&p.weights)
        }
        LayerKind::Conv2d { .. } => {
            let p = params.ok_or_else(|| Error::Contract("conv layer without params".into()))?;
            let parts = per_sample(delta)
                .map(|d| conv2d_backward_input(&p.weights, &d, sample_shape))
                .collect::<Result<Vec<_>>>()?;
            Ok(stack(batch, parts))
        }
        LayerKind::MaxPool2d { .. } => {
            let parts = per_sample(delta)
                .zip(&cache.argmax)
                .map(|(d, idx)| maxpool2d_backward(&d, idx))
                .collect::<Result<Vec<_>>>()?;
            Ok(stack(batch, parts))
        }
        LayerKind::Flatten => delta.reshape(input.shape()),
    }
}

/// Dense layers with the given widths; hidden layers use
/// `hidden_activation`, the last layer softmax.
pub fn build_mlp(dims: &[usize], hidden_activation: Activation, seed: u64) -> Result<Network> {
    build_mlp_with(dims, hidden_activation, InitScheme::Auto, seed)
}

pub fn build_mlp_with(
    dims: &[usize],
    hidden_activation: Activation,
    scheme: InitScheme,
    seed: u64,
) -> Result<Network> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!(
            "an MLP needs at least two positive widths, got {dims:?}"
        )));
    }
    if hidden_activation == Activation::Softmax {
        return Err(Error::Config("softmax cannot be a hidden activation".into()));
    }
    let mut rng = rng::stream(seed, rng::STREAM_INIT);
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last { Activation::Softmax } else { hidden_activation };
            Layer::init(
                LayerKind::Dense {
                    inputs: w[0],
                    outputs: w[1],
                },
                act,
                scheme,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(vec![dims[0]], layers)
}

/// An MLP that reads image-shaped samples: a flatten layer (when the input
/// has more than one axis) followed by `build_mlp` over
/// `[prod(input_shape), ..widths]`.
pub fn build_image_mlp(
    input_shape: &[usize],
    widths: &[usize],
    hidden_activation: Activation,
    seed: u64,
) -> Result<Network> {
    let flat: usize = input_shape.iter().product();
    let dims: Vec<usize> = std::iter::once(flat).chain(widths.iter().copied()).collect();
    let mlp = build_mlp(&dims, hidden_activation, seed)?;
    if input_shape.len() <= 1 {
        return Ok(mlp);
    }
    let mut layers = vec![Layer::flatten()];
    layers.extend(mlp.layers);
    Network::new(input_shape.to_vec(), layers)
}

/// conv32(3x3, ReLU) -> conv64(3x3, ReLU) -> maxpool(2) -> flatten ->
/// dense512(ReLU) -> dense(num_classes, softmax), for 1x28x28 or 3x32x32
/// inputs.
pub fn build_standard_cnn(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    if input_shape != [1, 28, 28] && input_shape != [3, 32, 32] {
        return Err(Error::Config(format!(
            "unsupported CNN input shape {input_shape:?} (expected [1, 28, 28] or [3, 32, 32])"
        )));
    }
    build_cnn(input_shape, &[32, 64], 512, num_classes, Activation::Relu, seed)
}

/// Two stacked 3x3 convolutions, 2x2 max-pool, one hidden dense layer and a
/// softmax head. `build_standard_cnn` is this with 32/64 filters and 512 units.
pub fn build_cnn(
    input_shape: &[usize],
    filters: &[usize],
    hidden: usize,
    num_classes: usize,
    activation: Activation,
    seed: u64,
) -> Result<Network> {
    let [channels, _, _] = input_shape[..] else {
        return Err(Error::Config(format!("CNN input must be [C, H, W], got {input_shape:?}")));
    };
    let mut rng = rng::stream(seed, rng::STREAM_INIT);
    let mut layers = Vec::new();
    let mut in_ch = channels;
    for &f in filters {
        layers.push(Layer::init(
            LayerKind::Conv2d {
                in_channels: in_ch,
                out_channels: f,
                kernel_h: 3,
                kernel_w: 3,
            },
            activation,
            InitScheme::Auto,
            &mut rng,
        )?);
        in_ch = f;
    }
    layers.push(Layer::max_pool(2));
    layers.push(Layer::flatten());
    let mut shape = input_shape.to_vec();
    for l in &layers {
        shape = l.kind.output_shape(&shape)?;
    }
    let flat = shape[0];
    layers.push(Layer::init(
        LayerKind::Dense {
            inputs: flat,
            outputs: hidden,
        },
        activation,
        InitScheme::Auto,
        &mut rng,
    )?);
    layers.push(Layer::init(
        LayerKind::Dense {
            inputs: hidden,
            outputs: num_classes,
        },
        Activation::Softmax,
        InitScheme::Auto,
        &mut rng,
    )?);
    Network::new(input_shape.to_vec(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(w: &[&[f64]], b: &[f64], act: Activation) -> Layer {
        let weights = Tensor::from_rows(w).unwrap();
        let kind = LayerKind::Dense {
            inputs: weights.shape()[1],
            outputs: weights.shape()[0],
        };
        Layer::with_params(
            kind,
            act,
            Params {
                weights,
                bias: Tensor::vector(b.to_vec()).unwrap(),
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_layer() {
        let net = Network::new(
            vec![2],
            vec![dense(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity)],
        )
        .unwrap();
        let cache = forward_pass(&net, &Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(cache.output().data(), &[3.0, 4.0]);
        assert_eq!(cache.layers.len(), 1);
    }

    #[test]
    fn sigmoid_unit() {
        let net = Network::new(vec![2], vec![dense(&[&[1.0, 1.0]], &[0.5], Activation::Sigmoid)]).unwrap();
        let cache = forward_pass(&net, &Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(cache.layers[0].pre_activation.data(), &[0.5]);
        assert!((cache.output().data()[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn input_shape_mismatch() {
        let net = build_mlp(&[4, 3], Activation::Relu, 0).unwrap();
        assert!(matches!(
            forward_pass(&net, &Tensor::zeros(&[2, 5])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mlp_parameter_count_and_layers() {
        let net = build_mlp(&[784, 128, 10], Activation::Relu, 1).unwrap();
        assert_eq!(net.depth(), 2);
        assert_eq!(net.param_count(), 784 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(net.param_count(), 101_770);
        let single = build_mlp(&[4, 3], Activation::Relu, 1).unwrap();
        assert_eq!(single.depth(), 1);
        assert_eq!(single.layers()[0].activation(), Activation::Softmax);
        assert!(build_mlp(&[], Activation::Relu, 1).is_err());
        assert!(build_mlp(&[5], Activation::Relu, 1).is_err());

        let image = build_image_mlp(&[1, 28, 28], &[128, 10], Activation::Relu, 1).unwrap();
        assert_eq!(image.layers()[0].kind(), LayerKind::Flatten);
        assert_eq!(image.param_count(), 101_770);
        assert_eq!(image.layers()[1], net.layers()[0]);
    }

    #[test]
    fn mlp_init_is_seeded() {
        let a = build_mlp(&[20, 7, 3], Activation::Tanh, 42).unwrap();
        let b = build_mlp(&[20, 7, 3], Activation::Tanh, 42).unwrap();
        let c = build_mlp(&[20, 7, 3], Activation::Tanh, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn standard_cnn_shape_chains() {
        let mnist = build_standard_cnn(&[1, 28, 28], 10, 0).unwrap();
        assert_eq!(
            mnist.layer_output_shapes(),
            vec![
                vec![32, 26, 26],
                vec![64, 24, 24],
                vec![64, 12, 12],
                vec![9216],
                vec![512],
                vec![10]
            ]
        );
        let cifar = build_standard_cnn(&[3, 32, 32], 10, 0).unwrap();
        assert_eq!(
            cifar.layer_output_shapes(),
            vec![
                vec![32, 30, 30],
                vec![64, 28, 28],
                vec![64, 14, 14],
                vec![12544],
                vec![512],
                vec![10]
            ]
        );
        let head = cifar.layers().last().unwrap();
        assert_eq!(head.activation(), Activation::Softmax);
        assert_eq!(head.kind(), LayerKind::Dense { inputs: 512, outputs: 10 });
        assert!(build_standard_cnn(&[1, 32, 32], 10, 0).is_err());
    }

    #[test]
    fn standard_cnn_forward_produces_distribution() {
        let net = build_standard_cnn(&[1, 28, 28], 10, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..784).map(|_| rng.random_range(0.0..1.0)).collect();
        let cache = forward_pass(&net, &Tensor::new(vec![1, 1, 28, 28], x).unwrap()).unwrap();
        let out = cache.output();
        assert_eq!(out.shape(), &[1, 10]);
        assert!((out.sum() - 1.0).abs() < 1e-12);
        assert!(out.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn construction_rejects_inconsistent_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let soft = Layer::init(
            LayerKind::Dense { inputs: 3, outputs: 3 },
            Activation::Softmax,
            InitScheme::Auto,
            &mut rng,
        )
        .unwrap();
        assert!(Network::new(vec![3], vec![soft.clone(), soft.clone()]).is_err());
        let d = Layer::init(
            LayerKind::Dense { inputs: 4, outputs: 2 },
            Activation::Relu,
            InitScheme::Auto,
            &mut rng,
        )
        .unwrap();
        assert!(Network::new(vec![3], vec![d]).is_err());
        assert!(Network::new(vec![1, 5, 5], vec![Layer::max_pool(2)]).is_err());
        let bad = Layer::with_params(
            LayerKind::Dense { inputs: 2, outputs: 2 },
            Activation::Relu,
            Params {
                weights: Tensor::zeros(&[2, 3]),
                bias: Tensor::zeros(&[2]),
            },
        );
        assert!(bad.is_err());
    }

    #[test]
    fn cache_is_self_consistent_and_tracks_staleness() {
        let mut net = build_cnn(&[1, 6, 6], &[2], 4, 3, Activation::Tanh, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 1, 6, 6], x).unwrap();
        let cache = forward_pass(&net, &x).unwrap();
        for (layer, c) in net.layers().iter().zip(&cache.layers) {
            assert_eq!(activate(layer.activation(), &c.pre_activation), c.activation);
        }
        assert_eq!(net.predict(&x).unwrap(), *cache.output());
        cache.ensure_fresh(&net).unwrap();
        net.params_mut(0).unwrap().bias.data_mut()[0] += 1.0;
        assert!(cache.ensure_fresh(&net).is_err());
    }

    #[test]
    fn dense_gradients_have_parameter_shapes() {
        let net = build_mlp(&[3, 4, 2], Activation::Sigmoid, 5).unwrap();
        let x = Tensor::full(&[3, 3], 0.5);
        let cache = forward_pass(&net, &x).unwrap();
        let delta = Tensor::full(&[3, 2], 1.0);
        let g = param_gradients(net.layers()[1].kind(), cache.layer_input(1), &delta)
            .unwrap()
            .unwrap();
        assert_eq!(g.weights.shape(), &[2, 4]);
        assert_eq!(g.bias.data(), &[1.0, 1.0]);
    }
}
