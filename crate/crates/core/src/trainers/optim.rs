use serde::{Deserialize, Serialize};

use super::Gradients;
use crate::error::{Error, Result};
use crate::nn::{Network, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// A base step size with optional per-layer multipliers (indexed by
/// position among the parameterized layers).
#[derive(Debug, Clone, PartialEq)]
pub struct LearningRate {
    pub base: f64,
    pub layer_scale: Vec<f64>,
}

impl LearningRate {
    pub fn new(base: f64, layer_scale: Vec<f64>) -> Self {
        LearningRate { base, layer_scale }
    }

    pub fn for_param_layer(&self, k: usize) -> f64 {
        self.base * self.layer_scale.get(k).copied().unwrap_or(1.0)
    }
}

impl From<f64> for LearningRate {
    fn from(base: f64) -> Self {
        LearningRate {
            base,
            layer_scale: Vec::new(),
        }
    }
}

/// Adam moments for every parameter tensor plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    /// `(m, v)` per layer, shaped like the layer's parameters.
    moments: Vec<Option<(Params, Params)>>,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            moments: net
                .layers()
                .iter()
                .map(|l| l.params().map(|p| (p.zeros_like(), p.zeros_like())))
                .collect(),
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, layer: usize) -> Option<(&Params, &Params)> {
        self.moments[layer].as_ref().map(|(m, v)| (m, v))
    }

    pub(crate) fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one layer at the current timestep; returns the step norm.
    pub(crate) fn apply_layer(&mut self, layer: usize, params: &mut Params, grads: &Params, lr: f64) -> Result<f64> {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (m, v) = self.moments[layer]
            .as_mut()
            .ok_or_else(|| Error::Contract(format!("no Adam state for layer {layer}")))?;
        let mut sq = 0.0;
        for (p, g, m, v) in [
            (&mut params.weights, &grads.weights, &mut m.weights, &mut v.weights),
            (&mut params.bias, &grads.bias, &mut m.bias, &mut v.bias),
        ] {
            check_shape(p, g)?;
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                let step = lr * m_hat / (v_hat.sqrt() + eps);
                *p -= step;
                sq += step * step;
            }
        }
        Ok(sq.sqrt())
    }
}

fn check_shape(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::dim("optimizer update", p.shape(), g.shape()));
    }
    Ok(())
}

fn sgd_layer(params: &mut Params, grads: &Params, lr: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (p, g) in [(&mut params.weights, &grads.weights), (&mut params.bias, &grads.bias)] {
        check_shape(p, g)?;
        for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
            let step = lr * g;
            *p -= step;
            sq += step * step;
        }
    }
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &Network) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(net)),
        }
    }

    /// Starts one optimizer step; layers are then updated one at a time.
    pub(crate) fn begin_step(&mut self) {
        if let Optimizer::Adam(s) = self {
            s.begin_step();
        }
    }

    pub(crate) fn apply_layer(&mut self, layer: usize, params: &mut Params, grads: &Params, lr: f64) -> Result<f64> {
        match self {
            Optimizer::Sgd => sgd_layer(params, grads, lr),
            Optimizer::Adam(s) => s.apply_layer(layer, params, grads, lr),
        }
    }

    /// One full step over every parameterized layer. Returns per-layer step
    /// norms.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: &LearningRate) -> Result<Vec<Option<f64>>> {
        grads.check_against(net)?;
        self.begin_step();
        let mut norms = vec![None; net.depth()];
        for (k, l) in net.param_layers().into_iter().enumerate() {
            let g = grads.layer(l).expect("checked against network");
            let params = net.params_mut(l).expect("parameterized layer");
            norms[l] = Some(self.apply_layer(l, params, g, lr.for_param_layer(k))?);
        }
        Ok(norms)
    }
}

/// `p <- p - lr * g` for every parameter tensor.
pub fn sgd_update(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    Optimizer::Sgd.step(net, grads, &lr.into()).map(|_| ())
}

/// One bias-corrected Adam step; the timestep advances once per call.
pub fn adam_update(state: &mut AdamState, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    grads.check_against(net)?;
    state.begin_step();
    for l in net.param_layers() {
        let g = grads.layer(l).expect("checked against network");
        state.apply_layer(l, net.params_mut(l).expect("parameterized layer"), g, lr)?;
    }
    Ok(())
}
