use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Normalizes each sample (the trailing axes of a batched tensor).
    Softmax,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "softmax" => Ok(Activation::Softmax),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `f` elementwise; softmax is taken per sample over everything but
/// the leading (batch) axis of a rank ≥ 2 tensor, or over the whole vector
/// for rank 1.
pub fn activate(f: Activation, z: &Tensor) -> Tensor {
    match f {
        Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Sigmoid => z.map(sigmoid),
        Activation::Tanh => z.map(f64::tanh),
        Activation::Identity => z.clone(),
        Activation::Softmax => {
            let mut out = z.clone();
            let width = if z.rank() == 1 { z.len() } else { z.len() / z.shape()[0] };
            for row in out.data_mut().chunks_mut(width) {
                softmax_in_place(row);
            }
            out
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `f'(z)` elementwise, using the cached activation `h = f(z)` where that is
/// cheaper. Softmax has no elementwise derivative; its Jacobian is folded
/// into the cross-entropy output error instead.
pub fn activation_derivative(f: Activation, z: &Tensor, h: &Tensor) -> Result<Tensor> {
    if z.shape() != h.shape() {
        return Err(Error::dim("activation_derivative", z.shape(), h.shape()));
    }
    Ok(match f {
        Activation::Sigmoid => h.map(|v| v * (1.0 - v)),
        Activation::Tanh => h.map(|v| 1.0 - v * v),
        Activation::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Activation::Identity => Tensor::full(z.shape(), 1.0),
        Activation::Softmax => {
            return Err(Error::Contract(
                "softmax derivative is only available fused with cross-entropy".into(),
            ))
        }
    })
}
