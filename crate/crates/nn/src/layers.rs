use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Silu,
}

const LEAKY_SLOPE: f32 = 0.2;

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => (x > 0.0) as u8 as f32,
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            "silu" | "swish" => Ok(Activation::Silu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Silu => "silu",
        })
    }
}

/// Square-kernel 2-D convolution with bias and zero padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Uniform init with variance `1 / fan_in`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f32;
        let bound = (3.0 / fan_in).sqrt();
        let data = (0..cout * cin * k * k).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::from_vec([cout, cin, k, k], data));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        Self { weight, bias, stride, pad: k / 2 }
    }

    /// Same layer, weights and bias set to zero (residual branch outputs).
    pub fn new_zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        Self { weight, bias, stride: 1, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Fully connected layer on `[N, C, 1, 1]` tensors (a pointwise convolution).
#[derive(Clone, Debug)]
pub struct Linear(Conv2d);

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Linear(Conv2d::new(store, name, din, dout, 1, 1, rng))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.0.forward(g, store, x)
    }
}
