//! Elementwise activations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error};
use crate::tensor::Scalar;

/// sqrt(2 / pi), the tanh-GELU input scale.
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    /// Swish with beta = 1: `x * sigmoid(x)`.
    Silu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "silu" | "swish" => Ok(Activation::Silu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(config_err!("unknown activation '{other}'")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    x.sigmoid()
}

impl Activation {
    /// Applies the activation, filling `aux` with whatever the backward pass
    /// needs (sigmoid for silu/sigmoid, tanh term for gelu, nothing for relu).
    pub fn forward<T: Scalar>(self, x: &[T], y: &mut [T], aux: &mut Vec<T>) {
        aux.clear();
        match self {
            Activation::Relu => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = if v > T::zero() { v } else { T::zero() };
                }
            }
            Activation::Sigmoid => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = sigmoid(v);
                }
            }
            Activation::Silu => {
                aux.resize(x.len(), T::zero());
                for ((o, a), &v) in y.iter_mut().zip(aux.iter_mut()).zip(x) {
                    let s = sigmoid(v);
                    *a = s;
                    *o = v * s;
                }
            }
            Activation::Gelu => {
                let (k, c) = (T::from_f64_lossy(GELU_SCALE), T::from_f64_lossy(GELU_CUBIC));
                let half = T::from_f64_lossy(0.5);
                aux.resize(x.len(), T::zero());
                for ((o, a), &v) in y.iter_mut().zip(aux.iter_mut()).zip(x) {
                    let t = (k * (v + c * v * v * v)).tanh_act();
                    *a = t;
                    *o = half * v * (T::one() + t);
                }
            }
        }
    }

    /// Accumulates `dx += dy * f'(x)`.
    pub fn backward<T: Scalar>(self, x: &[T], y: &[T], aux: &[T], dy: &[T], dx: &mut [T]) {
        match self {
            Activation::Relu => {
                for ((o, &d), &v) in dx.iter_mut().zip(dy).zip(x) {
                    if v > T::zero() {
                        *o += d;
                    }
                }
            }
            Activation::Sigmoid => {
                for ((o, &d), &s) in dx.iter_mut().zip(dy).zip(y) {
                    *o += d * s * (T::one() - s);
                }
            }
            Activation::Silu => {
                for (((o, &d), &v), &s) in dx.iter_mut().zip(dy).zip(x).zip(aux) {
                    *o += d * s * (T::one() + v * (T::one() - s));
                }
            }
            Activation::Gelu => {
                let (k, c) = (T::from_f64_lossy(GELU_SCALE), T::from_f64_lossy(GELU_CUBIC));
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                for (((o, &d), &v), &t) in dx.iter_mut().zip(dy).zip(x).zip(aux) {
                    let du = k * (T::one() + three * c * v * v);
                    *o += d * (half * (T::one() + t) + half * v * (T::one() - t * t) * du);
                }
            }
        }
    }
}
