//! Elementwise primitives shared by the kernels.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Pointwise nonlinearity applied between the two FFN projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Exact erf formulation (BERT convention).
    #[default]
    Gelu,
    GeluTanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu(x),
            Activation::GeluTanh => gelu_tanh(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    /// Stable numeric code used by the model file.
    pub fn code(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::GeluTanh => 1,
            Activation::Relu => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Gelu,
            1 => Activation::GeluTanh,
            2 => Activation::Relu,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

/// `x/2 · (1 + erf(x/√2))`
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

/// Layer-norm parameters for one feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(width: usize, eps: T) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerNormParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        LayerNormParams {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            eps: U::from_f64_lossy(self.eps.to_f64_lossy()),
        }
    }
}

/// Normalizes `row` in place. Mean and variance are accumulated in f64 so a
/// constant row has exactly zero deviation and collapses to `beta`.
pub fn layer_norm_in_place<T: Scalar>(row: &mut [T], params: &LayerNormParams<T>) {
    debug_assert_eq!(row.len(), params.gamma.len());
    let n = row.len() as f64;
    let mean = row.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|x| {
            let d = x.to_f64_lossy() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + params.eps.to_f64_lossy()).sqrt();
    for ((x, &g), &b) in row.iter_mut().zip(&params.gamma).zip(&params.beta) {
        let normed = T::from_f64_lossy((x.to_f64_lossy() - mean) * inv);
        *x = normed * g + b;
    }
}

pub fn layer_norm<T: Scalar>(row: &[T], params: &LayerNormParams<T>) -> Vec<T> {
    let mut out = row.to_vec();
    layer_norm_in_place(&mut out, params);
    out
}

/// Max-subtracted softmax of one row.
pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// The normalizer is summed in f64; each output carries only its own rounding.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += x.to_f64_lossy();
    }
    for x in row.iter_mut() {
        *x = T::from_f64_lossy(x.to_f64_lossy() / sum);
    }
}
