//! Two-layer perceptron with hand-written backprop.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Exact (erf) GELU.
    Gelu,
    /// No nonlinearity; the head becomes affine.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = W2 · act(W1 · x + b1) + b2`, applied to each row of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// hidden x in
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// out x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    /// Uniform fan-in initialisation, `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn init<R: Rng>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let w1 = uniform(hidden, in_dim, in_dim);
        let b1 = uniform(1, hidden, in_dim).remove_axis(Axis(0));
        let w2 = uniform(out_dim, hidden, hidden);
        let b2 = uniform(1, out_dim, hidden).remove_axis(Axis(0));
        Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        }
    }

    /// Identity map (`W = I`, `b = 0`, no nonlinearity).
    pub fn identity(dim: usize) -> Self {
        Self {
            w1: Array2::eye(dim),
            b1: Array1::zeros(dim),
            w2: Array2::eye(dim),
            b2: Array1::zeros(dim),
            activation: Activation::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "head expects dim {}, input has dim {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(x)?;
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let act = self.activation;
        let hidden = pre.mapv(|v| act.apply(v));
        let out = hidden.dot(&self.w2.t()) + &self.b2;
        Ok((
            out,
            MlpCache {
                input: x.to_owned(),
                pre,
                hidden,
            },
        ))
    }

    /// Accumulate parameter gradients for upstream gradient `dy` into `grads`.
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>, grads: &mut MlpGrads) {
        grads.w2 += &dy.t().dot(&cache.hidden);
        grads.b2 += &dy.sum_axis(Axis(0));
        let mut dpre = dy.dot(&self.w2);
        let act = self.activation;
        dpre.zip_mut_with(&cache.pre, |d, &p| *d *= act.derivative(p));
        grads.w1 += &dpre.t().dot(&cache.input);
        grads.b1 += &dpre.sum_axis(Axis(0));
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    pub(crate) fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
    }
}
