use ndarray::{Array2, Axis};
use rand::Rng;

use super::param::{join, Param, Params, INIT_STD};
use crate::error::{Error, Result};

/// `y = x W + b` for `x: N x Din`, `W: Din x Dout`, `b: 1 x Dout`.
pub fn affine_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() || b.dim() != (1, w.ncols()) {
        return Err(Error::Shape(format!("affine: x {:?}, W {:?}, b {:?}", x.dim(), w.dim(), b.dim())));
    }
    Ok(x.dot(w) + b)
}

/// Returns `(dx, dW, db)` for upstream gradient `dy`.
pub fn affine_backward(x: &Array2<f64>, w: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self::with_std(din, dout, INIT_STD, rng)
    }

    pub fn with_std(din: usize, dout: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self { weight: Param::normal(din, dout, std, rng), bias: Param::zeros(1, dout) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.in_dim());
        x.dot(&self.weight.value) + &self.bias.value
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let (dx, dw, db) = affine_backward(x, &self.weight.value, dy);
        self.weight.grad += &dw;
        self.bias.grad += &db;
        dx
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
