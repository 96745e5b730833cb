use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation of the Gaussian used for affine weight init.
pub const INIT_STD: f64 = 0.02;

/// A learnable tensor with its gradient accumulator and Adam moments.
/// Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: u64,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let shape = value.raw_dim();
        Self { value, grad: Array2::zeros(shape), m: Array2::zeros(shape), v: Array2::zeros(shape), step: 0 }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(Array2::from_elem((rows, cols), v))
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and >= 0");
        Self::new(Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Replaces the value and resets optimizer state.
    pub fn reset(&mut self, value: Array2<f64>) {
        *self = Self::new(value);
    }
}

/// Joins two name segments with `/`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Anything that owns named parameters. Visiting order is fixed per type,
/// which makes every reduction over parameters deterministic.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    /// Gradients in visiting order.
    fn grads(&self) -> Vec<Array2<f64>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p.grad.clone()));
        out
    }

    /// Adds `grads` (as returned by [`Params::grads`]) into the accumulators.
    fn add_grads(&mut self, grads: &[Array2<f64>]) {
        let mut i = 0;
        self.visit_mut("", &mut |_, p| {
            p.grad += &grads[i];
            i += 1;
        });
    }

    /// Clears gradients and optimizer moments, keeping values.
    fn reset_optimizer(&mut self) {
        self.visit_mut("", &mut |_, p| {
            let value = std::mem::take(&mut p.value);
            p.reset(value);
        });
    }

    fn scale_grads(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, p| p.grad *= factor);
    }
}

impl Params for Param {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self)
    }
}
