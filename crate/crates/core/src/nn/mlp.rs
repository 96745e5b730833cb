use ndarray::Array2;
use rand::Rng;

use super::linear::Linear;
use super::param::{join, Param, Params};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Stack of affine layers with GELU between consecutive layers (none after
/// the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of every layer but the last.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [d0, d1, ..., dn]` builds `n` layers.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&h);
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = out.mapv(gelu);
                pre.push(out);
            } else {
                h = out;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = g * cache.pre[i].mapv(gelu_grad);
            }
            g = self.layers[i].backward(&cache.inputs[i], &g);
        }
        g
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_6).abs() < 1e-9);
        assert!((gelu(-3.0) + 0.003_637_392).abs() < 1e-8);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9);
        }
    }
}
