use ndarray::{Array2, Axis};

use super::param::{join, Param, Params};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array2<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Param::filled(1, dim, 1.0), bias: Param::zeros(1, dim), eps: DEFAULT_LN_EPS }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let normalized = centered * &inv_std;
        let y = &normalized * &self.gain.value + &self.bias.value;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let xhat = &cache.normalized;
        self.gain.grad += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gain.value;
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
        (dxhat - &mean_dxhat - xhat * &mean_dxhat_xhat) * &cache.inv_std
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
