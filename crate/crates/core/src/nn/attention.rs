use ndarray::{s, Array2};
use rand::Rng;

use super::linear::Linear;
use super::param::{join, Param, Params};
use super::softmax::{softmax_backward, softmax_rows};
use crate::error::{Error, Result};

/// Bidirectional scaled dot-product self-attention over a `T x D` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
}

impl AttentionCache {
    /// Attention weights of head `h` (`T x T`, rows are queries).
    pub fn weights(&self, h: usize) -> &Array2<f64> {
        &self.probs[h]
    }
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut context = Array2::zeros(x.dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let y = self.output.forward(&context);
        let cache = AttentionCache { x: x.clone(), q, k, v, probs, context };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let dcontext = self.output.backward(&cache.context, dy);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let dctx = dcontext.slice(cols);
            let dp = dctx.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let dscores = softmax_backward(p, &dp) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.query.backward(&cache.x, &dq);
        dx += &self.key.backward(&cache.x, &dk);
        dx += &self.value.backward(&cache.x, &dv);
        dx
    }
}

impl Params for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
