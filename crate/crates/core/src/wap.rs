//! WAP-Transformer: patch embedding, learnable positions, a stack of pre-LN
//! transformer blocks, learnable weighted average pooling over block outputs
//! and a residual 3-layer MLP aggregation block.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    join, softmax_backward, softmax_rows, AttentionCache, Checkpoint, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache,
    MultiHeadAttention, Param, Params, INIT_STD,
};

/// How raw layer weights become pooling coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerWeighting {
    #[default]
    Softmax,
    Raw,
}

/// Where the aggregation MLP sits relative to the layer pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `output = Z + MLP(LN(Z))` with `Z` the pool of block outputs.
    #[default]
    PostPool,
    /// The MLP block output joins the pool as one more layer.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WapConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub weighting: LayerWeighting,
    pub aggregation: Aggregation,
}

impl Default for WapConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            model_dim: 384,
            heads: 6,
            ffn_dim: 1536,
            blocks: 3,
            max_len: 1024,
            weighting: LayerWeighting::Softmax,
            aggregation: Aggregation::PostPool,
        }
    }
}

impl WapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("at least one transformer block is required".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("model dim {} not divisible by {} heads", self.model_dim, self.heads)));
        }
        if self.input_dim == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Number of entries in the layer pool.
    pub fn pooled_layers(&self) -> usize {
        match self.aggregation {
            Aggregation::PostPool => self.blocks,
            Aggregation::Pooled => self.blocks + 1,
        }
    }
}

/// Pre-LN block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    norm1: LayerNormCache,
    attention: AttentionCache,
    norm2: LayerNormCache,
    ffn: MlpCache,
}

impl TransformerBlock {
    pub fn new(dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim),
            attention: MultiHeadAttention::new(dim, heads, rng)?,
            norm2: LayerNorm::new(dim),
            ffn: Mlp::new(&[dim, ffn_dim, dim], rng),
        })
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (a, norm1) = self.norm1.forward(x);
        let (att, attention) = self.attention.forward(&a);
        let h = x + &att;
        let (b, norm2) = self.norm2.forward(&h);
        let (f, ffn) = self.ffn.forward(&b);
        let y = h + f;
        (y, BlockCache { norm1, attention, norm2, ffn })
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let db = self.ffn.backward(&cache.ffn, dy);
        let dh = dy + &self.norm2.backward(&cache.norm2, &db);
        let da = self.attention.backward(&cache.attention, &dh);
        &dh + &self.norm1.backward(&cache.norm1, &da)
    }
}

impl Params for TransformerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attention.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attention.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Residual aggregation block `y = x + MLP(LN(x))` with a 3-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationBlock {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct AggregationCache {
    norm: LayerNormCache,
    mlp: MlpCache,
}

impl AggregationBlock {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self { norm: LayerNorm::new(dim), mlp: Mlp::new(&[dim, dim, dim, dim], rng) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AggregationCache) {
        let (n, norm) = self.norm.forward(x);
        let (m, mlp) = self.mlp.forward(&n);
        (x + &m, AggregationCache { norm, mlp })
    }

    pub fn backward(&mut self, cache: &AggregationCache, dy: &Array2<f64>) -> Array2<f64> {
        let dn = self.mlp.backward(&cache.mlp, dy);
        dy + &self.norm.backward(&cache.norm, &dn)
    }
}

impl Params for AggregationBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// All learnable state of one adapter branch.
#[derive(Debug, Clone, PartialEq)]
pub struct WapTransformer {
    pub config: WapConfig,
    pub patch_embed: Linear,
    pub pos_embed: Param,
    pub mask_embed: Param,
    pub blocks: Vec<TransformerBlock>,
    pub aggregation: AggregationBlock,
    pub layer_weights: Param,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    input: Array2<f64>,
    mask: Vec<bool>,
}

/// Everything the forward pass produces.
#[derive(Debug, Clone)]
pub struct WapOutput {
    /// Outputs of every pooled layer (blocks, then the aggregation block in
    /// [`Aggregation::Pooled`] mode).
    pub layers: Vec<Array2<f64>>,
    /// Pooling coefficients actually applied.
    pub coefficients: Array1<f64>,
    /// Weighted average of `layers`.
    pub pooled: Array2<f64>,
    /// Final frame embeddings.
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct WapCache {
    embed: EmbedCache,
    blocks: Vec<BlockCache>,
    aggregation: AggregationCache,
    layers: Vec<Array2<f64>>,
    coefficients: Array1<f64>,
}

impl WapTransformer {
    pub fn new(config: WapConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let patch_embed = Linear::new(config.input_dim, d, rng);
        let pos_embed = Param::normal(config.max_len, d, INIT_STD, rng);
        let mask_embed = Param::normal(1, d, INIT_STD, rng);
        let blocks = (0..config.blocks)
            .map(|_| TransformerBlock::new(d, config.heads, config.ffn_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let aggregation = AggregationBlock::new(d, rng);
        let n = config.pooled_layers();
        // both modes start from the uniform average
        let layer_weights = match config.weighting {
            LayerWeighting::Softmax => Param::zeros(1, n),
            LayerWeighting::Raw => Param::filled(1, n, 1.0 / n as f64),
        };
        Ok(Self { config, patch_embed, pos_embed, mask_embed, blocks, aggregation, layer_weights })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Projects frames, swaps masked rows for the mask embedding, then adds
    /// positional rows `0..T`.
    pub fn embed_input(&self, x: &Array2<f64>, mask: &[usize]) -> Result<(Array2<f64>, EmbedCache)> {
        let t = x.nrows();
        if t > self.config.max_len {
            return Err(Error::SequenceTooLong { len: t, max: self.config.max_len });
        }
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input frames have dim {}, adapter expects {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        let mut flags = vec![false; t];
        for &i in mask {
            if i >= t {
                return Err(Error::Shape(format!("mask position {i} outside sequence of {t}")));
            }
            flags[i] = true;
        }
        let mut h = self.patch_embed.forward(x);
        for (i, _) in flags.iter().enumerate().filter(|(_, &m)| m) {
            h.row_mut(i).assign(&self.mask_embed.value.row(0));
        }
        h += &self.pos_embed.value.slice(s![..t, ..]);
        Ok((h, EmbedCache { input: x.clone(), mask: flags }))
    }

    fn embed_backward(&mut self, cache: &EmbedCache, dh: &Array2<f64>) -> Array2<f64> {
        let t = dh.nrows();
        {
            let mut pos_grad = self.pos_embed.grad.slice_mut(s![..t, ..]);
            pos_grad += dh;
        }
        let mut dproj = dh.clone();
        for (i, &masked) in cache.mask.iter().enumerate() {
            if masked {
                let mut g = self.mask_embed.grad.row_mut(0);
                g += &dh.row(i);
                dproj.row_mut(i).fill(0.0);
            }
        }
        self.patch_embed.backward(&cache.input, &dproj)
    }

    pub fn coefficients(&self) -> Array1<f64> {
        match self.config.weighting {
            LayerWeighting::Softmax => softmax_rows(&self.layer_weights.value).row(0).to_owned(),
            LayerWeighting::Raw => self.layer_weights.value.row(0).to_owned(),
        }
    }

    /// Runs the blocks, the layer pool and the aggregation block on an
    /// embedded sequence.
    pub fn forward_embedded(&self, embedded: &Array2<f64>) -> Result<(WapOutput, Vec<BlockCache>, AggregationCache)> {
        let mut layers = Vec::with_capacity(self.config.pooled_layers());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = embedded.clone();
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(&h);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l + 1 });
            }
            layers.push(y.clone());
            caches.push(cache);
            h = y;
        }
        let coefficients = self.coefficients();
        let (pooled, output, agg_cache) = match self.config.aggregation {
            Aggregation::PostPool => {
                let pooled = weighted_sum(&layers, &coefficients);
                let (out, cache) = self.aggregation.forward(&pooled);
                (pooled, out, cache)
            }
            Aggregation::Pooled => {
                let (agg, cache) = self.aggregation.forward(&h);
                layers.push(agg);
                let pooled = weighted_sum(&layers, &coefficients);
                (pooled.clone(), pooled, cache)
            }
        };
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: self.blocks.len() + 1 });
        }
        Ok((WapOutput { layers, coefficients, pooled, output }, caches, agg_cache))
    }

    /// Full branch: embedding (with optional mask) then the backbone.
    pub fn forward(&self, x: &Array2<f64>, mask: &[usize]) -> Result<(WapOutput, WapCache)> {
        let (embedded, embed) = self.embed_input(x, mask)?;
        let (out, blocks, aggregation) = self.forward_embedded(&embedded)?;
        let cache =
            WapCache { embed, blocks, aggregation, layers: out.layers.clone(), coefficients: out.coefficients.clone() };
        Ok((out, cache))
    }

    /// Frame embeddings only.
    pub fn encode(&self, x: &Array2<f64>, mask: &[usize]) -> Result<Array2<f64>> {
        Ok(self.forward(x, mask)?.0.output)
    }

    /// Accumulates gradients of every parameter given the gradient of the
    /// final output; returns the gradient for the input frames (zero on
    /// masked rows).
    pub fn backward(&mut self, cache: &WapCache, d_output: &Array2<f64>) -> Array2<f64> {
        let n_layers = cache.layers.len();
        let d_pooled = match self.config.aggregation {
            Aggregation::PostPool => self.aggregation.backward(&cache.aggregation, d_output),
            Aggregation::Pooled => d_output.clone(),
        };
        // pooling coefficients
        let d_coef: Array1<f64> = cache.layers.iter().map(|x| (x * &d_pooled).sum()).collect();
        let d_raw = match self.config.weighting {
            LayerWeighting::Softmax => {
                let a = cache.coefficients.clone().insert_axis(Axis(0));
                softmax_backward(&a, &d_coef.insert_axis(Axis(0)))
            }
            LayerWeighting::Raw => d_coef.insert_axis(Axis(0)),
        };
        self.layer_weights.grad += &d_raw;

        let mut d_layers: Vec<Array2<f64>> = cache.coefficients.iter().map(|&a| &d_pooled * a).collect();
        if self.config.aggregation == Aggregation::Pooled {
            let d_agg = d_layers.pop().expect("aggregation layer present");
            let d_last = self.aggregation.backward(&cache.aggregation, &d_agg);
            d_layers[n_layers - 2] += &d_last;
        }
        let mut d = Array2::zeros((0, 0));
        for l in (0..self.blocks.len()).rev() {
            let dy = if l + 1 == self.blocks.len() { std::mem::take(&mut d_layers[l]) } else { &d_layers[l] + &d };
            d = self.blocks[l].backward(&cache.blocks[l], &dy);
        }
        self.embed_backward(&cache.embed, &d)
    }

    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let p = join(prefix, "wap");
        ckpt.put_params(&p, self);
        let c = &self.config;
        let meta = [
            ("heads", c.heads as f64),
            ("blocks", c.blocks as f64),
            ("ffn_dim", c.ffn_dim as f64),
            ("raw_weights", f64::from(u8::from(c.weighting == LayerWeighting::Raw))),
            ("pooled_aggregation", f64::from(u8::from(c.aggregation == Aggregation::Pooled))),
        ];
        for (k, v) in meta {
            ckpt.put_scalar(&join(&p, &format!("meta/{k}")), v);
        }
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let p = join(prefix, "wap");
        let meta = |k: &str| ckpt.scalar(&join(&p, &format!("meta/{k}")));
        let patch = ckpt.array(&join(&p, "patch_embed/weight"))?;
        let pos = ckpt.array(&join(&p, "pos_embed"))?;
        let config = WapConfig {
            input_dim: patch.nrows(),
            model_dim: patch.ncols(),
            heads: meta("heads")? as usize,
            ffn_dim: meta("ffn_dim")? as usize,
            blocks: meta("blocks")? as usize,
            max_len: pos.nrows(),
            weighting: if meta("raw_weights")? != 0.0 { LayerWeighting::Raw } else { LayerWeighting::Softmax },
            aggregation: if meta("pooled_aggregation")? != 0.0 { Aggregation::Pooled } else { Aggregation::PostPool },
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        ckpt.load_params(&p, &mut model)?;
        Ok(model)
    }
}

fn weighted_sum(layers: &[Array2<f64>], coefficients: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(layers[0].dim());
    for (x, &a) in layers.iter().zip(coefficients.iter()) {
        out.scaled_add(a, x);
    }
    out
}

impl Params for WapTransformer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        f(&join(prefix, "mask_embed"), &self.mask_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.aggregation.visit(&join(prefix, "aggregation"), f);
        f(&join(prefix, "layer_weights"), &self.layer_weights);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        f(&join(prefix, "mask_embed"), &mut self.mask_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.aggregation.visit_mut(&join(prefix, "aggregation"), f);
        f(&join(prefix, "layer_weights"), &mut self.layer_weights);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(blocks: usize) -> WapTransformer {
        let config =
            WapConfig { input_dim: 10, model_dim: 8, heads: 2, ffn_dim: 16, blocks, max_len: 32, ..Default::default() };
        WapTransformer::new(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn frames(t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |(i, j)| ((i * 13 + j * 7) % 17) as f64 / 8.0 - 1.0)
    }

    fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        diff / b.mapv(|v| v * v).sum().sqrt()
    }

    #[test]
    fn empty_mask_is_projection_plus_position() {
        let m = small(3);
        let x = frames(6, 10);
        let (h, _) = m.embed_input(&x, &[]).unwrap();
        let expected = m.patch_embed.forward(&x) + m.pos_embed.value.slice(s![..6, ..]);
        assert_eq!(h, expected);
    }

    #[test]
    fn full_mask_differs_only_by_position() {
        let m = small(3);
        let (h, _) = m.embed_input(&frames(5, 10), &[0, 1, 2, 3, 4]).unwrap();
        for t in 0..5 {
            let expected = &m.mask_embed.value.row(0) + &m.pos_embed.value.row(t);
            assert_eq!(h.row(t), expected);
        }
    }

    #[test]
    fn default_projection_width() {
        let m = WapTransformer::new(WapConfig { max_len: 16, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let (h, _) = m.embed_input(&Array2::zeros((3, 1024)), &[1]).unwrap();
        assert_eq!(h.dim(), (3, 384));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let m = small(1);
        assert!(matches!(m.embed_input(&frames(33, 10), &[]), Err(Error::SequenceTooLong { len: 33, max: 32 })));
    }

    #[test]
    fn single_layer_pool_is_identity() {
        let mut m = small(1);
        m.layer_weights.value[[0, 0]] = -3.7;
        let (out, _) = m.forward(&frames(4, 10), &[]).unwrap();
        assert_eq!(out.coefficients[0], 1.0);
        assert_eq!(out.pooled, out.layers[0]);
    }

    #[test]
    fn equal_weights_average_layers() {
        let m = small(3);
        let (out, _) = m.forward(&frames(7, 10), &[2]).unwrap();
        let mean = (&out.layers[0] + &out.layers[1] + &out.layers[2]) / 3.0;
        assert!(rel(&out.pooled, &mean) < 1e-12);
    }

    #[test]
    fn saturated_weight_selects_layer() {
        let mut m = small(3);
        m.layer_weights.value[[0, 1]] = 20.0;
        let (out, _) = m.forward(&frames(7, 10), &[]).unwrap();
        assert!(rel(&out.pooled, &out.layers[1]) < 1e-6);
    }

    #[test]
    fn coefficients_are_a_distribution() {
        let mut m = small(3);
        m.layer_weights.value = ndarray::array![[0.3, -2.0, 5.0]];
        let a = m.coefficients();
        assert!(a.iter().all(|&v| v >= 0.0));
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_aggregation_adds_a_layer() {
        let mut m = small(2);
        m.config.aggregation = Aggregation::Pooled;
        m.layer_weights = Param::zeros(1, 3);
        let (out, _) = m.forward(&frames(5, 10), &[]).unwrap();
        assert_eq!(out.layers.len(), 3);
        assert_eq!(out.output, out.pooled);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = small(3);
        let x = frames(9, 10);
        assert_eq!(m.encode(&x, &[1, 4]).unwrap(), m.encode(&x, &[1, 4]).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = small(2);
        m.config.weighting = LayerWeighting::Raw;
        m.layer_weights = Param::filled(1, 2, 0.5);
        let mut ckpt = Checkpoint::new();
        m.save(&mut ckpt, "student");
        let back = WapTransformer::load(&ckpt, "student").unwrap();
        assert_eq!(back.config, m.config);
        let x = frames(3, 10);
        let a = m.encode(&x, &[]).unwrap();
        let b = back.encode(&x, &[]).unwrap();
        let r = rel(&b, &a);
        assert!(r < 1e-5, "{r}");
    }
}
