//! Attentive statistics pooling and the utterance classifier on top of it.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_backward, softmax_rows, Checkpoint, Linear, Param, Params};

/// Guard for L2 normalization of the pooled statistics.
pub const NORM_EPS: f64 = 1e-8;

/// Second-moment weighting used by [`stat_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    /// `sum_t a_t z_t^2 - mu^2`: a proper weighted variance.
    #[default]
    Corrected,
    /// `sum_t a_t^2 z_t^2 - mu^2`: squared attention weights on the second
    /// moment. Kept for compatibility; negative values are clamped later.
    Literal,
}

/// 1x1 convolution over time, i.e. a per-frame affine map `D -> H`, with a
/// softmax along time for each head.
#[derive(Debug, Clone, PartialEq)]
pub struct Sap {
    pub proj: Linear,
}

impl Sap {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("SAP needs at least one head".into()));
        }
        Ok(Self { proj: Linear::new(dim, heads, rng) })
    }

    pub fn heads(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn dim(&self) -> usize {
        self.proj.in_dim()
    }
}

impl Params for Sap {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit(&crate::nn::join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(&crate::nn::join(prefix, "proj"), f);
    }
}

fn column_softmax(scores: &Array2<f64>) -> Array2<f64> {
    softmax_rows(&scores.t().to_owned()).reversed_axes()
}

/// Attention map `A` (T x H); every column sums to one.
pub fn sap_attention(z: &Array2<f64>, sap: &Sap) -> Array2<f64> {
    column_softmax(&sap.proj.forward(z))
}

/// Pooled statistics `(mu, sigma2)`, each D x H. `sigma2` is returned
/// unclamped.
pub fn stat_pool(z: &Array2<f64>, a: &Array2<f64>, mode: PoolMode) -> Result<(Array2<f64>, Array2<f64>)> {
    if z.nrows() != a.nrows() {
        return Err(Error::Shape(format!("features have {} frames, attention has {}", z.nrows(), a.nrows())));
    }
    let mu = z.t().dot(a);
    let sq = z.mapv(|v| v * v);
    let second = match mode {
        PoolMode::Corrected => sq.t().dot(a),
        PoolMode::Literal => sq.t().dot(&a.mapv(|v| v * v)),
    };
    let var = second - &mu * &mu;
    Ok((mu, var))
}

/// Gradients of [`stat_pool`] with respect to `z` and `a`.
pub fn stat_pool_backward(
    z: &Array2<f64>,
    a: &Array2<f64>,
    mu: &Array2<f64>,
    d_mu: &Array2<f64>,
    d_var: &Array2<f64>,
    mode: PoolMode,
) -> (Array2<f64>, Array2<f64>) {
    // var = second - mu^2
    let d_mu_total = d_mu - &(mu * d_var * 2.0);
    let mut dz = a.dot(&d_mu_total.t());
    let mut da = z.dot(&d_mu_total);
    let sq = z.mapv(|v| v * v);
    let weights = match mode {
        PoolMode::Corrected => a.clone(),
        PoolMode::Literal => a.mapv(|v| v * v),
    };
    // second[d, h] = sum_t sq[t, d] w[t, h]
    dz += &(weights.dot(&d_var.t()) * z * 2.0);
    let dw = sq.dot(d_var);
    match mode {
        PoolMode::Corrected => da += &dw,
        PoolMode::Literal => da += &(dw * a * 2.0),
    }
    (dz, da)
}

/// `v / max(|v|, eps)` and the norm used.
pub fn l2_normalize(v: &Array1<f64>) -> (Array1<f64>, f64) {
    let n = v.dot(v).sqrt().max(NORM_EPS);
    (v / n, n)
}

fn l2_normalize_backward(y: &Array1<f64>, norm: f64, dy: &Array1<f64>) -> Array1<f64> {
    if norm <= NORM_EPS {
        dy / NORM_EPS
    } else {
        (dy - &(y * y.dot(dy))) / norm
    }
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    z: Array2<f64>,
    a: Array2<f64>,
    mu: Array2<f64>,
    var_raw: Array2<f64>,
    mu_hat: Array1<f64>,
    var_hat: Array1<f64>,
    mu_norm: f64,
    var_norm: f64,
}

/// Utterance embedding: flattened `mu` and clamped `sigma2`, each scaled to
/// unit norm, `mu` first. Length `2 * D * H`.
pub fn utterance_embed(z: &Array2<f64>, sap: &Sap, mode: PoolMode) -> Result<(Array1<f64>, PoolCache)> {
    if z.ncols() != sap.dim() {
        return Err(Error::Shape(format!("features have width {}, SAP expects {}", z.ncols(), sap.dim())));
    }
    if z.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    let a = sap_attention(z, sap);
    let (mu, var_raw) = stat_pool(z, &a, mode)?;
    let flat = |m: &Array2<f64>| m.iter().copied().collect::<Array1<f64>>();
    let (mu_hat, mu_norm) = l2_normalize(&flat(&mu));
    let (var_hat, var_norm) = l2_normalize(&flat(&var_raw.mapv(|v| v.max(0.0))));
    let mut out = Array1::zeros(mu_hat.len() * 2);
    let half = mu_hat.len();
    out.slice_mut(ndarray::s![..half]).assign(&mu_hat);
    out.slice_mut(ndarray::s![half..]).assign(&var_hat);
    Ok((out, PoolCache { z: z.clone(), a, mu, var_raw, mu_hat, var_hat, mu_norm, var_norm }))
}

/// Accumulates SAP projection gradients and returns the gradient for the
/// frame features.
pub fn utterance_embed_backward(
    sap: &mut Sap,
    cache: &PoolCache,
    d_embed: &Array1<f64>,
    mode: PoolMode,
) -> Array2<f64> {
    let half = cache.mu_hat.len();
    let shape = cache.mu.dim();
    let d_mu_flat = l2_normalize_backward(&cache.mu_hat, cache.mu_norm, &d_embed.slice(ndarray::s![..half]).to_owned());
    let d_var_flat =
        l2_normalize_backward(&cache.var_hat, cache.var_norm, &d_embed.slice(ndarray::s![half..]).to_owned());
    let d_mu = d_mu_flat.into_shape_with_order(shape).expect("mu shape");
    let mut d_var = d_var_flat.into_shape_with_order(shape).expect("var shape");
    d_var.zip_mut_with(&cache.var_raw, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    let (mut dz, da) = stat_pool_backward(&cache.z, &cache.a, &cache.mu, &d_mu, &d_var, mode);
    let d_scores = softmax_backward(&cache.a.t().to_owned(), &da.t().to_owned()).reversed_axes();
    dz += &sap.proj.backward(&cache.z, &d_scores);
    dz
}

/// Attentive pooling plus a linear classifier over the pooled embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SerHead {
    pub sap: Sap,
    pub clf: Linear,
    pub mode: PoolMode,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pool: PoolCache,
    embed: Array2<f64>,
}

impl SerHead {
    pub fn new(dim: usize, heads: usize, classes: usize, mode: PoolMode, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let sap = Sap::new(dim, heads, rng)?;
        let clf = Linear::new(2 * dim * heads, classes, rng);
        Ok(Self { sap, clf, mode })
    }

    pub fn embed_dim(&self) -> usize {
        self.clf.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.clf.out_dim()
    }

    pub fn embed(&self, z: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(utterance_embed(z, &self.sap, self.mode)?.0)
    }

    pub fn classify(&self, embed: &Array1<f64>) -> Result<Array1<f64>> {
        if embed.len() != self.embed_dim() {
            return Err(Error::Shape(format!(
                "embedding has {} entries, classifier expects {}",
                embed.len(),
                self.embed_dim()
            )));
        }
        let x = embed.view().insert_axis(Axis(0)).to_owned();
        Ok(self.clf.forward(&x).row(0).to_owned())
    }

    pub fn forward(&self, z: &Array2<f64>) -> Result<(Array1<f64>, HeadCache)> {
        let (e, pool) = utterance_embed(z, &self.sap, self.mode)?;
        let logits = self.classify(&e)?;
        Ok((logits, HeadCache { pool, embed: e.insert_axis(Axis(0)) }))
    }

    /// Returns the gradient for the adapter output.
    pub fn backward(&mut self, cache: &HeadCache, d_logits: &Array1<f64>) -> Array2<f64> {
        let dy = d_logits.view().insert_axis(Axis(0)).to_owned();
        let d_embed = self.clf.backward(&cache.embed, &dy).row(0).to_owned();
        utterance_embed_backward(&mut self.sap, &cache.pool, &d_embed, self.mode)
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.put_params("sap", &self.sap);
        ckpt.put_scalar("sap/meta/literal", f64::from(u8::from(self.mode == PoolMode::Literal)));
        ckpt.put_params("clf", &self.clf);
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        let w = ckpt.array("sap/proj/weight")?;
        let c = ckpt.array("clf/weight")?;
        let mode = if ckpt.scalar("sap/meta/literal")? != 0.0 { PoolMode::Literal } else { PoolMode::Corrected };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut head = Self::new(w.nrows(), w.ncols(), c.ncols(), mode, &mut rng)?;
        ckpt.load_params("sap", &mut head.sap)?;
        ckpt.load_params("clf", &mut head.clf)?;
        Ok(head)
    }
}

impl Params for SerHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.sap.visit(&crate::nn::join(prefix, "sap"), f);
        self.clf.visit(&crate::nn::join(prefix, "clf"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.sap.visit_mut(&crate::nn::join(prefix, "sap"), f);
        self.clf.visit_mut(&crate::nn::join(prefix, "clf"), f);
    }
}

/// Cross-entropy of `logits` against `label` and its gradient.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.mapv(|l| (l - max).exp()).sum().ln();
    let mut grad = logits.mapv(|l| (l - lse).exp());
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_sap(dim: usize, heads: usize) -> Sap {
        let mut sap = Sap::new(dim, heads, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        sap.proj.weight.value.fill(0.0);
        sap.proj.bias.value.fill(0.0);
        sap
    }

    #[test]
    fn uniform_attention() {
        let sap = zero_sap(3, 4);
        let z = Array2::from_shape_fn((5, 3), |(t, d)| (t * 3 + d) as f64);
        let a = sap_attention(&z, &sap);
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let a1 = sap_attention(&z.slice(ndarray::s![..1, ..]).to_owned(), &sap);
        assert_eq!(a1, Array2::ones((1, 4)));
    }

    #[test]
    fn hand_evaluated_pooling() {
        let z = array![[1.0], [3.0]];
        let a = array![[0.5], [0.5]];
        let (mu, var) = stat_pool(&z, &a, PoolMode::Corrected).unwrap();
        assert_eq!(mu[[0, 0]], 2.0);
        assert_eq!(var[[0, 0]], 1.0);
        let (mu, var) = stat_pool(&z, &a, PoolMode::Literal).unwrap();
        assert_eq!(mu[[0, 0]], 2.0);
        assert_eq!(var[[0, 0]], -1.5);
    }

    #[test]
    fn one_hot_attention_has_no_spread() {
        let z = array![[1.0, -2.0], [3.0, 0.5], [7.0, 4.0]];
        let a = array![[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]];
        let (mu, var) = stat_pool(&z, &a, PoolMode::Corrected).unwrap();
        assert_eq!(mu.column(0), z.row(1));
        assert_eq!(mu.column(1), z.row(0));
        assert!(var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_norm_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sap = Sap::new(6, 4, &mut rng).unwrap();
        let z = Array2::from_shape_fn((7, 6), |(t, d)| ((t * 7 + d * 3) % 11) as f64 - 5.0);
        let (e, _) = utterance_embed(&z, &sap, PoolMode::Corrected).unwrap();
        assert_eq!(e.len(), 2 * 6 * 4);
        assert!((e.dot(&e).sqrt() - 2f64.sqrt()).abs() < 1e-6);
        // with uniform attention the mean half is scale-free
        let flat = zero_sap(6, 4);
        let (e1, _) = utterance_embed(&z, &flat, PoolMode::Corrected).unwrap();
        let (e2, _) = utterance_embed(&(&z * 3.5), &flat, PoolMode::Corrected).unwrap();
        for i in 0..24 {
            assert!((e1[i] - e2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = SerHead::new(3, 2, 4, PoolMode::Corrected, &mut rng).unwrap();
        head.clf.weight.value.fill(0.0);
        head.clf.bias.value = array![[0.1, -0.2, 0.3, 0.4]];
        let z = Array2::from_shape_fn((4, 3), |(t, d)| (t + d) as f64);
        let (logits, _) = head.forward(&z).unwrap();
        assert_eq!(logits, array![0.1, -0.2, 0.3, 0.4]);
        assert!(head.classify(&Array1::zeros(5)).is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        let (l, g) = cross_entropy(&Array1::zeros(4), 2);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((g.sum()).abs() < 1e-15);
        assert_eq!(argmax(&array![1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = SerHead::new(5, 3, 4, PoolMode::Literal, &mut rng).unwrap();
        let mut ckpt = Checkpoint::new();
        head.save(&mut ckpt);
        let back = SerHead::load(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.mode, PoolMode::Literal);
        assert_eq!(back.embed_dim(), 30);
        let z = Array2::from_shape_fn((4, 5), |(t, d)| (t as f64 - d as f64) * 0.3);
        let a = head.forward(&z).unwrap().0;
        let b = back.forward(&z).unwrap().0;
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
