//! Finite-difference checks for every differentiable component, from single
//! primitives up to the full backbone and the classification head.
//!
//! Each check differentiates a scalar `sum(y * R)` (fixed random `R`) or a
//! real loss, with respect to the parameters and the input.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codebook::{Codebook, EtaMode};
use crate::nn::{
    grad_check, softmax_backward, softmax_rows, GradCheckReport, LayerNorm, Linear, Mlp, MultiHeadAttention, Param,
    Params,
};
use crate::sap::{cross_entropy, PoolMode, SerHead};
use crate::ssl::rec_loss;
use crate::wap::{Aggregation, AggregationBlock, LayerWeighting, TransformerBlock, WapConfig, WapTransformer};

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for deep compositions.
pub const COMPOSITE_TOL: f64 = 1e-3;

const STEP: f64 = 1e-3;
const MAX_COORDS: usize = crate::nn::gradcheck::DEFAULT_MAX_COORDS;

#[derive(Debug, Clone)]
pub struct GradSuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl GradSuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// A model together with its input as a trainable tensor, so one check
/// covers both parameter and input gradients.
#[derive(Debug, Clone)]
struct Probe<M> {
    model: M,
    input: Param,
}

impl<M: Params> Params for Probe<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.input.visit(&crate::nn::join(prefix, "input"), f);
        self.model.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.input.visit_mut(&crate::nn::join(prefix, "input"), f);
        self.model.visit_mut(prefix, f);
    }
}

#[derive(Debug, Clone, Default)]
struct NoParams;

impl Params for NoParams {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Moves every parameter off its structured initialization so that no
/// gradient is trivially zero.
fn randomize<M: Params>(model: &mut M, std: f64, rng: &mut impl Rng) {
    model.visit_mut("", &mut |_, p| {
        let (r, c) = p.value.dim();
        p.reset(randn(r, c, std, rng));
    });
}

fn probe<M: Params>(mut model: M, input: Array2<f64>, rng: &mut impl Rng) -> Probe<M> {
    randomize(&mut model, 0.3, rng);
    Probe { model, input: Param::new(input) }
}

/// Runs the check for `loss(probe) = sum(forward(probe) * r)`.
#[allow(clippy::too_many_arguments)]
fn check_projection<M, F, B>(
    name: &'static str,
    tolerance: f64,
    probe: &Probe<M>,
    r: &Array2<f64>,
    forward: F,
    backward: B,
    sabotage: bool,
    seed: u64,
) -> GradSuiteEntry
where
    M: Params + Clone,
    F: Fn(&Probe<M>) -> Array2<f64>,
    B: Fn(&mut Probe<M>, &Array2<f64>) -> Array2<f64>,
{
    let report = grad_check(
        probe,
        |p| (forward(p) * r).sum(),
        |p| {
            let dx = backward(p, r);
            p.input.grad += &dx;
            if sabotage {
                p.scale_grads(-1.0);
            }
        },
        STEP,
        MAX_COORDS,
        seed,
    );
    GradSuiteEntry { name, tolerance, report }
}

fn small_wap(rng: &mut impl Rng, aggregation: Aggregation, weighting: LayerWeighting) -> WapTransformer {
    let config = WapConfig {
        input_dim: 16,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        blocks: 2,
        max_len: 8,
        weighting,
        aggregation,
    };
    let mut m = WapTransformer::new(config, rng).expect("valid config");
    randomize(&mut m, 0.2, rng);
    m
}

/// All checks. With `sabotage` every analytic gradient has its sign flipped,
/// which must make every check fail.
pub fn run_grad_suite(sabotage: bool, seed: u64) -> Vec<GradSuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let p = probe(Linear::new(5, 4, &mut rng), randn(3, 5, 1.0, &mut rng), &mut rng);
    let r = randn(3, 4, 1.0, &mut rng);
    out.push(check_projection(
        "affine",
        PRIMITIVE_TOL,
        &p,
        &r,
        |p| p.model.forward(&p.input.value),
        |p, dy| {
            let x = p.input.value.clone();
            p.model.backward(&x, dy)
        },
        sabotage,
        seed,
    ));

    let p = probe(LayerNorm::new(6), randn(4, 6, 1.5, &mut rng), &mut rng);
    let r = randn(4, 6, 1.0, &mut rng);
    out.push(check_projection(
        "layer_norm",
        PRIMITIVE_TOL,
        &p,
        &r,
        |p| p.model.forward(&p.input.value).0,
        |p, dy| {
            let (_, cache) = p.model.forward(&p.input.value);
            p.model.backward(&cache, dy)
        },
        sabotage,
        seed,
    ));

    let p = probe(NoParams, randn(3, 5, 2.0, &mut rng), &mut rng);
    let r = randn(3, 5, 1.0, &mut rng);
    out.push(check_projection(
        "softmax",
        PRIMITIVE_TOL,
        &p,
        &r,
        |p| softmax_rows(&p.input.value),
        |p, dy| softmax_backward(&softmax_rows(&p.input.value), dy),
        sabotage,
        seed,
    ));

    let p = probe(Mlp::new(&[6, 10, 4], &mut rng), randn(3, 6, 1.0, &mut rng), &mut rng);
    let r = randn(3, 4, 1.0, &mut rng);
    out.push(check_projection(
        "gelu_mlp",
        PRIMITIVE_TOL,
        &p,
        &r,
        |p| p.model.forward(&p.input.value).0,
        |p, dy| {
            let (_, cache) = p.model.forward(&p.input.value);
            p.model.backward(&cache, dy)
        },
        sabotage,
        seed,
    ));

    let attn = MultiHeadAttention::new(8, 2, &mut rng).expect("8 divisible by 2");
    let p = probe(attn, randn(3, 8, 1.0, &mut rng), &mut rng);
    let r = randn(3, 8, 1.0, &mut rng);
    out.push(check_projection(
        "attention",
        PRIMITIVE_TOL,
        &p,
        &r,
        |p| p.model.forward(&p.input.value).0,
        |p, dy| {
            let (_, cache) = p.model.forward(&p.input.value);
            p.model.backward(&cache, dy)
        },
        sabotage,
        seed,
    ));

    let block = TransformerBlock::new(8, 2, 16, &mut rng).expect("valid block");
    let p = probe(block, randn(4, 8, 1.0, &mut rng), &mut rng);
    let r = randn(4, 8, 1.0, &mut rng);
    out.push(check_projection(
        "transformer_block",
        PRIMITIVE_TOL,
        &p,
        &r,
        |p| p.model.forward(&p.input.value).0,
        |p, dy| {
            let (_, cache) = p.model.forward(&p.input.value);
            p.model.backward(&cache, dy)
        },
        sabotage,
        seed,
    ));

    let agg = AggregationBlock::new(8, &mut rng);
    let p = probe(agg, randn(4, 8, 1.0, &mut rng), &mut rng);
    let r = randn(4, 8, 1.0, &mut rng);
    out.push(check_projection(
        "aggregation_block",
        PRIMITIVE_TOL,
        &p,
        &r,
        |p| p.model.forward(&p.input.value).0,
        |p, dy| {
            let (_, cache) = p.model.forward(&p.input.value);
            p.model.backward(&cache, dy)
        },
        sabotage,
        seed,
    ));

    for (name, aggregation, weighting) in [
        ("wap_backbone", Aggregation::PostPool, LayerWeighting::Softmax),
        ("wap_backbone_raw_pooled", Aggregation::Pooled, LayerWeighting::Raw),
    ] {
        let model = small_wap(&mut rng, aggregation, weighting);
        let p = Probe { model, input: Param::new(randn(6, 16, 1.0, &mut rng)) };
        let r = randn(6, 16, 1.0, &mut rng);
        let mask = [1usize, 4];
        out.push(check_projection(
            name,
            COMPOSITE_TOL,
            &p,
            &r,
            |p| p.model.encode(&p.input.value, &mask).expect("valid input"),
            |p, dy| {
                let (_, cache) = p.model.forward(&p.input.value, &mask).expect("valid input");
                p.model.backward(&cache, dy)
            },
            sabotage,
            seed,
        ));
    }

    // backbone + masked reconstruction loss against a fixed target
    let model = small_wap(&mut rng, Aggregation::PostPool, LayerWeighting::Softmax);
    let x = randn(6, 16, 1.0, &mut rng);
    let target = randn(6, 16, 1.0, &mut rng);
    let mask = vec![0usize, 3, 5];
    let report = grad_check(
        &model,
        |m| {
            let z = m.encode(&x, &mask).expect("valid input");
            rec_loss(&z, &target, &mask).expect("non-empty mask").0
        },
        |m| {
            let (out, cache) = m.forward(&x, &mask).expect("valid input");
            let (_, g) = rec_loss(&out.output, &target, &mask).expect("non-empty mask");
            m.backward(&cache, &g);
            if sabotage {
                m.scale_grads(-1.0);
            }
        },
        STEP,
        MAX_COORDS,
        seed,
    );
    out.push(GradSuiteEntry { name: "wap_rec_loss", tolerance: COMPOSITE_TOL, report });

    // pseudo cross-entropy with respect to the student embeddings
    let codebook = Codebook::from_prototypes(randn(5, 6, 1.0, &mut rng), EtaMode::Count);
    let p = Probe { model: NoParams, input: Param::new(randn(4, 6, 1.0, &mut rng)) };
    let pmask = vec![0usize, 2, 3];
    let labels = vec![4usize, 0, 2];
    let report = grad_check(
        &p,
        |p| codebook.pce_loss(&p.input.value, &pmask, &labels, 0.5).expect("valid").0,
        |p| {
            let (_, g) = codebook.pce_loss(&p.input.value, &pmask, &labels, 0.5).expect("valid");
            p.input.grad += &g;
            if sabotage {
                p.scale_grads(-1.0);
            }
        },
        STEP,
        MAX_COORDS,
        seed,
    );
    out.push(GradSuiteEntry { name: "pseudo_ce", tolerance: PRIMITIVE_TOL, report });

    // classifier on pooled statistics, with cross-entropy
    for (name, mode) in [("sap_head", PoolMode::Corrected), ("sap_head_literal", PoolMode::Literal)] {
        let mut head = SerHead::new(6, 3, 4, mode, &mut rng).expect("valid head");
        randomize(&mut head, 0.3, &mut rng);
        let p = Probe { model: head, input: Param::new(randn(7, 6, 1.0, &mut rng)) };
        let report = grad_check(
            &p,
            |p| cross_entropy(&p.model.forward(&p.input.value).expect("valid").0, 2).0,
            |p| {
                let (logits, cache) = p.model.forward(&p.input.value).expect("valid");
                let (_, g) = cross_entropy(&logits, 2);
                let dz = p.model.backward(&cache, &g);
                p.input.grad += &dz;
                if sabotage {
                    p.scale_grads(-1.0);
                }
            },
            STEP,
            MAX_COORDS,
            seed,
        );
        out.push(GradSuiteEntry { name, tolerance: COMPOSITE_TOL, report });
    }

    let logits = Probe { model: NoParams, input: Param::new(randn(1, 5, 1.0, &mut rng)) };
    let report = grad_check(
        &logits,
        |p| cross_entropy(&p.input.value.row(0).to_owned(), 1).0,
        |p| {
            let (_, g): (f64, Array1<f64>) = cross_entropy(&p.input.value.row(0).to_owned(), 1);
            p.input.grad += &g.insert_axis(Axis(0));
            if sabotage {
                p.scale_grads(-1.0);
            }
        },
        STEP,
        MAX_COORDS,
        seed,
    );
    out.push(GradSuiteEntry { name: "cross_entropy", tolerance: PRIMITIVE_TOL, report });
    out
}
