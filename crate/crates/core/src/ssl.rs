//! Teacher-student adapter training.
//!
//! The student sees a masked copy of each utterance and is trained to
//! reconstruct the teacher's frame embeddings at the masked positions while
//! also matching the teacher's codebook assignments there. The teacher is an
//! exponential moving average of the student and never receives gradients.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

use crate::codebook::{usage_entropy, Codebook, DistillConfig};
use crate::error::{Error, Result};
use crate::exec::accumulate;
use crate::features::Dataset;
use crate::nn::{clip_grad_norm, cosine_lr, Adam, Checkpoint, LrSchedule, Params};
use crate::wap::{WapConfig, WapTransformer};

/// RNG stream for parameter initialization.
pub(crate) const STREAM_INIT: u64 = 0;
/// RNG stream for shuffling and masking.
pub(crate) const STREAM_DATA: u64 = 1;
/// RNG stream for codebook initialization and reseeding.
pub(crate) const STREAM_CODEBOOK: u64 = 2;

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded adapter initialization; pretraining starts from exactly these
/// weights for the same seed.
pub fn init_adapter(config: WapConfig, seed: u64) -> Result<WapTransformer> {
    WapTransformer::new(config, &mut stream(seed, STREAM_INIT))
}

/// `model` with `input_dim` taken from the data and `max_len` raised to
/// cover its longest sequence.
pub fn fit_to_data(model: &WapConfig, dataset: &Dataset) -> WapConfig {
    let mut c = model.clone();
    c.input_dim = dataset.dim();
    c.max_len = c.max_len.max(dataset.max_len());
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaShape {
    #[default]
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub mask_ratio: f64,
    /// EMA smoothing factor.
    pub ema: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub lambda_shape: LambdaShape,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    pub codebook_size: usize,
    pub distill: DistillConfig,
    /// Batches of teacher embeddings pooled to initialize the codebook.
    pub warmup_batches: usize,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            ema: 0.999,
            lambda_start: 1.0,
            lambda_end: 0.5,
            lambda_shape: LambdaShape::Linear,
            batch_size: 96,
            epochs: 100,
            lr: 1e-4,
            min_lr: 0.0,
            clip: Some(5.0),
            codebook_size: 1024,
            distill: DistillConfig::default(),
            warmup_batches: 2,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail("mask ratio must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.ema) {
            return fail("EMA factor must lie in [0, 1)");
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.lambda_start) || !in_unit(self.lambda_end) || self.lambda_start < self.lambda_end {
            return fail("lambda endpoints must lie in [0, 1] with start >= end");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.warmup_batches == 0 {
            return fail("batch size, epochs and warm-up batches must be positive");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return fail("clip norm must be positive");
        }
        self.schedule().validate()?;
        self.distill.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { initial_lr: self.lr, total_epochs: self.epochs, min_lr: self.min_lr }
    }
}

/// Number of positions masked in a sequence of length `t`:
/// `round(ratio * t)` clamped to `[1, t - 1]`.
pub fn mask_count(t: usize, ratio: f64) -> Result<usize> {
    if t < 2 {
        return Err(Error::TooShortToMask(t));
    }
    Ok(((ratio * t as f64).round() as usize).clamp(1, t - 1))
}

/// Uniformly chosen positions without replacement, ascending.
pub fn sample_mask(t: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = mask_count(t, ratio)?;
    let mut m = sample(rng, t, n).into_vec();
    m.sort_unstable();
    Ok(m)
}

/// Mean squared distance over the masked rows and its gradient with respect
/// to the student rows. The teacher side is a constant.
pub fn rec_loss(student: &Array2<f64>, teacher: &Array2<f64>, mask: &[usize]) -> Result<(f64, Array2<f64>)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if student.dim() != teacher.dim() {
        return Err(Error::Shape(format!("student {:?} vs teacher {:?}", student.dim(), teacher.dim())));
    }
    let m = mask.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(student.dim());
    for &i in mask {
        let diff = &student.row(i) - &teacher.row(i);
        loss += diff.dot(&diff);
        grad.row_mut(i).assign(&(diff * (2.0 / m)));
    }
    Ok((loss / m, grad))
}

/// Reconstruction weight for `epoch` out of `total`.
pub fn lambda_schedule(epoch: usize, total: usize, start: f64, end: f64, shape: LambdaShape) -> Result<f64> {
    if epoch > total || total == 0 {
        return Err(Error::EpochOutOfRange { epoch, total });
    }
    let r = epoch as f64 / total as f64;
    Ok(match shape {
        LambdaShape::Linear => start - (start - end) * r,
        LambdaShape::Cosine => end + (start - end) * 0.5 * (1.0 + (PI * r).cos()),
    })
}

/// Student and its EMA teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPair {
    pub student: WapTransformer,
    pub teacher: WapTransformer,
}

impl BranchPair {
    pub fn new(student: WapTransformer) -> Self {
        let teacher = student.clone();
        Self { student, teacher }
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`, coordinate-wise.
    pub fn ema_update(&mut self, alpha: f64) {
        let mut values = Vec::new();
        self.student.visit("", &mut |_, p| values.push(p.value.clone()));
        let mut i = 0;
        self.teacher.visit_mut("", &mut |_, p| {
            p.value.zip_mut_with(&values[i], |t, &s| *t = alpha * *t + (1.0 - alpha) * s);
            i += 1;
        });
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        self.student.save(ckpt, "student");
        self.teacher.save(ckpt, "teacher");
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self { student: WapTransformer::load(ckpt, "student")?, teacher: WapTransformer::load(ckpt, "teacher")? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub rec: f64,
    pub pce: f64,
    pub lambda: f64,
    pub histogram: Vec<u64>,
    pub reseeded: usize,
    pub vq: f64,
}

struct UtteranceOut {
    rec: f64,
    pce: f64,
    teacher: Array2<f64>,
}

/// Forward and backward for one utterance; gradients land in `student`.
#[allow(clippy::too_many_arguments)]
fn utterance_pass(
    student: &mut WapTransformer,
    teacher: &WapTransformer,
    codebook: &Codebook,
    x: &Array2<f64>,
    mask: &[usize],
    lambda: f64,
    temperature: f64,
    scale: f64,
) -> Result<UtteranceOut> {
    let (out, cache) = student.forward(x, mask)?;
    let zt = teacher.encode(x, &[])?;
    let (rec, g_rec) = rec_loss(&out.output, &zt, mask)?;
    let labels: Vec<usize> = mask.iter().map(|&i| codebook.assign(zt.row(i))).collect();
    let (pce, g_pce) = codebook.pce_loss(&out.output, mask, &labels, temperature)?;
    let grad = (g_rec * lambda + g_pce * (1.0 - lambda)) * scale;
    student.backward(&cache, &grad);
    Ok(UtteranceOut { rec, pce, teacher: zt })
}

/// One optimization step over a batch: losses per utterance averaged over
/// the batch, Adam on the student, EMA into the teacher, then the online
/// codebook pass over the teacher embeddings of the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn ssl_step(
    batch: &[&Array2<f64>],
    pair: &mut BranchPair,
    codebook: &mut Codebook,
    config: &SslConfig,
    lambda: f64,
    lr: f64,
    rng: &mut impl Rng,
    pool: Option<&ThreadPool>,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let masks = batch.iter().map(|x| sample_mask(x.nrows(), config.mask_ratio, rng)).collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let tau = config.distill.temperature;
    pair.student.zero_grad();

    let items: Vec<(&Array2<f64>, &Vec<usize>)> = batch.iter().copied().zip(&masks).collect();
    let BranchPair { student, teacher } = pair;
    let cb = &*codebook;
    let outs = accumulate(student, &items, pool, |model, (x, mask)| {
        utterance_pass(model, teacher, cb, x, mask, lambda, tau, scale)
    })?;

    let rec = outs.iter().map(|o| o.rec).sum::<f64>() * scale;
    let pce = outs.iter().map(|o| o.pce).sum::<f64>() * scale;
    let total = lambda * rec + (1.0 - lambda) * pce;

    if let Some(max_norm) = config.clip {
        clip_grad_norm(&mut pair.student, max_norm);
    }
    Adam::default().step_all(&mut pair.student, lr)?;
    pair.ema_update(config.ema);

    let views: Vec<_> = outs.iter().map(|o| o.teacher.view()).collect();
    let frames = concatenate(Axis(0), &views).expect("equal widths");
    let vq = codebook.vq_loss(&frames);
    let update = codebook.update_batch(&frames, config.distill.dead_threshold, rng);
    Ok(StepLosses { total, rec, pce, lambda, histogram: update.histogram, reseeded: update.reseeded, vq })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub rec: f64,
    pub pce: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
    pub codebook_entropy: f64,
    pub vq: f64,
    pub reseeded: usize,
}

impl EpochMetrics {
    /// `epoch<TAB>L_rec<TAB>L_pce<TAB>lambda<TAB>lr<TAB>codebook_entropy`
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}\t{}", self.epoch, self.rec, self.pce, self.lambda, self.lr, self.codebook_entropy)
    }
}

pub fn metrics_log(metrics: &[EpochMetrics]) -> String {
    let mut s = String::new();
    for m in metrics {
        let _ = writeln!(s, "{}", m.log_line());
    }
    s
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub pair: BranchPair,
    pub codebook: Codebook,
    pub metrics: Vec<EpochMetrics>,
}

impl Pretrained {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.pair.save(&mut ckpt);
        self.codebook.save(&mut ckpt);
        ckpt
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Adapter pretraining over every sequence in `dataset`. `model` supplies
/// the architecture; its `input_dim` is taken from the data and `max_len`
/// is raised to cover the longest sequence. `on_epoch` sees each epoch's
/// metrics as soon as they are known.
pub fn pretrain(
    dataset: &Dataset,
    model: &WapConfig,
    config: &SslConfig,
    pool: Option<&ThreadPool>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Pretrained> {
    config.validate()?;
    if dataset.sequences.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut data_rng = stream(config.seed, STREAM_DATA);
    let mut cb_rng = stream(config.seed, STREAM_CODEBOOK);

    let mut pair = BranchPair::new(init_adapter(fit_to_data(model, dataset), config.seed)?);
    let inputs: Vec<Array2<f64>> = dataset.sequences.iter().map(|s| s.frames_f64()).collect();
    let n = inputs.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut data_rng);
    let warmup: Vec<Array2<f64>> = batches(&order, config.batch_size)
        .take(config.warmup_batches)
        .flatten()
        .map(|&i| pair.teacher.encode(&inputs[i], &[]))
        .collect::<Result<_>>()?;
    let views: Vec<_> = warmup.iter().map(|a| a.view()).collect();
    let pool_frames = concatenate(Axis(0), &views).expect("equal widths");
    let mut codebook = Codebook::init(config.codebook_size, &pool_frames, config.distill.eta, &mut cb_rng)?;

    let schedule = config.schedule();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if epoch > 0 {
            order.shuffle(&mut data_rng);
        }
        let lr = cosine_lr(&schedule, epoch)?;
        let lambda =
            lambda_schedule(epoch, config.epochs, config.lambda_start, config.lambda_end, config.lambda_shape)?;
        let mut histogram = vec![0u64; codebook.len()];
        let (mut rec, mut pce, mut total, mut vq) = (0.0, 0.0, 0.0, 0.0);
        let mut reseeded = 0;
        let mut steps = 0usize;
        for idx in batches(&order, config.batch_size) {
            let batch: Vec<&Array2<f64>> = idx.iter().map(|&i| &inputs[i]).collect();
            let step = ssl_step(&batch, &mut pair, &mut codebook, config, lambda, lr, &mut data_rng, pool)?;
            rec += step.rec;
            pce += step.pce;
            total += step.total;
            vq += step.vq;
            reseeded += step.reseeded;
            for (h, s) in histogram.iter_mut().zip(&step.histogram) {
                *h += s;
            }
            steps += 1;
        }
        let s = steps as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            rec: rec / s,
            pce: pce / s,
            total: total / s,
            lambda,
            lr,
            codebook_entropy: usage_entropy(&histogram),
            vq: vq / s,
            reseeded,
        };
        log::info!(
            "pretrain epoch {} total {:.5} rec {:.5} pce {:.5} entropy {:.3}",
            m.epoch,
            m.total,
            m.rec,
            m.pce,
            m.codebook_entropy
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(Pretrained { pair, codebook, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mask_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(10, 0.4, &mut rng).unwrap().len(), 4);
        assert_eq!(sample_mask(3, 0.4, &mut rng).unwrap().len(), 1);
        assert_eq!(mask_count(2, 0.01).unwrap(), 1);
        assert_eq!(mask_count(4, 0.99).unwrap(), 3);
        assert!(matches!(sample_mask(1, 0.4, &mut rng), Err(Error::TooShortToMask(1))));
        let err = sample_mask(1, 0.4, &mut rng).unwrap_err();
        assert!(err.to_string().contains("sequence too short to mask"));
    }

    #[test]
    fn masks_are_seeded() {
        let a = sample_mask(50, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_mask(50, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rec_loss_arithmetic() {
        let zt = array![[0.0, 0.0], [0.0, 0.0], [9.0, 9.0]];
        let zs = array![[1.0, 0.0], [1.0, std::f64::consts::SQRT_2], [0.0, 0.0]];
        // squared norms 1 and 3 on the masked rows
        let (loss, grad) = rec_loss(&zs, &zt, &[0, 1]).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
        assert_eq!(grad.row(2), array![0.0, 0.0]);
        assert_eq!(grad.row(0), array![1.0, 0.0]);
        assert_eq!(rec_loss(&zt, &zt, &[0, 2]).unwrap().0, 0.0);
        assert!(matches!(rec_loss(&zs, &zt, &[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn lambda_ramp() {
        let l = |e| lambda_schedule(e, 100, 1.0, 0.5, LambdaShape::Linear).unwrap();
        assert_eq!(l(0), 1.0);
        assert_eq!(l(100), 0.5);
        assert_eq!(l(50), 0.75);
        assert!((0..100).all(|e| l(e + 1) <= l(e)));
        let c = |e| lambda_schedule(e, 10, 1.0, 0.5, LambdaShape::Cosine).unwrap();
        assert_eq!(c(0), 1.0);
        assert!((c(10) - 0.5).abs() < 1e-15);
        assert!(lambda_schedule(101, 100, 1.0, 0.5, LambdaShape::Linear).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SslConfig::default().validate().is_ok());
        for bad in [
            SslConfig { mask_ratio: 1.0, ..Default::default() },
            SslConfig { ema: 1.0, ..Default::default() },
            SslConfig { lambda_start: 0.4, ..Default::default() },
            SslConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
