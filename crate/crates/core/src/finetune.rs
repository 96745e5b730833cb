//! Supervised fine-tuning of adapter + SAP + classifier with cross-entropy.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::exec::{accumulate, map};
use crate::features::FrameSequence;
use crate::metrics::{confusion, ConfusionMatrix, Scores};
use crate::nn::{clip_grad_norm, cosine_lr, join, Adam, Checkpoint, LrSchedule, Param, Params};
use crate::sap::{argmax, cross_entropy, PoolMode, SerHead};
use crate::ssl::{mask_count, stream};
use crate::wap::WapTransformer;

const STREAM_HEAD: u64 = 3;
const STREAM_FINETUNE: u64 = 4;

/// Which parts receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Freeze {
    /// Adapter, SAP and classifier all train.
    #[default]
    None,
    /// The adapter is frozen; only SAP and the classifier train.
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub num_classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub clip: Option<f64>,
    pub sap_heads: usize,
    pub pool_mode: PoolMode,
    /// Masked-copy oversampling of minority classes.
    pub augment: bool,
    pub augment_ratio: f64,
    pub freeze: Freeze,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            batch_size: 96,
            epochs: 100,
            lr: 1e-4,
            min_lr: 0.0,
            clip: Some(5.0),
            sap_heads: 4,
            pool_mode: PoolMode::Corrected,
            augment: true,
            augment_ratio: 0.15,
            freeze: Freeze::None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2");
        }
        if !(self.augment_ratio > 0.0 && self.augment_ratio < 1.0) {
            return fail("augmentation mask ratio must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.sap_heads == 0 {
            return fail("batch size, epochs and SAP heads must be positive");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return fail("clip norm must be positive");
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { initial_lr: self.lr, total_epochs: self.epochs, min_lr: self.min_lr }
    }
}

/// A training item: an index into the source list and the frames to mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainItem {
    pub source: usize,
    pub mask: Vec<usize>,
}

/// Originals first (unmasked, in order), then masked copies that bring every
/// class up to the largest class count. Copies cycle through a shuffled list
/// of the class's members.
pub fn augment_minority(
    labels: &[usize],
    lengths: &[usize],
    num_classes: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<TrainItem>> {
    if labels.len() != lengths.len() {
        return Err(Error::Shape("labels and lengths differ in length".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange { label: l, classes: num_classes });
        }
        members[l].push(i);
    }
    let mut items: Vec<TrainItem> = (0..labels.len()).map(|source| TrainItem { source, mask: Vec::new() }).collect();
    let target = members.iter().map(Vec::len).max().unwrap_or(0);
    for class in members.iter_mut() {
        if class.is_empty() || class.len() == target {
            continue;
        }
        let deficit = target - class.len();
        class.shuffle(rng);
        for j in 0..deficit {
            let source = class[j % class.len()];
            let t = lengths[source];
            let n = mask_count(t, ratio)?;
            let mut mask = rand::seq::index::sample(rng, t, n).into_vec();
            mask.sort_unstable();
            items.push(TrainItem { source, mask });
        }
    }
    Ok(items)
}

/// Adapter plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct SerModel {
    pub adapter: WapTransformer,
    pub head: SerHead,
}

impl SerModel {
    pub fn new(adapter: WapTransformer, config: &FinetuneConfig) -> Result<Self> {
        let mut rng = stream(config.seed, STREAM_HEAD);
        let head = SerHead::new(adapter.model_dim(), config.sap_heads, config.num_classes, config.pool_mode, &mut rng)?;
        Ok(Self { adapter, head })
    }

    pub fn logits(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        let z = self.adapter.encode(x, &[])?;
        Ok(self.head.forward(&z)?.0)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Utterance embedding fed to the classifier.
    pub fn embed(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        let z = self.adapter.encode(x, &[])?;
        self.head.embed(&z)
    }

    /// Cross-entropy for one item; gradients scaled by `scale` accumulate in
    /// the head and, unless `adapter_frozen`, in the adapter.
    pub fn train_item(
        &mut self,
        x: &Array2<f64>,
        mask: &[usize],
        label: usize,
        scale: f64,
        adapter_frozen: bool,
    ) -> Result<f64> {
        let (out, cache) = self.adapter.forward(x, mask)?;
        let (logits, head_cache) = self.head.forward(&out.output)?;
        let (loss, grad) = cross_entropy(&logits, label);
        let dz = self.head.backward(&head_cache, &(grad * scale));
        if !adapter_frozen {
            self.adapter.backward(&cache, &dz);
        }
        Ok(loss)
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        self.adapter.save(ckpt, "student");
        self.head.save(ckpt);
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self { adapter: WapTransformer::load(ckpt, "student")?, head: SerHead::load(ckpt)? })
    }
}

impl Params for SerModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.adapter.visit(&join(prefix, "student"), f);
        self.head.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.adapter.visit_mut(&join(prefix, "student"), f);
        self.head.visit_mut(prefix, f);
    }
}

/// Predictions and confusion matrix over labeled sequences.
pub fn evaluate(
    model: &SerModel,
    seqs: &[&FrameSequence],
    num_classes: usize,
    pool: Option<&ThreadPool>,
) -> Result<(Vec<usize>, ConfusionMatrix)> {
    let preds = map(seqs, pool, |s| model.predict(&s.frames_f64()))?;
    let truth = seqs
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Config(format!("{} has no label", s.utterance_id))))
        .collect::<Result<Vec<_>>>()?;
    let cm = confusion(&truth, &preds, num_classes)?;
    Ok((preds, cm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    /// 1-based.
    pub epoch: usize,
    pub train_ce: f64,
    pub val: Scores,
}

impl FinetuneEpoch {
    /// `epoch<TAB>train_ce<TAB>val_UA<TAB>val_WA<TAB>val_F1`
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.epoch, self.train_ce, self.val.ua, self.val.wa, self.val.f1)
    }
}

pub fn finetune_log(epochs: &[FinetuneEpoch]) -> String {
    let mut s = String::new();
    for e in epochs {
        let _ = writeln!(s, "{}", e.log_line());
    }
    s
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    /// Parameters from the best validation epoch.
    pub model: SerModel,
    pub best_epoch: usize,
    pub best: Scores,
    pub confusion: ConfusionMatrix,
    pub epochs: Vec<FinetuneEpoch>,
}

fn labels_of(seqs: &[&FrameSequence]) -> Result<Vec<usize>> {
    seqs.iter().map(|s| s.label.ok_or_else(|| Error::Config(format!("{} has no label", s.utterance_id)))).collect()
}

/// Trains on `train`, scores `val` after every epoch and keeps the epoch
/// with the highest validation UA (earliest on ties).
pub fn finetune(
    adapter: WapTransformer,
    train: &[&FrameSequence],
    val: &[&FrameSequence],
    config: &FinetuneConfig,
    pool: Option<&ThreadPool>,
    mut on_epoch: impl FnMut(&FinetuneEpoch),
) -> Result<Finetuned> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut model = SerModel::new(adapter, config)?;
    model.reset_optimizer();
    let mut rng = stream(config.seed, STREAM_FINETUNE);
    let labels = labels_of(train)?;
    let inputs: Vec<Array2<f64>> = train.iter().map(|s| s.frames_f64()).collect();
    let items = if config.augment {
        let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
        augment_minority(&labels, &lengths, config.num_classes, config.augment_ratio, &mut rng)?
    } else {
        (0..train.len()).map(|source| TrainItem { source, mask: Vec::new() }).collect()
    };
    let frozen = config.freeze == Freeze::Adapter;
    let adam = Adam::default();
    let schedule = config.schedule();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut best: Option<Finetuned> = None;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = cosine_lr(&schedule, epoch)?;
        let mut ce_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let scale = 1.0 / batch.len() as f64;
            model.zero_grad();
            let losses = accumulate(&mut model, &batch, pool, |m, item| {
                m.train_item(&inputs[item.source], &item.mask, labels[item.source], scale, frozen)
            })?;
            ce_sum += losses.iter().sum::<f64>();
            if frozen {
                if let Some(c) = config.clip {
                    clip_grad_norm(&mut model.head, c);
                }
                adam.step_all(&mut model.head, lr)?;
            } else {
                if let Some(c) = config.clip {
                    clip_grad_norm(&mut model, c);
                }
                adam.step_all(&mut model, lr)?;
            }
        }
        let (_, cm) = evaluate(&model, val, config.num_classes, pool)?;
        let scores = Scores::of(&cm)?;
        let record = FinetuneEpoch { epoch: epoch + 1, train_ce: ce_sum / items.len() as f64, val: scores };
        log::info!(
            "finetune epoch {} ce {:.5} UA {:.4} WA {:.4} F1 {:.4}",
            record.epoch,
            record.train_ce,
            scores.ua,
            scores.wa,
            scores.f1
        );
        on_epoch(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|b| scores.ua > b.best.ua) {
            best = Some(Finetuned {
                model: model.clone(),
                best_epoch: epoch + 1,
                best: scores,
                confusion: cm,
                epochs: Vec::new(),
            });
        }
    }
    let mut out = best.expect("at least one epoch");
    out.epochs = epochs;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balanced_is_unchanged() {
        let labels = vec![0, 1, 0, 1];
        let lengths = vec![10; 4];
        let items = augment_minority(&labels, &lengths, 2, 0.15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(items.len(), 4);
        assert!(items.iter().enumerate().all(|(i, it)| it.source == i && it.mask.is_empty()));
    }

    #[test]
    fn minority_is_topped_up() {
        let labels: Vec<usize> = (0..70).map(|i| usize::from(i >= 50)).collect();
        let lengths: Vec<usize> = (0..70).map(|i| 8 + i % 13).collect();
        let items = augment_minority(&labels, &lengths, 2, 0.15, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(items.len(), 100);
        let copies = &items[70..];
        assert_eq!(copies.len(), 30);
        for it in copies {
            assert_eq!(labels[it.source], 1);
            let t = lengths[it.source] as f64;
            assert_eq!(it.mask.len(), (0.15 * t).round() as usize);
        }
        let count = |c| items.iter().filter(|it| labels[it.source] == c).count();
        assert_eq!((count(0), count(1)), (50, 50));
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        assert!(FinetuneConfig { num_classes: 1, ..Default::default() }.validate().is_err());
        assert!(FinetuneConfig { augment_ratio: 0.0, ..Default::default() }.validate().is_err());
    }
}
