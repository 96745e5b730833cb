//! Cross-session cross-validation, the raw-mean nearest-centroid baseline,
//! report rendering and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::exec::map;
use crate::features::{write_feature_file, Dataset, FoldPlan, FrameSequence};
use crate::finetune::{finetune, FinetuneConfig, FinetuneEpoch, SerModel};
use crate::metrics::{confusion, ConfusionMatrix, Scores};
use crate::wap::WapTransformer;

pub const EMBEDDINGS_FILE: &str = "embeddings.wapf";
pub const EMBEDDINGS_MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone)]
pub struct FoldResult {
    /// 1-based.
    pub fold: usize,
    pub validation_session: u32,
    pub scores: Scores,
    pub confusion: ConfusionMatrix,
    /// 0 for methods without epochs.
    pub best_epoch: usize,
    pub epochs: Vec<FinetuneEpoch>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub class_names: Vec<String>,
    pub folds: Vec<FoldResult>,
    /// Arithmetic mean of the fold scores.
    pub mean: Scores,
    /// Scores of the summed confusion matrix.
    pub pooled: Scores,
    pub pooled_confusion: ConfusionMatrix,
}

impl CvReport {
    pub fn from_folds(class_names: Vec<String>, folds: Vec<FoldResult>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Config("no folds".into()));
        }
        let mut pooled_confusion = ConfusionMatrix::zeros(class_names.len());
        for f in &folds {
            pooled_confusion.merge(&f.confusion)?;
        }
        let scores: Vec<Scores> = folds.iter().map(|f| f.scores).collect();
        Ok(Self {
            mean: Scores::mean(&scores),
            pooled: Scores::of(&pooled_confusion)?,
            pooled_confusion,
            class_names,
            folds,
        })
    }

    fn grid(&self, out: &mut String, title: &str, cm: &ConfusionMatrix) {
        let _ = writeln!(out, "# confusion {title}");
        let _ = writeln!(out, "true\\pred\t{}", self.class_names.join("\t"));
        for (name, row) in self.class_names.iter().zip(cm.counts()) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{name}\t{}", cells.join("\t"));
        }
    }

    /// Line-delimited records: `fold<TAB>UA<TAB>WA<TAB>F1` per fold, then
    /// `mean` and `pooled` rows, then one labeled grid per fold and the
    /// pooled grid.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, key: &str, v: &Scores| {
            let _ = writeln!(s, "{key}\t{}\t{}\t{}", v.ua, v.wa, v.f1);
        };
        for f in &self.folds {
            row(&mut s, &f.fold.to_string(), &f.scores);
        }
        row(&mut s, "mean", &self.mean);
        row(&mut s, "pooled", &self.pooled);
        for f in &self.folds {
            self.grid(&mut s, &format!("fold {} session {}", f.fold, f.validation_session), &f.confusion);
        }
        self.grid(&mut s, "pooled", &self.pooled_confusion);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8}{:>8}{:>10}{:>10}{:>10}{:>12}", "fold", "session", "UA", "WA", "F1", "best_epoch");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<8}{:>8}{:>10.4}{:>10.4}{:>10.4}{:>12}",
                f.fold, f.validation_session, f.scores.ua, f.scores.wa, f.scores.f1, f.best_epoch
            );
        }
        for (key, v) in [("mean", &self.mean), ("pooled", &self.pooled)] {
            let _ = writeln!(s, "{:<8}{:>8}{:>10.4}{:>10.4}{:>10.4}", key, "", v.ua, v.wa, v.f1);
        }
        s
    }
}

fn split<'a>(dataset: &'a Dataset, idx: &[usize]) -> Vec<&'a FrameSequence> {
    idx.iter().map(|&i| &dataset.sequences[i]).collect()
}

/// Fine-tunes a copy of `adapter` on every fold and scores the best epoch
/// on the held-out session.
pub fn run_cv(
    dataset: &Dataset,
    adapter: &WapTransformer,
    plan: &FoldPlan,
    config: &FinetuneConfig,
    pool: Option<&ThreadPool>,
    mut on_fold: impl FnMut(&FoldResult),
) -> Result<CvReport> {
    if dataset.manifest.num_classes() != config.num_classes {
        return Err(Error::Config(format!(
            "manifest has {} classes, configuration {}",
            dataset.manifest.num_classes(),
            config.num_classes
        )));
    }
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        log::info!("fold {} (validation session {})", i + 1, fold.validation_session);
        let train = split(dataset, &fold.train);
        let val = split(dataset, &fold.validation);
        let out = finetune(adapter.clone(), &train, &val, config, pool, |_| {})?;
        let result = FoldResult {
            fold: i + 1,
            validation_session: fold.validation_session,
            scores: out.best,
            confusion: out.confusion,
            best_epoch: out.best_epoch,
            epochs: out.epochs,
        };
        on_fold(&result);
        folds.push(result);
    }
    CvReport::from_folds(dataset.manifest.class_names.clone(), folds)
}

fn mean_frame(seq: &FrameSequence) -> Array1<f64> {
    seq.frames_f64().mean_axis(Axis(0)).expect("non-empty sequence")
}

fn label(seq: &FrameSequence) -> Result<usize> {
    seq.label.ok_or_else(|| Error::Config(format!("{} has no label", seq.utterance_id)))
}

/// Nearest class centroid of the per-utterance mean frame, centroids taken
/// from `train`. Classes absent from `train` are never predicted.
pub fn nearest_centroid(train: &[&FrameSequence], val: &[&FrameSequence], classes: usize) -> Result<Vec<usize>> {
    let dim = train.first().map(|s| s.dim()).ok_or(Error::EmptySequence)?;
    let mut sums = Array2::<f64>::zeros((classes, dim));
    let mut counts = vec![0usize; classes];
    for s in train {
        let c = label(s)?;
        if c >= classes {
            return Err(Error::LabelOutOfRange { label: c, classes });
        }
        sums.row_mut(c).scaled_add(1.0, &mean_frame(s));
        counts[c] += 1;
    }
    Ok(val
        .iter()
        .map(|s| {
            let m = mean_frame(s);
            let mut best = (usize::MAX, f64::INFINITY);
            for c in (0..classes).filter(|&c| counts[c] > 0) {
                let centroid = &sums.row(c) / counts[c] as f64;
                let d = (&m - &centroid).mapv(|v| v * v).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect())
}

pub fn baseline_cv(dataset: &Dataset, plan: &FoldPlan) -> Result<CvReport> {
    let classes = dataset.manifest.num_classes();
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let train = split(dataset, &fold.train);
        let val = split(dataset, &fold.validation);
        let preds = nearest_centroid(&train, &val, classes)?;
        let truth = val.iter().map(|s| label(s)).collect::<Result<Vec<_>>>()?;
        let cm = confusion(&truth, &preds, classes)?;
        folds.push(FoldResult {
            fold: i + 1,
            validation_session: fold.validation_session,
            scores: Scores::of(&cm)?,
            confusion: cm,
            best_epoch: 0,
            epochs: Vec::new(),
        });
    }
    CvReport::from_folds(dataset.manifest.class_names.clone(), folds)
}

/// Utterance embeddings for every sequence, in dataset order.
pub fn embed_all(model: &SerModel, dataset: &Dataset, pool: Option<&ThreadPool>) -> Result<Array2<f64>> {
    let seqs: Vec<&FrameSequence> = dataset.sequences.iter().collect();
    let rows = map(&seqs, pool, |s| model.embed(&s.frames_f64()))?;
    let mut out = Array2::zeros((rows.len(), model.head.embed_dim()));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Writes `embeddings.wapf` (one row per utterance) and a copy of the
/// dataset manifest whose record order matches the rows.
pub fn export_embeddings(
    model: &SerModel,
    dataset: &Dataset,
    out_dir: impl AsRef<Path>,
    pool: Option<&ThreadPool>,
) -> Result<Array2<f64>> {
    let out_dir = out_dir.as_ref();
    let emb = embed_all(model, dataset, pool)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seq = FrameSequence::new(emb.mapv(|v| v as f32));
    write_feature_file(&seq, out_dir.join(EMBEDDINGS_FILE))?;
    dataset.manifest.write(out_dir.join(EMBEDDINGS_MANIFEST))?;
    Ok(emb)
}
