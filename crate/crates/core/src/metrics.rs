//! Confusion matrices and the UA / WA / macro-F1 scores derived from them.

use std::fmt;

use crate::error::{Error, Result};

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let classes = self.classes();
        for label in [truth, pred] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// Element-wise sum; used to pool folds.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Shape("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Classes with no true samples; their recall counts as 0 in UA.
    pub fn unsupported_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.support(c) == 0).collect()
    }

    pub fn recall(&self, class: usize) -> f64 {
        ratio(self.counts[class][class], self.support(class))
    }

    pub fn f1(&self, class: usize) -> f64 {
        ratio(2 * self.counts[class][class], self.support(class) + self.predicted(class))
    }

    fn check(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::EmptyConfusion)
        } else {
            Ok(())
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Mean per-class recall.
pub fn ua(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let c = cm.classes();
    Ok((0..c).map(|k| cm.recall(k)).sum::<f64>() / c as f64)
}

/// Overall accuracy.
pub fn wa(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    Ok(cm.trace() as f64 / cm.total() as f64)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let c = cm.classes();
    Ok((0..c).map(|k| cm.f1(k)).sum::<f64>() / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub ua: f64,
    pub wa: f64,
    pub f1: f64,
}

impl Scores {
    pub fn of(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self { ua: ua(cm)?, wa: wa(cm)?, f1: macro_f1(cm)? })
    }

    pub fn mean(all: &[Scores]) -> Self {
        let n = all.len() as f64;
        Self {
            ua: all.iter().map(|s| s.ua).sum::<f64>() / n,
            wa: all.iter().map(|s| s.wa).sum::<f64>() / n,
            f1: all.iter().map(|s| s.f1).sum::<f64>() / n,
        }
    }
}
