//! Online codebook of local-attribute prototypes.
//!
//! Teacher frame embeddings are assigned to their nearest prototype
//! (Euclidean), and the winner moves toward the embedding by `eta`. The
//! student is distilled toward those assignments through cosine-similarity
//! logits. Prototypes never receive gradients.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Checkpoint, Tensor};

/// Guard for cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaMode {
    /// `eta = 1 / (n_k + 1)`: each prototype tracks the running mean of its
    /// assignments.
    Count,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub eta: EtaMode,
    /// Consecutive batches without an assignment before a prototype is
    /// reseeded.
    pub dead_threshold: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 0.1, eta: EtaMode::Count, dead_threshold: 50 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if let EtaMode::Fixed(eta) = self.eta {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::Config(format!("fixed eta {eta} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// K x D.
    pub prototypes: Array2<f64>,
    /// Lifetime assignment counts (reset on reseed).
    pub counts: Vec<u64>,
    /// Batches since each prototype last received an assignment.
    pub idle: Vec<usize>,
    pub eta: EtaMode,
}

/// Per-batch assignment summary.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchUpdate {
    pub histogram: Vec<u64>,
    pub reseeded: usize,
}

impl Codebook {
    pub fn from_prototypes(prototypes: Array2<f64>, eta: EtaMode) -> Self {
        let k = prototypes.nrows();
        Self { prototypes, counts: vec![0; k], idle: vec![0; k], eta }
    }

    /// Picks `k` distinct rows of the warm-up pool as initial prototypes.
    pub fn init(k: usize, samples: &Array2<f64>, eta: EtaMode, rng: &mut impl Rng) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config("codebook needs at least 2 prototypes".into()));
        }
        if samples.nrows() < k {
            return Err(Error::InsufficientWarmup { needed: k, available: samples.nrows() });
        }
        let picks = sample(rng, samples.nrows(), k).into_vec();
        Ok(Self::from_prototypes(samples.select(Axis(0), &picks), eta))
    }

    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Nearest prototype by squared Euclidean distance; ties go to the lowest
    /// index.
    pub fn assign(&self, z: ArrayView1<f64>) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (k, p) in self.prototypes.rows().into_iter().enumerate() {
            let d: f64 = p.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_dist {
                best_dist = d;
                best = k;
            }
        }
        best
    }

    pub fn assign_all(&self, z: &Array2<f64>) -> Vec<usize> {
        z.rows().into_iter().map(|r| self.assign(r)).collect()
    }

    fn eta_for(&self, k: usize) -> f64 {
        match self.eta {
            EtaMode::Count => 1.0 / (self.counts[k] as f64 + 1.0),
            EtaMode::Fixed(e) => e,
        }
    }

    /// `p_k <- p_k + eta (z - p_k)` and bumps the count.
    pub fn update_prototype(&mut self, z: ArrayView1<f64>, k: usize) {
        let eta = self.eta_for(k);
        let mut p = self.prototypes.row_mut(k);
        p.zip_mut_with(&z, |p, &z| *p += eta * (z - *p));
        self.counts[k] += 1;
    }

    /// Quantization error of `batch` against the current prototypes.
    pub fn vq_loss(&self, batch: &Array2<f64>) -> f64 {
        batch
            .rows()
            .into_iter()
            .map(|z| {
                let k = self.assign(z);
                let p = self.prototypes.row(k);
                p.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum()
    }

    /// `cos(z, p_k) / temperature` for every prototype.
    pub fn cosine_logits(&self, z: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
        let nz = z.dot(&z).sqrt();
        self.prototypes
            .rows()
            .into_iter()
            .map(|p| {
                let np = p.dot(&p).sqrt();
                z.dot(&p) / (nz * np).max(COSINE_EPS) / temperature
            })
            .collect()
    }

    /// Cross-entropy of student cosine logits against `labels`, averaged
    /// over the positions in `mask` (`labels[j]` belongs to `mask[j]`).
    /// Returns the loss and its gradient with respect to `student` (zero
    /// outside the mask).
    pub fn pce_loss(
        &self,
        student: &Array2<f64>,
        mask: &[usize],
        labels: &[usize],
        temperature: f64,
    ) -> Result<(f64, Array2<f64>)> {
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        if mask.len() != labels.len() {
            return Err(Error::Shape(format!("{} masked positions, {} pseudo-labels", mask.len(), labels.len())));
        }
        let norms: Vec<f64> = self.prototypes.rows().into_iter().map(|p| p.dot(&p).sqrt()).collect();
        let m = mask.len() as f64;
        let mut loss = 0.0;
        let mut grad = Array2::zeros(student.dim());
        for (&i, &label) in mask.iter().zip(labels) {
            let z = student.row(i);
            let mut probs = self.cosine_logits(z, temperature);
            let max = probs.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + probs.mapv(|l| (l - max).exp()).sum().ln();
            loss += lse - probs[label];
            softmax_in_place(probs.view_mut());
            probs[label] -= 1.0;
            // d logit_k / dz = (p_k / (|z||p_k|) - cos_k z / |z|^2) / tau
            let nz = z.dot(&z).sqrt();
            let mut gz = grad.row_mut(i);
            for (k, p) in self.prototypes.rows().into_iter().enumerate() {
                let dl = probs[k] / m / temperature;
                let denom = nz * norms[k];
                if denom >= COSINE_EPS {
                    let cos = z.dot(&p) / denom;
                    gz.scaled_add(dl / denom, &p);
                    gz.scaled_add(-dl * cos / (nz * nz), &z);
                } else {
                    gz.scaled_add(dl / COSINE_EPS, &p);
                }
            }
        }
        Ok((loss / m, grad))
    }

    /// Online pass over a batch of teacher embeddings: assign, update, then
    /// refresh idle counters and reseed dead prototypes from the batch.
    pub fn update_batch(&mut self, embeddings: &Array2<f64>, dead_threshold: usize, rng: &mut impl Rng) -> BatchUpdate {
        let mut histogram = vec![0u64; self.len()];
        for z in embeddings.rows() {
            let k = self.assign(z);
            self.update_prototype(z, k);
            histogram[k] += 1;
        }
        for (idle, &h) in self.idle.iter_mut().zip(&histogram) {
            *idle = if h > 0 { 0 } else { *idle + 1 };
        }
        let reseeded = self.reseed_dead(embeddings, dead_threshold, rng);
        BatchUpdate { histogram, reseeded }
    }

    /// Replaces prototypes idle for at least `threshold` batches with random
    /// rows of `recent`. Returns how many were replaced.
    pub fn reseed_dead(&mut self, recent: &Array2<f64>, threshold: usize, rng: &mut impl Rng) -> usize {
        if threshold == 0 || recent.nrows() == 0 {
            return 0;
        }
        let mut n = 0;
        for k in 0..self.len() {
            if self.idle[k] >= threshold {
                let pick = rng.random_range(0..recent.nrows());
                self.prototypes.row_mut(k).assign(&recent.row(pick));
                self.counts[k] = 0;
                self.idle[k] = 0;
                n += 1;
            }
        }
        n
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("codebook/prototypes", Tensor::from_array(&self.prototypes));
        ckpt.insert(
            "codebook/counts",
            Tensor { dims: vec![self.len()], data: self.counts.iter().map(|&c| c as f32).collect() },
        );
        ckpt.insert(
            "codebook/idle",
            Tensor { dims: vec![self.len()], data: self.idle.iter().map(|&c| c as f32).collect() },
        );
    }

    pub fn load(ckpt: &Checkpoint, eta: EtaMode) -> Result<Self> {
        let prototypes = ckpt.array("codebook/prototypes")?;
        let counts = ckpt.get("codebook/counts")?.data.iter().map(|&c| c as u64).collect();
        let idle = ckpt.get("codebook/idle")?.data.iter().map(|&c| c as usize).collect();
        Ok(Self { prototypes, counts, idle, eta })
    }
}

/// Shannon entropy (nats) of an assignment histogram; 0 for an empty one.
pub fn usage_entropy(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
