//! Seeded synthetic frame-level embeddings, a desk-scale stand-in for
//! pretrained-encoder features.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{FrameSequence, Manifest, ManifestRecord};

/// Length of the uniform smoothing window applied along time.
pub const SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// One entry per class; unequal entries produce class imbalance.
    pub utterances_per_class: Vec<usize>,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Euclidean distance between any two class centroids.
    pub separation: f64,
    /// Per-frame marginal standard deviation of the noise.
    pub noise: f64,
    pub sessions: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            utterances_per_class: vec![50; 4],
            dim: 64,
            min_len: 8,
            max_len: 24,
            separation: 2.5,
            noise: 1.0,
            sessions: 5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 1 {
            return fail("num_classes must be >= 1".into());
        }
        if self.utterances_per_class.len() != self.num_classes {
            return fail(format!(
                "utterances_per_class has {} entries for {} classes",
                self.utterances_per_class.len(),
                self.num_classes
            ));
        }
        if self.num_classes > self.dim {
            return fail(format!("num_classes ({}) must not exceed dim ({})", self.num_classes, self.dim));
        }
        if !(self.separation > 0.0) || !(self.noise > 0.0) {
            return fail("separation and noise must be > 0".into());
        }
        if self.min_len < 4 || self.min_len > self.max_len {
            return fail(format!("length range [{}, {}] invalid (min must be >= 4)", self.min_len, self.max_len));
        }
        if self.sessions < 1 {
            return fail("sessions must be >= 1".into());
        }
        Ok(())
    }
}

/// Class centroids on a common sphere with mutually orthogonal directions, so
/// every pair sits exactly `separation` apart.
pub fn class_centroids(spec: &SynthSpec, rng: &mut impl Rng) -> Array2<f64> {
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(spec.num_classes);
    while basis.len() < spec.num_classes {
        let mut v: Array1<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    let mut out = Array2::zeros((spec.num_classes, spec.dim));
    for (c, b) in basis.iter().enumerate() {
        out.row_mut(c).assign(&(b * radius));
    }
    out
}

/// Generates a manifest and its sequences. Records are ordered class by
/// class; sessions are assigned round-robin (ids `1..=sessions`) with two
/// speakers per session.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Manifest, Vec<FrameSequence>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids = class_centroids(spec, &mut rng);
    let total: usize = spec.utterances_per_class.iter().sum();
    let mut records = Vec::with_capacity(total);
    let mut seqs = Vec::with_capacity(total);
    let scale = spec.noise * (SMOOTHING_WINDOW as f64).sqrt() / SMOOTHING_WINDOW as f64;
    let mut idx = 0usize;
    for (class, &count) in spec.utterances_per_class.iter().enumerate() {
        for _ in 0..count {
            let t = rng.random_range(spec.min_len..=spec.max_len);
            let raw: Vec<f64> =
                (0..(t + SMOOTHING_WINDOW - 1) * spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let raw = Array2::from_shape_vec((t + SMOOTHING_WINDOW - 1, spec.dim), raw).unwrap();
            let mut frames = Array2::<f32>::zeros((t, spec.dim));
            for i in 0..t {
                for d in 0..spec.dim {
                    let mut acc = 0.0;
                    for w in 0..SMOOTHING_WINDOW {
                        acc += raw[[i + w, d]];
                    }
                    frames[[i, d]] = (centroids[[class, d]] + scale * acc) as f32;
                }
            }
            let session = (idx as u32 % spec.sessions) + 1;
            let speaker = (idx / spec.sessions as usize) % 2;
            let utt = format!("utt_{idx:05}");
            records.push(ManifestRecord {
                path: format!("feats/{utt}.wapf"),
                label: Some(class),
                session_id: session,
                speaker_id: format!("ses{session}_spk{speaker}"),
            });
            seqs.push(FrameSequence {
                frames,
                utterance_id: utt,
                label: Some(class),
                session_id: session,
                speaker_id: format!("ses{session}_spk{speaker}"),
            });
            idx += 1;
        }
    }
    let manifest = Manifest { records, class_names: (0..spec.num_classes).map(|c| format!("class{c}")).collect() };
    Ok((manifest, seqs))
}

/// Nearest true centroid of each utterance's mean frame: the accuracy
/// ceiling a mean-based classifier could reach on this data.
pub fn nearest_centroid_oracle(spec: &SynthSpec, seqs: &[FrameSequence]) -> Result<Vec<usize>> {
    spec.validate()?;
    let centroids = class_centroids(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed));
    seqs.iter()
        .map(|s| {
            if s.dim() != spec.dim {
                return Err(Error::Shape(format!("sequence width {} vs {}", s.dim(), spec.dim)));
            }
            let mean = s.frames_f64().mean_axis(ndarray::Axis(0)).ok_or(Error::EmptySequence)?;
            let mut best = (0, f64::INFINITY);
            for (c, row) in centroids.rows().into_iter().enumerate() {
                let d = (&mean - &row).mapv(|v| v * v).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            Ok(best.0)
        })
        .collect()
}
