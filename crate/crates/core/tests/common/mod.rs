#![allow(dead_code)]

use wap_core::features::{write_dataset, Dataset};
use wap_core::synth::{gen_synthetic, SynthSpec};
use wap_core::wap::WapConfig;

/// Generates `spec`, writes it under a fresh temporary directory and loads it
/// back. The directory lives as long as the returned guard.
pub fn dataset(spec: &SynthSpec) -> (tempfile::TempDir, Dataset) {
    let (manifest, seqs) = gen_synthetic(spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &manifest, &seqs).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    (dir, ds)
}

pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec { utterances_per_class: vec![8; 4], dim: 12, min_len: 6, max_len: 12, seed, ..Default::default() }
}

pub fn tiny_model() -> WapConfig {
    WapConfig { input_dim: 12, model_dim: 8, heads: 2, ffn_dim: 16, blocks: 2, max_len: 16, ..Default::default() }
}
