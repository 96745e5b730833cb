use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use wap_core::features::{
    decode_feature_bytes, encode_feature_bytes, make_folds, read_feature_file, write_dataset, write_feature_file,
    Dataset, FrameSequence, Manifest, ManifestRecord, FEATURE_MAGIC, MANIFEST_FILE,
};
use wap_core::metrics::{confusion, wa};
use wap_core::nn::{Checkpoint, Tensor};
use wap_core::synth::{gen_synthetic, nearest_centroid_oracle, SynthSpec};
use wap_core::Error;

fn header(magic: &[u8; 4], version: u32, d: u32, t: u32) -> Vec<u8> {
    let mut b = magic.to_vec();
    for v in [version, d, t] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn frames(t: usize, d: usize, values: &[f32]) -> Array2<f32> {
    Array2::from_shape_vec((t, d), values[..t * d].to_vec()).unwrap()
}

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        any::<f32>().prop_filter("finite", |v| v.is_finite()),
        -1e3f32..1e3,
        Just(0.0f32),
        Just(-0.0f32),
        Just(f32::MIN_POSITIVE),
        Just(f32::MAX),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn encode_decode_is_bit_exact(
        (t, d, values) in (1usize..12, 1usize..12)
            .prop_flat_map(|(t, d)| (Just(t), Just(d), prop::collection::vec(finite_f32(), t * d)))
    ) {
        let a = frames(t, d, &values);
        let bytes = encode_feature_bytes(&a).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * t * d);
        let back = decode_feature_bytes(&bytes).unwrap();
        prop_assert_eq!(back.dim(), (t, d));
        for (x, y) in a.iter().zip(back.iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn any_truncation_is_rejected(t in 1usize..6, d in 1usize..6, cut in 1usize..200) {
        let a = Array2::<f32>::ones((t, d));
        let bytes = encode_feature_bytes(&a).unwrap();
        let cut = cut.min(bytes.len() - 16);
        let err = decode_feature_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
        let is_truncated = matches!(err, Error::TruncatedPayload { .. });
        prop_assert!(is_truncated);
    }
}

#[test]
fn header_layout_is_little_endian() {
    let a = Array2::from_shape_vec((2, 3), vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let bytes = encode_feature_bytes(&a).unwrap();
    assert_eq!(&bytes[..16], header(&FEATURE_MAGIC, 1, 3, 2).as_slice());
    assert_eq!(&bytes[16..20], 1.0f32.to_le_bytes().as_slice());
    assert_eq!(&bytes[36..40], 6.0f32.to_le_bytes().as_slice());
}

#[test]
fn file_roundtrip_and_rewrite_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = Array2::from_shape_fn((10, 1024), |(i, j)| (i as f32 - 4.5) * 0.25 + j as f32 * 1e-3);
    let seq = FrameSequence::new(a.clone());
    let (p1, p2) = (dir.path().join("a.wapf"), dir.path().join("b.wapf"));
    write_feature_file(&seq, &p1).unwrap();
    write_feature_file(&seq, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let back = read_feature_file(&p1).unwrap();
    assert_eq!(back.frames.dim(), (10, 1024));
    assert_eq!(back.frames, a);
}

#[test]
fn malformed_headers_map_to_error_classes() {
    let payload = vec![0u8; 4 * 6];
    let with = |h: Vec<u8>, p: &[u8]| [h, p.to_vec()].concat();

    let err = decode_feature_bytes(&with(header(b"XXXX", 1, 3, 2), &payload)).unwrap_err();
    assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    assert!(err.to_string().contains("bad magic"));

    let err = decode_feature_bytes(&with(header(&FEATURE_MAGIC, 2, 3, 2), &payload)).unwrap_err();
    assert!(matches!(err, Error::VersionMismatch { expected: 1, found: 2 }), "{err}");

    let err = decode_feature_bytes(&with(header(&FEATURE_MAGIC, 1, 3, 2), &payload[..20])).unwrap_err();
    assert!(matches!(err, Error::TruncatedPayload { expected: 24, found: 20 }), "{err}");
    assert!(err.to_string().contains("truncated payload"));

    let err = decode_feature_bytes(&header(&FEATURE_MAGIC, 1, 3, 0)).unwrap_err();
    assert!(matches!(err, Error::EmptySequence), "{err}");

    // Shorter than the header itself.
    let err = decode_feature_bytes(&FEATURE_MAGIC).unwrap_err();
    assert!(matches!(err, Error::TruncatedPayload { .. }), "{err}");
}

#[test]
fn non_finite_frames_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
        let mut a = Array2::<f32>::zeros((3, 2));
        a[[1, 1]] = bad;
        let err = write_feature_file(&FrameSequence::new(a), dir.path().join("x.wapf")).unwrap_err();
        assert!(matches!(err, Error::NonFinite { frame: 1, dim: 1 }));
        assert!(err.to_string().contains("non-finite"));
    }
    assert!(!dir.path().join("x.wapf").exists());

    // A file patched on disk after writing.
    let path = dir.path().join("patched.wapf");
    write_feature_file(&FrameSequence::new(Array2::zeros((3, 2))), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let at = 16 + 4 * (2 + 1);
    bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(read_feature_file(&path), Err(Error::NonFinite { frame: 1, dim: 1 })));
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_feature_file("/nonexistent/x.wapf").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

fn record(path: &str, label: Option<usize>, session: u32) -> ManifestRecord {
    ManifestRecord { path: path.into(), label, session_id: session, speaker_id: format!("spk{session}") }
}

#[test]
fn manifest_text_roundtrip() {
    let m = Manifest {
        records: vec![record("a.wapf", Some(0), 1), record("b.wapf", None, 2), record("c.wapf", Some(1), 2)],
        class_names: vec!["neu".into(), "sad".into()],
    };
    let text = m.to_text();
    assert!(text.starts_with("#classes: neu,sad\n"));
    assert!(text.contains("a.wapf\t0\t1\tspk1\n"));
    assert_eq!(Manifest::parse(&text).unwrap(), m);
}

#[test]
fn manifest_errors() {
    let bad = [
        "a.wapf\t0\t1\tspk\n",
        "#classes: a,b\na.wapf\t0\t1\n",
        "#classes: a,b\na.wapf\tx\t1\tspk\n",
        "#classes: a,b\na.wapf\t0\t1\tspk\na.wapf\t1\t2\tspk\n",
    ];
    for text in bad {
        let err = Manifest::parse(text).unwrap_err();
        assert!(matches!(err, Error::Manifest { .. }), "{text:?} gave {err}");
    }
    let err = Manifest::parse("#classes: a,b\na.wapf\t2\t1\tspk\n").unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
}

#[test]
fn folds_examples() {
    let five = Manifest {
        records: (0..20).map(|i| record(&format!("{i}.wapf"), Some(0), (i % 5 + 1) as u32)).collect(),
        class_names: vec!["a".into()],
    };
    let plan = make_folds(&five).unwrap();
    assert_eq!(plan.folds.len(), 5);
    for (i, f) in plan.folds.iter().enumerate() {
        assert_eq!(f.validation_session, i as u32 + 1);
        assert_eq!(f.validation.len(), 4);
        assert!(f.validation.iter().all(|&r| five.records[r].session_id == f.validation_session));
    }

    let two =
        Manifest { records: vec![record("a", Some(0), 3), record("b", Some(0), 9)], class_names: vec!["a".into()] };
    assert_eq!(make_folds(&two).unwrap().folds.len(), 2);

    let one =
        Manifest { records: vec![record("a", Some(0), 3), record("b", Some(0), 3)], class_names: vec!["a".into()] };
    assert!(matches!(make_folds(&one), Err(Error::SingleSession(1))));
}

proptest! {
    #[test]
    fn folds_partition_records(sessions in prop::collection::vec(0u32..6, 2..60)) {
        prop_assume!(sessions.iter().collect::<BTreeSet<_>>().len() >= 2);
        let m = Manifest {
            records: sessions.iter().enumerate().map(|(i, &s)| record(&format!("{i}"), Some(0), s)).collect(),
            class_names: vec!["a".into()],
        };
        let plan = make_folds(&m).unwrap();
        let distinct: BTreeSet<u32> = sessions.iter().copied().collect();
        prop_assert_eq!(plan.folds.len(), distinct.len());
        let mut seen = vec![0usize; sessions.len()];
        for f in &plan.folds {
            let train: BTreeSet<usize> = f.train.iter().copied().collect();
            let val: BTreeSet<usize> = f.validation.iter().copied().collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert_eq!(train.len() + val.len(), sessions.len());
            let train_speakers: BTreeSet<&str> = f.train.iter().map(|&i| m.records[i].speaker_id.as_str()).collect();
            for &v in &f.validation {
                prop_assert!(!train_speakers.contains(m.records[v].speaker_id.as_str()));
                seen[v] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_dataset_is_seed_determined() {
    let spec = SynthSpec { utterances_per_class: vec![6, 3, 4], num_classes: 3, dim: 8, seed: 7, ..Default::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let (m, s) = gen_synthetic(&spec).unwrap();
        write_dataset(d.path(), &m, &s).unwrap();
    }
    let (ta, tb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(ta.len(), 14);
    assert_eq!(ta, tb);

    let (other, _) = gen_synthetic(&SynthSpec { seed: 8, ..spec.clone() }).unwrap();
    let ds = Dataset::load(a.path()).unwrap();
    assert_eq!(ds.manifest.records.len(), other.records.len());
    assert!(a.path().join(MANIFEST_FILE).exists());
}

#[test]
fn synthetic_counts_lengths_and_sessions() {
    let spec = SynthSpec::default();
    let (m, seqs) = gen_synthetic(&spec).unwrap();
    assert_eq!(m.records.len(), 200);
    for c in 0..4 {
        assert_eq!(m.records.iter().filter(|r| r.label == Some(c)).count(), 50);
    }
    assert_eq!(m.sessions(), vec![1, 2, 3, 4, 5]);
    for s in &seqs {
        assert!((spec.min_len..=spec.max_len).contains(&s.len()));
        assert_eq!(s.dim(), 64);
    }
}

/// Accuracy of the true-centroid oracle for the separation quoted with the
/// generator (6 with unit noise), on the default 4 x 50 layout.
#[test]
fn wide_separation_oracle_accuracy() {
    for seed in 0..3 {
        let spec = SynthSpec { separation: 6.0, noise: 1.0, seed, ..Default::default() };
        let (_, seqs) = gen_synthetic(&spec).unwrap();
        let pred = nearest_centroid_oracle(&spec, &seqs).unwrap();
        let truth: Vec<usize> = seqs.iter().map(|s| s.label.unwrap()).collect();
        let acc = wa(&confusion(&truth, &pred, 4).unwrap()).unwrap();
        assert_eq!(acc, 1.0, "seed {seed}");
    }
}

#[test]
fn checkpoint_roundtrip_and_errors() {
    let mut c = Checkpoint::new();
    c.insert("b/w", Tensor::from_array(&Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.5)));
    c.insert("a/x", Tensor::from_array(&Array2::from_elem((1, 1), -2.0)));
    c.put_scalar("meta/k", 4.0);
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..4], b"WAPC");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.array("b/w").unwrap()[[1, 2]], 2.5);
    assert_eq!(back.scalar("meta/k").unwrap(), 4.0);
    assert!(matches!(back.get("missing"), Err(Error::MissingTensor(_))));

    // Insertion order does not affect the bytes.
    let mut d = Checkpoint::new();
    d.put_scalar("meta/k", 4.0);
    d.insert("a/x", Tensor::from_array(&Array2::from_elem((1, 1), -2.0)));
    d.insert("b/w", Tensor::from_array(&Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.5)));
    assert_eq!(d.to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::TruncatedPayload { .. })));
}
