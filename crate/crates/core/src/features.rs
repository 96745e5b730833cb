//! Feature files, dataset manifests and cross-session folds.
//!
//! Feature file layout (little-endian):
//!
//! | offset | type          | content                  |
//! |--------|---------------|--------------------------|
//! | 0      | `[u8; 4]`     | magic `WAPF`             |
//! | 4      | `u32`         | version (1)              |
//! | 8      | `u32`         | D                        |
//! | 12     | `u32`         | T                        |
//! | 16     | `f32 * T * D` | frames, frame-major      |
//!
//! The manifest is a tab-separated text file with a `#classes:` header line
//! followed by `path<TAB>label_id<TAB>session_id<TAB>speaker_id` records.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"WAPF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Frame-level embeddings of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// T x D, one row per frame.
    pub frames: Array2<f32>,
    pub utterance_id: String,
    pub label: Option<usize>,
    pub session_id: u32,
    pub speaker_id: String,
}

impl FrameSequence {
    pub fn new(frames: Array2<f32>) -> Self {
        Self { frames, utterance_id: String::new(), label: None, session_id: 0, speaker_id: String::new() }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frames_f64(&self) -> Array2<f64> {
        self.frames.mapv(f64::from)
    }

    fn check_finite(&self) -> Result<()> {
        for ((frame, dim), v) in self.frames.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { frame, dim });
            }
        }
        Ok(())
    }
}

/// Serializes frames into the `WAPF` byte layout.
pub fn encode_feature_bytes(frames: &Array2<f32>) -> Result<Vec<u8>> {
    let (t, d) = frames.dim();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + t * d * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for ((frame, dim), v) in frames.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { frame, dim });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the `WAPF` byte layout. Trailing bytes beyond the declared payload
/// are ignored.
pub fn decode_feature_bytes(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic { expected: FEATURE_MAGIC, found: magic });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch { expected: FEATURE_VERSION, found: version });
    }
    let d = word(8) as usize;
    let t = word(12) as usize;
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let payload = t * d * 4;
    let found = bytes.len() - HEADER_LEN;
    if found < payload {
        return Err(Error::TruncatedPayload { expected: payload, found });
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((t, d), data).expect("payload length checked"))
}

pub fn write_feature_file(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.check_finite()?;
    let bytes = encode_feature_bytes(&seq.frames)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature file. Metadata fields are left empty; [`Dataset::load`]
/// fills them from the manifest.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frames = decode_feature_bytes(&bytes)?;
    let mut seq = FrameSequence::new(frames);
    seq.check_finite()?;
    seq.utterance_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest directory.
    pub path: String,
    pub label: Option<usize>,
    pub session_id: u32,
    pub speaker_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Distinct session ids, ascending.
    pub fn sessions(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.session_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Manifest { line: i + 2, reason: format!("duplicate path {}", r.path) });
            }
            if let Some(label) = r.label {
                if label >= self.num_classes() {
                    return Err(Error::LabelOutOfRange { label, classes: self.num_classes() });
                }
            }
            if r.path.contains('\t') || r.speaker_id.contains('\t') {
                return Err(Error::Manifest { line: i + 2, reason: "fields may not contain tabs".into() });
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#classes: {}\n", self.class_names.join(","));
        for r in &self.records {
            let label = r.label.map_or_else(|| "-".to_string(), |l| l.to_string());
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.path, label, r.session_id, r.speaker_id));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut class_names = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#classes:") {
                let names = rest.trim().split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                class_names = Some(names);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Manifest {
                    line: line_no,
                    reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let bad = |what: &str| Error::Manifest { line: line_no, reason: format!("invalid {what}") };
            let label = match fields[1] {
                "-" => None,
                s => Some(s.parse().map_err(|_| bad("label id"))?),
            };
            records.push(ManifestRecord {
                path: fields[0].to_string(),
                label,
                session_id: fields[2].parse().map_err(|_| bad("session id"))?,
                speaker_id: fields[3].to_string(),
            });
        }
        let class_names = class_names.ok_or(Error::Manifest { line: 1, reason: "missing #classes header".into() })?;
        let manifest = Manifest { records, class_names };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// A manifest together with every feature file it references, loaded in
/// manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub sequences: Vec<FrameSequence>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = Manifest::read(root.join(MANIFEST_FILE))?;
        let mut sequences = Vec::with_capacity(manifest.records.len());
        let mut dim = None;
        for r in &manifest.records {
            let mut seq = read_feature_file(root.join(&r.path))?;
            match dim {
                None => dim = Some(seq.dim()),
                Some(d) if d != seq.dim() => {
                    return Err(Error::Shape(format!("{} has D = {}, dataset has D = {d}", r.path, seq.dim())))
                }
                _ => {}
            }
            seq.label = r.label;
            seq.session_id = r.session_id;
            seq.speaker_id = r.speaker_id.clone();
            sequences.push(seq);
        }
        Ok(Self { root, manifest, sequences })
    }

    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, FrameSequence::dim)
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(FrameSequence::len).max().unwrap_or(0)
    }
}

/// Writes a manifest plus its feature files under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, manifest: &Manifest, seqs: &[FrameSequence]) -> Result<()> {
    let dir = dir.as_ref();
    if manifest.records.len() != seqs.len() {
        return Err(Error::Shape(format!("{} manifest records for {} sequences", manifest.records.len(), seqs.len())));
    }
    for (r, seq) in manifest.records.iter().zip(seqs) {
        let path = dir.join(&r.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_feature_file(seq, &path)?;
    }
    manifest.write(dir.join(MANIFEST_FILE))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub validation_session: u32,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// One fold per session: fold `i` validates on the `i`-th smallest session id
/// and trains on every other session.
pub fn make_folds(manifest: &Manifest) -> Result<FoldPlan> {
    let sessions = manifest.sessions();
    if sessions.len() < 2 {
        return Err(Error::SingleSession(sessions.len()));
    }
    let folds = sessions
        .iter()
        .map(|&s| {
            let (validation, train) = (0..manifest.records.len()).partition(|&i| manifest.records[i].session_id == s);
            Fold { validation_session: s, train, validation }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Writes `bytes` through a buffered writer; shared by the other container
/// formats.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(t: usize, d: usize) -> FrameSequence {
        FrameSequence::new(Array2::from_shape_fn((t, d), |(i, j)| (i * d + j) as f32 * 0.25 - 3.0))
    }

    #[test]
    fn round_trip_and_header_echo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wapf");
        let s = seq(10, 1024);
        write_feature_file(&s, &p).unwrap();
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back.frames.dim(), (10, 1024));
        assert_eq!(back.frames, s.frames);
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 10 * 1024 * 4);
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = seq(7, 3);
        write_feature_file(&s, dir.path().join("a")).unwrap();
        write_feature_file(&s, dir.path().join("b")).unwrap();
        assert_eq!(fs::read(dir.path().join("a")).unwrap(), fs::read(dir.path().join("b")).unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_feature_bytes(&array![[1.0f32, 2.0]]).unwrap();
        assert_eq!(&bytes[0..4], b"WAPF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = seq(3, 2);
        s.frames[[1, 1]] = f32::NAN;
        let err = write_feature_file(&s, dir.path().join("x")).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert!(!dir.path().join("x").exists());
    }

    #[test]
    fn malformed_files() {
        let mut bytes = encode_feature_bytes(&seq(4, 3).frames).unwrap();
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(decode_feature_bytes(&bad).unwrap_err().to_string().contains("bad magic"));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_feature_bytes(&v2), Err(Error::VersionMismatch { expected: 1, found: 2 })));

        let mut empty = bytes.clone();
        empty[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_feature_bytes(&empty), Err(Error::EmptySequence)));

        bytes.truncate(bytes.len() - 4);
        let err = decode_feature_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated payload"));
    }

    fn manifest(sessions: &[u32]) -> Manifest {
        Manifest {
            records: sessions
                .iter()
                .enumerate()
                .map(|(i, &s)| ManifestRecord {
                    path: format!("f{i}.wapf"),
                    label: Some(i % 2),
                    session_id: s,
                    speaker_id: format!("s{s}"),
                })
                .collect(),
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut m = manifest(&[1, 2, 3]);
        m.records[1].label = None;
        let parsed = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(parsed, m);
        assert!(m.to_text().starts_with("#classes: a,b\n"));
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_labels() {
        let mut m = manifest(&[1, 2]);
        m.records[1].path = m.records[0].path.clone();
        assert!(m.validate().is_err());
        let mut m = manifest(&[1, 2]);
        m.records[0].label = Some(5);
        assert!(matches!(m.validate(), Err(Error::LabelOutOfRange { .. })));
        assert!(Manifest::parse("a\t0\t1\tx\n").is_err());
    }

    #[test]
    fn five_session_folds() {
        let m = manifest(&[3, 1, 5, 2, 4, 1, 2, 3, 4, 5]);
        let plan = make_folds(&m).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for (i, fold) in plan.folds.iter().enumerate() {
            assert_eq!(fold.validation_session, i as u32 + 1);
            assert!(fold.validation.iter().all(|&r| m.records[r].session_id == fold.validation_session));
            assert!(fold.train.iter().all(|&r| m.records[r].session_id != fold.validation_session));
            assert_eq!(fold.train.len() + fold.validation.len(), 10);
        }
        let mut all: Vec<usize> = plan.folds.iter().flat_map(|f| f.validation.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn two_sessions_minimal_and_single_session_error() {
        assert_eq!(make_folds(&manifest(&[0, 1])).unwrap().folds.len(), 2);
        assert!(matches!(make_folds(&manifest(&[4, 4, 4])), Err(Error::SingleSession(1))));
    }
}
