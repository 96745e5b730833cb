//! `WAPC` checkpoint container.
//!
//! Layout (little-endian): magic `WAPC`, `u32` version, `u32` tensor count,
//! then per tensor in lexicographic name order: `u32` name length, UTF-8
//! name, `u32` rank, `rank x u32` dims, `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::param::Params;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self { dims: vec![a.nrows(), a.ncols()], data: a.iter().map(|&v| v as f32).collect() }
    }

    pub fn scalar(v: f64) -> Self {
        Self { dims: vec![1], data: vec![v as f32] }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            d => return Err(Error::Shape(format!("expected rank <= 2, got dims {d:?}"))),
        };
        Ok(Array2::from_shape_vec((r, c), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("dims match payload"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, Tensor::scalar(v));
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        t.data.first().map(|&v| f64::from(v)).ok_or_else(|| Error::Shape(format!("{name} is empty")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn array(&self, name: &str) -> Result<Array2<f64>> {
        self.get(name)?.to_array()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn put_params<P: Params + ?Sized>(&mut self, prefix: &str, model: &P) {
        model.visit(prefix, &mut |name, p| {
            self.tensors.insert(name.to_string(), Tensor::from_array(&p.value));
        });
    }

    /// Overwrites every parameter of `model` from tensors under `prefix`,
    /// resetting optimizer state.
    pub fn load_params<P: Params + ?Sized>(&self, prefix: &str, model: &mut P) -> Result<()> {
        let mut outcome = Ok(());
        model.visit_mut(prefix, &mut |name, p| {
            if outcome.is_err() {
                return;
            }
            match self.array(name) {
                Ok(a) if a.dim() == p.value.dim() => p.reset(a),
                Ok(a) => {
                    outcome = Err(Error::Shape(format!("{name}: checkpoint {:?}, model {:?}", a.dim(), p.value.dim())))
                }
                Err(e) => outcome = Err(e),
            }
        });
        outcome
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Shape("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data =
                r.take(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            ckpt.insert(name, Tensor { dims, data });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::features::write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::TruncatedPayload { expected: n, found: remaining });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_round_trip_through_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(3, 2, &mut rng);
        let mut ckpt = Checkpoint::new();
        ckpt.put_params("clf", &lin);
        ckpt.put_scalar("meta/heads", 4.0);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.scalar("meta/heads").unwrap(), 4.0);

        let mut other = Linear::new(3, 2, &mut rng);
        back.load_params("clf", &mut other).unwrap();
        let expected = lin.weight.value.mapv(|v| f64::from(v as f32));
        assert_eq!(other.weight.value, expected);
    }

    #[test]
    fn tensors_are_ordered_by_name() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("b", Tensor::scalar(1.0));
        ckpt.insert("a/z", Tensor::scalar(2.0));
        ckpt.insert("a", Tensor::scalar(3.0));
        let bytes = ckpt.to_bytes();
        // first name starts right after magic, version, count and name length
        assert_eq!(&bytes[16..17], b"a");
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
    }

    #[test]
    fn malformed_checkpoints() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("w", Tensor::from_array(&Param::filled(2, 2, 1.5).value));
        let bytes = ckpt.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ckpt = Checkpoint::new();
        ckpt.put_params("l", &Linear::new(3, 2, &mut rng));
        let mut wrong = Linear::new(4, 2, &mut rng);
        assert!(ckpt.load_params("l", &mut wrong).is_err());
        assert!(matches!(ckpt.load_params("missing", &mut wrong), Err(Error::MissingTensor(_))));
    }
}
