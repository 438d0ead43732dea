//! Binary checkpoints: magic, format version, JSON manifest, little-endian
//! tensor payload, trailing xxh64 over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"LANCERCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub precision: Precision,
    pub config_hash: String,
    /// Free-form metadata (serialized config, training reports).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(kind: &str, config_hash: &str, meta: serde_json::Value) -> Self {
        Checkpoint {
            manifest: Manifest {
                kind: kind.into(),
                precision: T::PRECISION,
                config_hash: config_hash.into(),
                meta,
                tensors: Vec::new(),
            },
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `store` under `prefix/name`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.manifest.tensors.push(TensorEntry {
                name: format!("{prefix}/{name}"),
                shape: t.shape().to_vec(),
            });
            let mut copy = Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("consistent tensor");
            copy.requires_grad = false;
            self.tensors.push(copy);
        }
    }

    /// Loads every `prefix/…` tensor into `store`; each store parameter must
    /// be present.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let mut found = 0;
        for (entry, t) in self.manifest.tensors.iter().zip(&self.tensors) {
            if let Some(name) = entry.name.strip_prefix(prefix).and_then(|n| n.strip_prefix('/')) {
                store.load_values(name, &entry.shape, t.values().to_vec())?;
                found += 1;
            }
        }
        if found != store.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {found} of {} {prefix} tensors",
                store.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("serializable manifest");
        let mut out = Vec::with_capacity(32 + manifest.len() + self.tensors.iter().map(|t| t.numel() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for &v in t.values() {
                v.write_le(&mut out);
            }
        }
        let sum = xxh64(&out, 0);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 28 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if xxh64(body, 0) != u64::from_le_bytes(trailer.try_into().expect("8 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let manifest_end = 20usize.checked_add(mlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("manifest overruns file"))?;
        let manifest: Manifest = serde_json::from_slice(&body[20..manifest_end]).map_err(|e| corrupt(&e.to_string()))?;
        if manifest.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "checkpoint stores {} values, run uses {}",
                manifest.precision.as_str(),
                T::PRECISION.as_str()
            )));
        }
        let width = T::PRECISION.byte_width();
        let mut cursor = manifest_end;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let end = cursor + n * width;
            if end > body.len() {
                return Err(corrupt("tensor data truncated"));
            }
            let values = body[cursor..end].chunks_exact(width).map(T::read_le).collect();
            tensors.push(Tensor::new(entry.shape.clone(), values)?);
            cursor = end;
        }
        if cursor != body.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Refuses a checkpoint produced under a different config hash.
    pub fn check_hash(&self, expected: &str, artifact: &str) -> Result<()> {
        if self.manifest.config_hash != expected {
            return Err(Error::ConfigHash {
                artifact: artifact.into(),
                expected: expected.into(),
                found: self.manifest.config_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Trailing checksum of an encoded checkpoint, as 16 hex digits.
pub fn file_hash(bytes: &[u8]) -> String {
    let tail: [u8; 8] = bytes[bytes.len().saturating_sub(8)..].try_into().unwrap_or([0; 8]);
    format!("{:016x}", u64::from_le_bytes(tail))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut s = ParamStore::<f32>::new(1);
        s.add("w", Tensor::new(vec![2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap());
        s.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let mut c = Checkpoint::new("test", "abc", serde_json::json!({"note": 1}));
        c.push_store("model", &s);
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = sample().to_bytes();
        let p = Path::new("x");
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Corrupt { .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped, p), Err(Error::Corrupt { .. })));
        let mut newer = bytes.clone();
        newer[8] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&newer, p), Err(Error::Version { found: 9, .. })));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes, p), Err(Error::Config(_))));
    }

    #[test]
    fn restore_into_store() {
        let c = sample();
        let mut s = ParamStore::<f32>::new(5);
        s.add("w", Tensor::zeros(vec![2, 2]));
        s.add("b", Tensor::zeros(vec![3]));
        c.restore_store("model", &mut s).unwrap();
        assert_eq!(s.get(s.find("b").unwrap()).values(), &[0.1, 0.2, 0.3]);
        let mut wrong = ParamStore::<f32>::new(5);
        wrong.add("w", Tensor::zeros(vec![4]));
        assert!(c.restore_store("model", &mut wrong).is_err());
        assert!(c.check_hash("abc", "x").is_ok());
        assert!(c.check_hash("def", "x").is_err());
    }
}
