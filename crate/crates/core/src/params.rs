//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//! magic `D3PS`, version byte (1), u32 entry count, then per entry:
//! u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f64 values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name: {0}")]
    DuplicateName(String),
    #[error("unknown parameter: {0}")]
    UnknownName(String),
    #[error("tensor {name}: shape {shape:?} does not match {got} values")]
    BadLength { name: String, shape: Vec<usize>, got: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("shape mismatch copying {name}: {src:?} -> {dst:?}")]
    CopyShapeMismatch { name: String, src: Vec<usize>, dst: Vec<usize> },
}

/// Plain dense tensor (values only, no gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    /// Xavier-uniform fill: ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(shape: Vec<usize>, rng: &mut SplitMix64) -> Self {
        let (fan_in, fan_out) = match shape.len() {
            0 => (1, 1),
            1 => (shape[0], shape[0]),
            _ => (shape[0], shape[1]),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Self { shape, data }
    }
}

/// Ordered map from hierarchical parameter name to tensor.
/// Iteration follows insertion order, which is deterministic by construction.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_owned()));
        }
        if tensor.shape.iter().product::<usize>() != tensor.data.len() {
            return Err(ParamError::BadLength {
                name: name.to_owned(),
                shape: tensor.shape.clone(),
                got: tensor.data.len(),
            });
        }
        self.index.insert(name.to_owned(), self.tensors.len());
        self.order.push(name.to_owned());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.order.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Copy the tensor named `name` from `src` into this store.
    pub fn copy_from(&mut self, src: &ParamStore, name: &str) -> Result<(), ParamError> {
        let s = src.get(name).ok_or_else(|| ParamError::UnknownName(name.to_owned()))?;
        let d = self.get_mut(name).ok_or_else(|| ParamError::UnknownName(name.to_owned()))?;
        if s.shape != d.shape {
            return Err(ParamError::CopyShapeMismatch {
                name: name.to_owned(),
                src: s.shape.clone(),
                dst: d.shape.clone(),
            });
        }
        d.data.copy_from_slice(&s.data);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"D3PS");
        buf.push(1u8);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ParamError> {
            if *pos + n > bytes.len() {
                return Err(ParamError::BadCheckpoint("truncated file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"D3PS" {
            return Err(ParamError::BadCheckpoint("bad magic".into()));
        }
        let version = take(&mut pos, 1)?[0];
        if version != 1 {
            return Err(ParamError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| ParamError::BadCheckpoint("non-UTF-8 name".into()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            store.insert(&name, Tensor::new(shape, data))?;
        }
        Ok(store)
    }

    /// FNV-1a digest over names, shapes, and value bits. Used for the
    /// teacher-untouched check.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: &[u8]| {
            for &x in b {
                h ^= x as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in &t.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_uniqueness() {
        let mut ps = ParamStore::new();
        ps.insert("b", Tensor::zeros(vec![2])).unwrap();
        ps.insert("a", Tensor::zeros(vec![3])).unwrap();
        assert_eq!(ps.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert!(ps.insert("a", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.d3ps");
        let mut ps = ParamStore::new();
        ps.insert("enc.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.0, 3.25])).unwrap();
        ps.insert("bias", Tensor::new(vec![3], vec![0.5, 0.25, -0.125])).unwrap();
        ps.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"D3PS");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        // First entry: name length then "enc.w".
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 5);
        assert_eq!(&bytes[13..18], b"enc.w");

        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.names().collect::<Vec<_>>(), ps.names().collect::<Vec<_>>());
        assert_eq!(loaded.get("enc.w"), ps.get("enc.w"));
        assert_eq!(loaded.digest(), ps.digest());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.d3ps");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn xavier_bound() {
        let mut rng = SplitMix64::new(1);
        let t = Tensor::xavier(vec![8, 8], &mut rng);
        let bound = (6.0 / 16.0f64).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= bound));
        assert!(t.data.iter().any(|v| v.abs() > bound * 0.5));
    }
}
