//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "CO4CKPT\n"
//! version      u32       CHECKPOINT_VERSION
//! header_len   u64       byte length of the JSON header
//! header       JSON      {"version", "meta", "tensors": [{"name", "shape"}...]}
//! payload      f64 LE    tensors concatenated in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CO4CKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces the value of every parameter; shapes must be unchanged.
    pub fn set_data(&mut self, i: usize, data: Vec<T>) -> Result<()> {
        let shape = self.tensors[i].shape().to_vec();
        self.tensors[i] = Tensor::new(shape, data)?;
        Ok(())
    }

    /// Registers every parameter as a gradient-receiving leaf of `g`.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    /// Flattens all parameters in declaration order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            meta,
            tensors: self
                .iter()
                .map(|(n, t)| Entry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(20 + header.len() + self.num_scalars() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint, returning its metadata and parameters.
    pub fn load(path: impl AsRef<Path>) -> Result<(serde_json::Value, Self)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut payload = bytes[20 + hlen..].chunks_exact(8);
        let mut set = Self::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data: Vec<T> = payload
                .by_ref()
                .take(n)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            if data.len() != n {
                return Err(fmt(&format!("truncated payload in `{}`", e.name)));
            }
            set.push(e.name, Tensor::new(e.shape, data)?);
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(fmt("trailing bytes"));
        }
        Ok((header.meta, set))
    }

    /// Copies values from `other`, rejecting any name or shape mismatch.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format(format!(
                "checkpoint parameter names differ: expected {:?}, found {:?}",
                self.names, other.names
            )));
        }
        for (i, (mine, theirs)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::Format(format!(
                    "checkpoint shape mismatch for `{}`: {:?} vs {:?}",
                    self.names[i],
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}

impl<T> Index<ParamId> for ParamSet<T> {
    type Output = Tensor<T>;

    fn index(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }
}

/// Graph variables of a bound [`ParamSet`], parallel to its entries.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        p.push("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let p = sample();
        p.save(&path, serde_json::json!({"k": 1})).unwrap();
        let (meta, q) = ParamSet::<f64>::load(&path).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(p, q);
    }

    #[test]
    fn mismatches_rejected() {
        let p = sample();
        let mut renamed = ParamSet::new();
        renamed.push("a", p.tensors[0].clone());
        renamed.push("c", p.tensors[1].clone());
        assert!(p.clone().load_from(&renamed).is_err());

        let mut reshaped = ParamSet::new();
        reshaped.push("a", p.tensors[0].clone().reshape(vec![4]).unwrap());
        reshaped.push("b", p.tensors[1].clone());
        assert!(p.clone().load_from(&reshaped).is_err());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path, serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(ParamSet::<f64>::load(&path).is_err());
        fs::write(&path, b"NOTACKPT00000000000000").unwrap();
        assert!(ParamSet::<f64>::load(&path).is_err());
    }
}
