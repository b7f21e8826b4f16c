//! Named parameter storage and the `BKPT` checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BKPT"  version:u32  count:u32
//! repeat count times:
//!     name_len:u32  name:[u8; name_len]  rank:u32  extents:[u64; rank]  values:[f32; product(extents)]
//! ```
//!
//! Values are stored in single precision. Loading then saving reproduces the
//! file byte for byte.

use std::collections::HashMap;
use std::ops::Index;
use std::path::Path;

use super::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"BKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(index: usize) -> Self {
        ParamId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Record every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Record every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> std::result::Result<(), String> {
        if self.len() != other.len() {
            return Err(format!("{} entries vs {}", self.len(), other.len()));
        }
        for (i, (a, b)) in self.iter().zip(other.iter()).enumerate() {
            if a.0 != b.0 {
                return Err(format!("entry {i}: {} vs {}", a.0, b.0));
            }
            if a.1.shape() != b.1.shape() {
                return Err(format!("{}: shape {:?} vs {:?}", a.0, a.1.shape(), b.1.shape()));
            }
        }
        Ok(())
    }

    /// Round every value to single precision, the checkpoint storage type.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 4);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::format("BKPT", "bad magic"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format("BKPT", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("BKPT", "entry name is not UTF-8"))?
                .to_string();
            if store.index.contains_key(&name) {
                return Err(Error::format("BKPT", format!("duplicate entry {name}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("BKPT", "extent overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::format("BKPT", e.to_string()))?;
            store.add(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("BKPT", "trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("BKPT", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters recorded on a tape, indexable by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap variables already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collect per-parameter gradients (zeros where a parameter was not reached).
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(store.ids())
            .map(|(&v, id)| match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; store.get(id).numel()],
            })
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_corrupt_checkpoints() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::ones([2]));
        let bytes = s.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(ParamStore::from_bytes(&long).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_bytes_round_trip(
            entries in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 1..4), -1e3f32..1e3), 1..5)
        ) {
            let mut s = ParamStore::new();
            for (i, (shape, seed)) in entries.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| (seed * (j as f32 + 1.0)) as f64).collect();
                s.add(format!("layer{i}.w"), Tensor::new(shape.clone(), data).unwrap());
            }
            let bytes = s.to_bytes();
            let back = ParamStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
