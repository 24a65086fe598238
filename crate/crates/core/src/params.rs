//! Named parameter storage and the flat checkpoint archive.
//!
//! Archive layout (little-endian):
//!
//! ```text
//! "MEDNCKPT"             8 bytes
//! version                u32 (= 1)
//! meta length, meta      u32, UTF-8 JSON
//! parameter count        u32
//! per parameter:
//!   name length, name    u16, UTF-8
//!   group                u8 (0 = motion, 1 = rest)
//!   dtype                u8 (1 = f64)
//!   rank, dims           u8, u32 * rank
//!   payload              row-major values
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{MednError, Result};
use crate::tensor::Tensor;

const ARCHIVE_MAGIC: &[u8; 8] = b"MEDNCKPT";
const ARCHIVE_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Motion,
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.groups.push(group);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamGroup)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.groups)
            .map(|((n, t), g)| (n.as_str(), t, *g))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `graph` as a differentiable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.variable(t.clone()))
                .collect(),
        }
    }

    /// Places every parameter on `graph` as a constant (inference).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.constant(t.clone()))
                .collect(),
        }
    }

    /// Copies values from `other` for every name they share with matching
    /// shapes; returns the names that were not found or did not fit.
    pub fn load_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut missing = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            match other.by_name(name) {
                Some(t) if t.shape() == self.tensors[i].shape() => self.tensors[i] = t.clone(),
                _ => missing.push(name.clone()),
            }
        }
        missing
    }

    pub fn write_archive<W: Write>(&self, mut w: W, meta: &str) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t, group) in self.iter() {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[match group {
                ParamGroup::Motion => 0,
                ParamGroup::Rest => 1,
            }])?;
            w.write_all(&[DTYPE_F64, t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads an archive back, returning the store and its metadata string.
    pub fn read_archive<R: Read>(mut r: R, origin: &str) -> Result<(ParamStore, String)> {
        let bad = |message: &str| MednError::Format {
            path: origin.to_string(),
            message: message.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(bad("not a parameter archive"));
        }
        if read_u32(&mut r)? != ARCHIVE_VERSION {
            return Err(bad("unsupported archive version"));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let mut head = [0u8; 3];
            r.read_exact(&mut head)?;
            let group = match head[0] {
                0 => ParamGroup::Motion,
                1 => ParamGroup::Rest,
                _ => return Err(bad("unknown parameter group")),
            };
            if head[1] != DTYPE_F64 {
                return Err(bad("unsupported parameter dtype"));
            }
            let dims = (0..head[2])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.id(&name).is_some() {
                return Err(bad("duplicate parameter name"));
            }
            store.add(name, Tensor::from_vec(&dims, data)?, group);
        }
        Ok((store, meta))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters placed on a particular graph, indexable by [`ParamId`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var<'g>)> + '_ {
        self.vars.iter().enumerate().map(|(i, v)| (ParamId(i), *v))
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add(
            "a.w",
            Tensor::from_vec(&[2, 2], vec![0.1, -3.5e-300, f64::MIN_POSITIVE, 7.0]).unwrap(),
            ParamGroup::Motion,
        );
        store.add("b", Tensor::scalar(1.0 / 3.0), ParamGroup::Rest);
        let mut buf = Vec::new();
        store.write_archive(&mut buf, "{\"k\":1}").unwrap();
        let (back, meta) = ParamStore::read_archive(buf.as_slice(), "mem").unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back, store);
        assert_eq!(back.group(back.id("a.w").unwrap()), ParamGroup::Motion);
    }

    #[test]
    fn archive_rejects_garbage() {
        let err = ParamStore::read_archive(&b"NOTACKPTxxxxxxxx"[..], "mem").unwrap_err();
        assert_eq!(err.kind(), "Format");
    }
}
