//! Named tensor store and its binary container format.
//!
//! File layout: the magic bytes `NAT1`, then one record per tensor until end
//! of file. A record is a `u32` little-endian byte length, a UTF-8 JSON header
//! `{"dtype":"f32","name":...,"shape":[...]}` of that length, and the
//! row-major little-endian `f32` payload. Records are written in name order.
//! A bundle's metadata, when present, is stored first as a record named
//! [`METADATA_RECORD`] with dtype `utf8` and shape `[byte length]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, ParamId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NAT1";
pub const METADATA_RECORD: &str = "#metadata";

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    dtype: String,
    name: String,
    shape: Vec<usize>,
}

/// Running statistics never receive gradients.
pub fn is_trainable_name(name: &str) -> bool {
    !(name.ends_with("running_mean") || name.ends_with("running_var"))
}

/// Named tensors, the unit of checkpointing and parameter mapping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterBundle {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
    /// Architecture JSON describing the network these tensors belong to.
    pub metadata: Option<String>,
}

impl ParameterBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Inserts or replaces a tensor, keeping its id stable on replacement.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.tensors[id] = tensor;
            return id;
        }
        let id = self.tensors.len();
        self.tensors.push(tensor);
        self.names.push(name.clone());
        self.index.insert(name, id);
        id
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("no tensor named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    /// Two distinct tensors borrowed mutably at once.
    pub fn pair_mut(&mut self, a: &str, b: &str) -> Result<(&mut Tensor, &mut Tensor)> {
        let (ia, ib) = (self.id(a)?, self.id(b)?);
        if ia == ib {
            return Err(Error::contract(format!("`{a}` borrowed twice")));
        }
        if ia < ib {
            let (lo, hi) = self.tensors.split_at_mut(ib);
            Ok((&mut lo[ia], &mut hi[0]))
        } else {
            let (lo, hi) = self.tensors.split_at_mut(ia);
            Ok((&mut hi[0], &mut lo[ib]))
        }
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// `(name, tensor)` in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.index.iter().map(|(n, &id)| (n.as_str(), &self.tensors[id]))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        let mut slots: Vec<Option<&mut Tensor>> = self.tensors.iter_mut().map(Some).collect();
        let order: Vec<(&str, ParamId)> = self.index.iter().map(|(n, &id)| (n.as_str(), id)).collect();
        order
            .into_iter()
            .map(move |(n, id)| (n, slots[id].take().expect("unique ids")))
            .collect::<Vec<_>>()
            .into_iter()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of every tracked parameter leaf into the bundle.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (id, var) in tape.tracked_params() {
            if let Some(g) = grads.get(var) {
                self.tensors
                    .get_mut(id)
                    .ok_or_else(|| Error::contract(format!("tape references unknown parameter {id}")))?
                    .accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut record = |dtype: &str, name: &str, shape: Vec<usize>, payload: &[u8]| -> Result<()> {
            let header = RecordHeader {
                dtype: dtype.into(),
                name: name.to_string(),
                shape,
            };
            let json = serde_json::to_vec(&header)?;
            let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&json);
            out.extend_from_slice(payload);
            Ok(())
        };
        if let Some(meta) = &self.metadata {
            record("utf8", METADATA_RECORD, vec![meta.len()], meta.as_bytes())?;
        }
        for (name, t) in self.iter() {
            let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            record("f32", name, t.shape().to_vec(), &payload)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing NAT1 magic".into()));
        }
        let mut pos = 4;
        let mut bundle = ParameterBundle::new();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("truncated record at byte {}", *pos)))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        while pos < bytes.len() {
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
            let header: RecordHeader = serde_json::from_slice(take(&mut pos, len)?)?;
            if header.name == METADATA_RECORD && header.dtype == "utf8" && header.shape.len() == 1 {
                let text = std::str::from_utf8(take(&mut pos, header.shape[0])?)
                    .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
                bundle.metadata = Some(text.to_string());
                continue;
            }
            if header.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    header.name, header.dtype
                )));
            }
            let numel: usize = header.shape.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if bundle.contains(&header.name) {
                return Err(Error::Format(format!("duplicate tensor `{}`", header.name)));
            }
            let mut t = Tensor::new(header.shape, data)?;
            t.requires_grad = is_trainable_name(&header.name);
            bundle.insert(header.name, t);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies only the tensors whose names satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut out = ParameterBundle::new();
        for (name, t) in self.iter() {
            if keep(name) {
                out.insert(name, t.clone());
            }
        }
        out.metadata = self.metadata.clone();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(ParameterBundle::from_bytes(b"NAT0"), Err(Error::Format(_))));
        let mut b = ParameterBundle::new();
        b.insert("w", Tensor::ones(&[2, 2]));
        let bytes = b.to_bytes().unwrap();
        assert!(ParameterBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn header_layout_is_sorted_json() {
        let mut b = ParameterBundle::new();
        b.insert("a/w", Tensor::ones(&[1]));
        let bytes = b.to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert_eq!(header, r#"{"dtype":"f32","name":"a/w","shape":[1]}"#);
        assert_eq!(&bytes[8 + len..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn metadata_round_trips() {
        let mut b = ParameterBundle::new();
        b.insert("w", Tensor::ones(&[3]));
        b.metadata = Some(r#"{"v":1,"blocks":[]}"#.into());
        let back = ParameterBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back.metadata, b.metadata);
        assert_eq!(back.names().count(), 1);
        assert_eq!(back.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn pair_mut_either_order() {
        let mut b = ParameterBundle::new();
        b.insert("x", Tensor::zeros(&[1]));
        b.insert("y", Tensor::ones(&[1]));
        let (y, x) = b.pair_mut("y", "x").unwrap();
        assert_eq!((y.item(), x.item()), (1.0, 0.0));
        assert!(b.pair_mut("x", "x").is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            tensors in prop::collection::btree_map(
                "[a-z]{1,6}(/[a-z0-9_]{1,6}){0,3}",
                (prop::collection::vec(1usize..4, 1..4), any::<u32>()),
                1..6,
            )
        ) {
            let mut b = ParameterBundle::new();
            for (name, (shape, seed)) in &tensors {
                let numel: usize = shape.iter().product();
                let data = (0..numel).map(|i| f32::from_bits(seed.wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff)).collect();
                b.insert(name.clone(), Tensor::new(shape.clone(), data).unwrap());
            }
            let bytes = b.to_bytes().unwrap();
            let back = ParameterBundle::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            for (name, t) in b.iter() {
                let u = back.get(name).unwrap();
                prop_assert_eq!(t.shape(), u.shape());
                let same = t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }
}
