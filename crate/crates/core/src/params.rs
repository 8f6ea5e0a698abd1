//! Named parameter storage and the binary parameter container.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "SKSCPRM1"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (architecture, normalization, layout hash)
//! header_hash  32 bytes  SHA-256 of the header bytes
//! n_tensors    u32
//! n_tensors times:
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (u64 each)
//!   data       prod(dims) IEEE-754 f64
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SKSCPRM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, indexed like the store.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }
}

/// Source of tensors while registering a module's parameters.
pub trait ParamInit {
    /// `fan_in` is the number of inputs feeding each output unit; `None` marks a bias.
    fn tensor(&mut self, name: &str, shape: &[usize], fan_in: Option<usize>) -> Result<Tensor>;
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
pub struct FanInUniform<'a, R: Rng>(pub &'a mut R);

impl<R: Rng> ParamInit for FanInUniform<'_, R> {
    fn tensor(&mut self, _name: &str, shape: &[usize], fan_in: Option<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = match fan_in {
            None => vec![0.0; n],
            Some(f) => {
                let bound = 1.0 / (f.max(1) as f64).sqrt();
                (0..n).map(|_| self.0.random_range(-bound..=bound)).collect()
            }
        };
        Tensor::new(shape.to_vec(), data)
    }
}

/// Every tensor zero, biases included.
pub struct ZeroInit;

impl ParamInit for ZeroInit {
    fn tensor(&mut self, _name: &str, shape: &[usize], _fan_in: Option<usize>) -> Result<Tensor> {
        Ok(Tensor::zeros(shape))
    }
}

/// Takes tensors from a loaded container by name, checking shapes.
pub struct FromLoaded(pub HashMap<String, Tensor>);

impl ParamInit for FromLoaded {
    fn tensor(&mut self, name: &str, shape: &[usize], _fan_in: Option<usize>) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Container(format!(
                "tensor {name} has shape {:?}, architecture expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_container(header: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(64 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&Sha256::digest(&header_bytes));
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.names.iter().zip(&store.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Container("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a container into its header and tensors keyed by name (in file order).
pub fn decode_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Container("bad magic; not a parameter container".into()));
    }
    let hlen = r.u32()? as usize;
    let header_bytes = r.take(hlen)?;
    let hash = r.take(32)?;
    if Sha256::digest(header_bytes).as_slice() != hash {
        return Err(Error::Container("header hash mismatch".into()));
    }
    let header: serde_json::Value = serde_json::from_slice(header_bytes)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Container("trailing bytes after last tensor".into()));
    }
    Ok((header, tensors))
}

pub fn write_container(path: &Path, header: &serde_json::Value, store: &ParamStore) -> Result<()> {
    fs::write(path, encode_container(header, store)?).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trips(values in prop::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..6) {
            let mut store = ParamStore::new();
            let cut = values.len().min(split);
            store.add("a.w", Tensor::new(vec![cut], values[..cut].to_vec()).unwrap());
            store.add("b", Tensor::new(vec![1, values.len() - cut], values[cut..].to_vec()).unwrap());
            let header = serde_json::json!({"arch": {"f": 3}});
            let bytes = encode_container(&header, &store).unwrap();
            let (h, ts) = decode_container(&bytes).unwrap();
            prop_assert_eq!(h, header);
            prop_assert_eq!(ts.len(), 2);
            prop_assert_eq!(&ts[0].1, &store.tensors()[0]);
            prop_assert_eq!(&ts[1].1, &store.tensors()[1]);
        }
    }

    #[test]
    fn corrupted_header_detected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]));
        let mut bytes = encode_container(&serde_json::json!({"k": 1}), &store).unwrap();
        bytes[13] ^= 0x01;
        assert!(decode_container(&bytes).is_err());
        assert!(decode_container(b"nope").is_err());
    }

    #[test]
    fn little_endian_layout() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]));
        let bytes = encode_container(&serde_json::json!({}), &store).unwrap();
        assert_eq!(&bytes[..8], b"SKSCPRM1");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..], &1.0f64.to_le_bytes());
    }
}
