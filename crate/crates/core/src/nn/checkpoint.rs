//! Single-file tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8     magic "CTXENC01"
//! bytes 8..16    u64 manifest length L
//! bytes 16..16+L UTF-8 JSON manifest
//! rest           data section: raw little-endian element bytes
//! ```
//!
//! The manifest is `{"metadata": {..}, "tensors": [{"name", "dtype",
//! "shape", "offset", "nbytes"}, ..]}` with `offset` counted from the start
//! of the data section and `dtype` one of `f32`, `f64`, `u8`. Tensors are
//! stored in insertion order without padding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CTXENC01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Container {
    pub manifest: Manifest,
    data: Vec<u8>,
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        "u8" => Some(1),
        _ => None,
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.manifest.metadata.insert(key.into(), value.into());
    }

    fn push_bytes(&mut self, name: &str, dtype: &str, shape: &[usize], bytes: &[u8]) -> Result<()> {
        if self.entry(name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name '{name}'")));
        }
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: dtype.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len() as u64,
            nbytes: bytes.len() as u64,
        });
        self.data.extend_from_slice(bytes);
        Ok(())
    }

    pub fn push_real<T: Real>(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        let mut bytes = Vec::with_capacity(tensor.len() * T::BYTES);
        for &v in tensor.data() {
            v.write_le(&mut bytes);
        }
        self.push_bytes(name, T::DTYPE, tensor.shape(), &bytes)
    }

    pub fn push_u8(&mut self, name: &str, shape: &[usize], values: &[u8]) -> Result<()> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Format(format!("'{name}': shape {shape:?} does not match {} bytes", values.len())));
        }
        self.push_bytes(name, "u8", shape, values)
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.manifest.tensors.iter().find(|e| e.name == name)
    }

    fn slice(&self, name: &str) -> Result<(&TensorEntry, &[u8])> {
        let e = self.entry(name).ok_or_else(|| Error::Format(format!("tensor '{name}' not found")))?;
        let start = e.offset as usize;
        Ok((e, &self.data[start..start + e.nbytes as usize]))
    }

    /// Reads a floating-point tensor, converting between `f32` and `f64`.
    pub fn get_real<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let (e, bytes) = self.slice(name)?;
        let values: Vec<T> = match e.dtype.as_str() {
            "f32" => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            "f64" => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            other => return Err(Error::Format(format!("'{name}' has dtype {other}, expected a float type"))),
        };
        Tensor::new(&e.shape, values)
    }

    pub fn get_u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let (e, bytes) = self.slice(name)?;
        if e.dtype != "u8" {
            return Err(Error::Format(format!("'{name}' has dtype {}, expected u8", e.dtype)));
        }
        Ok((e.shape.clone(), bytes.to_vec()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.len() - 16;
        if len > body {
            return Err(Error::Format(format!("manifest length {len} exceeds file body of {body} bytes")));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len])?;
        let data = bytes[16 + len..].to_vec();
        for e in &manifest.tensors {
            let size = dtype_size(&e.dtype).ok_or_else(|| Error::Format(format!("'{}': unknown dtype {}", e.name, e.dtype)))?;
            let expected = e.shape.iter().product::<usize>() * size;
            if e.nbytes as usize != expected {
                return Err(Error::Format(format!("'{}': {} bytes for shape {:?}", e.name, e.nbytes, e.shape)));
            }
            if (e.offset + e.nbytes) as usize > data.len() {
                return Err(Error::Format(format!(
                    "'{}': bytes {}..{} past data section of {}",
                    e.name,
                    e.offset,
                    e.offset + e.nbytes,
                    data.len()
                )));
            }
        }
        Ok(Container { manifest, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Parameters, then running statistics as `<name>.mean` / `<name>.var`.
pub fn store_to_container<T: Real>(store: &ParamStore<T>) -> Result<Container> {
    let mut c = Container::new();
    for p in store.params() {
        c.push_real(&p.name, &p.value)?;
    }
    for (name, s) in store.running_stats() {
        c.push_real(&format!("{name}.mean"), &Tensor::from_vec(&[s.mean.len()], s.mean.clone()))?;
        c.push_real(&format!("{name}.var"), &Tensor::from_vec(&[s.var.len()], s.var.clone()))?;
    }
    Ok(c)
}

/// Overwrites every tensor in `store` from the container; missing names or
/// shape mismatches are errors.
pub fn load_into_store<T: Real>(container: &Container, store: &mut ParamStore<T>) -> Result<()> {
    for p in store.params_mut() {
        let t = container.get_real::<T>(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!("'{}': checkpoint shape {:?} vs model {:?}", p.name, t.shape(), p.value.shape())));
        }
        p.value = t;
    }
    for (name, s) in store.running_stats_mut() {
        let mean = container.get_real::<T>(&format!("{name}.mean"))?;
        let var = container.get_real::<T>(&format!("{name}.var"))?;
        if mean.len() != s.mean.len() || var.len() != s.var.len() {
            return Err(Error::Format(format!("'{name}': running statistics have the wrong channel count")));
        }
        s.mean = mean.into_data();
        s.var = var.into_data();
    }
    Ok(())
}

pub fn save_store<T: Real>(store: &ParamStore<T>, metadata: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut c = store_to_container(store)?;
    c.manifest.metadata = metadata.clone();
    c.write(path)
}

pub fn load_store<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<BTreeMap<String, String>> {
    let c = Container::read(path)?;
    load_into_store(&c, store)?;
    Ok(c.manifest.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_mixed_dtypes() {
        let mut c = Container::new();
        c.set_metadata("kind", "test");
        let a = Tensor::from_vec(&[2, 2], vec![1.5f32, -2.0, 0.25, 3.0]);
        let b = Tensor::from_vec(&[3], vec![1e-300f64, 2.0, -7.5]);
        c.push_real("a", &a).unwrap();
        c.push_real("b", &b).unwrap();
        c.push_u8("m", &[2, 2], &[0, 1, 255, 3]).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_real::<f32>("a").unwrap(), a);
        assert_eq!(back.get_real::<f64>("b").unwrap(), b);
        assert_eq!(back.get_u8("m").unwrap().1, vec![0, 1, 255, 3]);
        assert_eq!(back.entry("b").unwrap().offset, 16);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.push_real("a", &Tensor::from_vec(&[4], vec![1.0f64; 4])).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(c.push_real("a", &Tensor::from_vec(&[1], vec![0.0f64])).is_err());
    }
}
