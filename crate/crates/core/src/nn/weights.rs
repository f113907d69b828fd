//! Named parameter tensors and their on-disk archive.
//!
//! Archive layout: 8-byte little-endian header length, a JSON header mapping
//! tensor names to `{dtype, shape, offset}`, then the raw little-endian data
//! blob. Offsets are relative to the start of the blob.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConsultError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parameters and buffers of a network, keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    tensors: BTreeMap<String, Tensor>,
    /// Free-form provenance (for instance the initialisation identifier).
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tensors: BTreeMap<String, HeaderEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

const FORMAT: &str = "consult-weights";

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panics if missing; callers validate the set against its config first.
    pub fn data(&self, name: &str) -> &[f64] {
        match self.tensors.get(name) {
            Some(t) => &t.data,
            None => panic!("missing tensor `{name}`"),
        }
    }

    pub fn data_mut(&mut self, name: &str) -> &mut [f64] {
        match self.tensors.get_mut(name) {
            Some(t) => &mut t.data,
            None => panic!("missing tensor `{name}`"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> WeightSet {
        WeightSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    /// `self += scale * other` over the tensors both sets share.
    pub fn add_scaled(&mut self, other: &WeightSet, scale: f64) {
        for (k, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(k) {
                t.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of the tensor payloads (metadata ignored).
    pub fn bit_equal(&self, other: &WeightSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, t)| {
                other.tensors.get(k).is_some_and(|o| {
                    o.shape == t.shape && o.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }

    /// SHA-256 over names, shapes and little-endian payloads in name order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (k, t) in &self.tensors {
            entries.insert(
                k.clone(),
                HeaderEntry {
                    dtype: "f64".into(),
                    shape: t.shape.clone(),
                    offset,
                },
            );
            offset += 8 * t.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT.into(),
            version: 1,
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for t in self.tensors.values() {
            let mut buf = Vec::with_capacity(8 * t.len());
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(ConsultError::Data(format!("implausible weight header length {len}")));
        }
        let mut header = vec![0u8; len];
        input.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.format != FORMAT {
            return Err(ConsultError::Data(format!("unknown weight format `{}`", header.format)));
        }
        let mut blob = Vec::new();
        input.read_to_end(&mut blob)?;
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => return Err(ConsultError::Data(format!("unsupported dtype `{other}` for `{name}`"))),
            };
            let start = e.offset as usize;
            let end = start + n * width;
            if end > blob.len() {
                return Err(ConsultError::Data(format!("tensor `{name}` runs past the end of the archive")));
            }
            let bytes = &blob[start..end];
            let data: Vec<f64> = if width == 8 {
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            };
            tensors.insert(name, Tensor { shape: e.shape, data });
        }
        Ok(WeightSet {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
