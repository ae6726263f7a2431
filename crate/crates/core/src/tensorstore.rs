//! Dense tensors, named tensor maps, and the on-disk checkpoint container.
//!
//! Container layout (little-endian throughout):
//!
//! ```text
//! [ u64 header length N ][ N bytes UTF-8 JSON header ][ raw tensor payloads ]
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype": "F32"|"F16", "shape": [..], "data_offsets": [begin, end]}` with
//! offsets relative to the first payload byte. An optional `__metadata__`
//! object of string pairs is carried through untouched. F16 payloads are
//! widened to f32 on read; writes are always F32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Fnv1a;

pub const METADATA_KEY: &str = "__metadata__";

/// A dense row-major f32 tensor with at least one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} has no elements"),
            });
        }
        if numel != data.len() {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} implies {numel} elements but {} were given", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub(crate) fn from_valid(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Same shape, new data produced elementwise.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_valid(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn map_indexed(&self, f: impl Fn(usize, f32) -> f32) -> Tensor {
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        Tensor::from_valid(self.shape.clone(), data)
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Named tensors in lexicographic name order, plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    /// Looks up a tensor, failing with `MissingTensor`.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor { name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// FNV-1a over names, shapes and raw f32 bytes in name order.
    /// Metadata does not participate.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::default();
        for (name, t) in &self.entries {
            h.update(&(name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(&(t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                h.update(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn into_entries(self) -> BTreeMap<String, Tensor> {
        self.entries
    }

    /// Serializes to the container format with F32 payloads.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyMap);
        }
        let mut header: BTreeMap<&str, HeaderValue<'_>> = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let len = (t.numel() * 4) as u64;
            header.insert(
                name,
                HeaderValue::Tensor {
                    dtype: "F32",
                    shape: &t.shape,
                    data_offsets: [offset, offset + len],
                },
            );
            offset += len;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY, HeaderValue::Metadata(&self.metadata));
        }
        let mut text = serde_json::to_string(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        while text.len() % 8 != 0 {
            text.push(' ');
        }

        let mut out = Vec::with_capacity(8 + text.len() + offset as usize);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in self.entries.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::MalformedHeader(format!(
                "declared header length {header_len} exceeds the {available} bytes after the prefix"
            )));
        }
        let header_end = 8 + header_len as usize;
        let text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(text)
            .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;
        let payload = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut specs = Vec::with_capacity(raw.len());
        for (name, value) in raw {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value).map_err(|e| {
                    Error::MalformedHeader(format!("`{METADATA_KEY}` must map strings to strings: {e}"))
                })?;
                continue;
            }
            let entry: HeaderEntry =
                serde_json::from_value(value).map_err(|e| Error::MalformedHeader(format!("entry `{name}`: {e}")))?;
            specs.push((name, entry));
        }

        let payload_len = payload.len() as u64;
        for (name, e) in &specs {
            if !matches!(e.dtype.as_str(), "F32" | "F16") {
                return Err(Error::UnsupportedDtype {
                    name: name.clone(),
                    dtype: e.dtype.clone(),
                });
            }
            let [begin, end] = e.data_offsets;
            if begin > end {
                return Err(Error::MalformedHeader(format!(
                    "entry `{name}`: begin offset {begin} is after end offset {end}"
                )));
            }
            if end > payload_len {
                return Err(Error::OffsetOutOfBounds {
                    name: name.clone(),
                    begin,
                    end,
                    len: payload_len,
                });
            }
        }

        let mut by_offset: Vec<&(String, HeaderEntry)> = specs.iter().collect();
        by_offset.sort_by_key(|(name, e)| (e.data_offsets, name.clone()));
        let mut cursor = 0u64;
        let mut prev: Option<&str> = None;
        for (name, e) in &by_offset {
            let [begin, end] = e.data_offsets;
            if begin < cursor {
                return Err(Error::OverlappingOffsets {
                    first: prev.unwrap_or_default().to_string(),
                    second: name.clone(),
                });
            }
            if begin > cursor {
                return Err(Error::OffsetGap(format!(
                    "bytes [{cursor}, {begin}) before `{name}` belong to no tensor"
                )));
            }
            cursor = end;
            prev = Some(name);
        }
        if cursor != payload_len {
            return Err(Error::OffsetGap(format!(
                "{} trailing payload bytes belong to no tensor",
                payload_len - cursor
            )));
        }

        let mut entries = BTreeMap::new();
        for (name, e) in specs {
            let numel: usize = e.shape.iter().product();
            if numel == 0 {
                return Err(Error::InvalidTensor {
                    name,
                    reason: format!("shape {:?} has no elements", e.shape),
                });
            }
            let elem_size = if e.dtype == "F16" { 2 } else { 4 };
            let [begin, end] = e.data_offsets;
            let span = (end - begin) as usize;
            if span != numel * elem_size {
                return Err(Error::InvalidTensor {
                    name,
                    reason: format!(
                        "shape {:?} of {} needs {} bytes but offsets span {span}",
                        e.shape,
                        e.dtype,
                        numel * elem_size
                    ),
                });
            }
            let raw = &payload[begin as usize..end as usize];
            let data: Vec<f32> = if elem_size == 2 {
                raw.chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            };
            let tensor = Tensor::from_valid(e.shape, data);
            if let Some(index) = tensor.first_non_finite() {
                return Err(Error::NonFinite { name, index });
            }
            entries.insert(name, tensor);
        }
        Ok(TensorMap { entries, metadata })
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorMap {
            entries: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderValue<'a> {
    Tensor {
        dtype: &'static str,
        shape: &'a [usize],
        data_offsets: [u64; 2],
    },
    Metadata(&'a BTreeMap<String, String>),
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorMap::from_bytes(&bytes)
}

pub fn write_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Checks that every map has the same tensor names and per-name shapes.
pub fn validate_compat(maps: &[&TensorMap]) -> Result<()> {
    let Some((first, rest)) = maps.split_first() else {
        return Err(Error::InvalidArgument(
            "compatibility check needs at least two checkpoints".into(),
        ));
    };
    if rest.is_empty() {
        return Err(Error::InvalidArgument(
            "compatibility check needs at least two checkpoints".into(),
        ));
    }
    for other in rest {
        for (name, t) in first.iter() {
            let o = other.require(name)?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| !first.contains(n)) {
            return Err(Error::MissingTensor { name: extra.clone() });
        }
    }
    Ok(())
}
