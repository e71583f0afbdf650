//! Single-file tensor container.
//!
//! Layout: an 8-byte little-endian header length `H`, then `H` bytes of UTF-8
//! JSON, then the payload. The header maps every tensor name to
//! `{"dtype", "shape", "offset_begin", "offset_end"}` with offsets relative to
//! the payload start; an optional `"__metadata__"` entry holds a string map.
//! Tensors are stored row-major, little-endian, contiguously in declaration
//! order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

/// Dense row-major tensor. Model weights are `F32`; delta files use `F64`
/// and sparsity masks `U8`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

pub(crate) fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("shape {shape:?} has a zero dimension")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Widens every element to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    fn write_le(&self, out: &mut impl Write) -> std::io::Result<()> {
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::U8(v) => out.write_all(v)?,
        }
        Ok(())
    }

    fn from_le(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        };
        Tensor::new(shape, data).map_err(|e| Error::Parse(e.to_string()))
    }

    fn payload_len(&self) -> usize {
        self.numel() * self.dtype().size()
    }
}

/// Bit-level equality, so NaN payloads compare equal to themselves.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

/// Ordered collection of uniquely named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: IndexMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::Argument(format!("{METADATA_KEY} is reserved")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate tensor name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_archive(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_archive(path)
    }

    /// Serialized header JSON, entries in declaration order.
    fn header_json(&self) -> Result<String> {
        let mut parts = Vec::with_capacity(self.entries.len() + 1);
        if !self.metadata.is_empty() {
            parts.push(format!(
                "{}:{}",
                serde_json::to_string(METADATA_KEY)?,
                serde_json::to_string(&self.metadata)?
            ));
        }
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let end = offset + t.payload_len();
            let info = HeaderEntry {
                dtype: t.dtype(),
                shape: t.shape.clone(),
                offset_begin: offset as u64,
                offset_end: end as u64,
            };
            parts.push(format!(
                "{}:{}",
                serde_json::to_string(name)?,
                serde_json::to_string(&info)?
            ));
            offset = end;
        }
        Ok(format!("{{{}}}", parts.join(",")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset_begin: u64,
    offset_end: u64,
}

/// Header object with key order and duplicates kept for validation.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, serde_json::Value>()? {
                    out.push(entry);
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

pub fn save_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    let header = archive.header_json()?;
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    for t in archive.entries.values() {
        t.write_le(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();
    let mut input = BufReader::new(file);

    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > file_len.saturating_sub(8) {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("header length {header_len} exceeds file size {file_len}"),
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    input.read_exact(&mut header)?;
    let header = std::str::from_utf8(&header)
        .map_err(|e| Error::Parse(format!("header is not UTF-8: {e}")))?;
    let RawHeader(raw) = serde_json::from_str(header)?;

    let mut archive = TensorArchive::new();
    let mut layout = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (name, value) in raw {
        if !seen.insert(name.clone()) {
            return Err(Error::Parse(format!("duplicate header entry {name}")));
        }
        if name == METADATA_KEY {
            archive.metadata = serde_json::from_value(value)
                .map_err(|e| Error::Parse(format!("bad {METADATA_KEY}: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Parse(format!("bad header entry {name}: {e}")))?;
        layout.push((name, entry));
    }

    let mut expected = 0u64;
    for (name, entry) in &layout {
        let n = element_count(&entry.shape).map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        let size = (n * entry.dtype.size()) as u64;
        if entry.offset_begin != expected || entry.offset_end != entry.offset_begin + size {
            return Err(Error::Parse(format!(
                "{name}: offsets [{}, {}) are not contiguous with expected start {expected} and size {size}",
                entry.offset_begin, entry.offset_end
            )));
        }
        expected = entry.offset_end;
    }
    let payload_len = file_len - 8 - header_len;
    if payload_len < expected {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("payload truncated: header declares {expected} bytes, file has {payload_len}"),
        )));
    }
    if payload_len > expected {
        return Err(Error::Parse(format!(
            "{} trailing bytes after payload",
            payload_len - expected
        )));
    }

    for (name, entry) in layout {
        let mut bytes = vec![0u8; (entry.offset_end - entry.offset_begin) as usize];
        input.read_exact(&mut bytes)?;
        let tensor = Tensor::from_le(entry.dtype, entry.shape, &bytes)?;
        archive.entries.insert(name, tensor);
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw(header: &str, payload: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&(header.len() as u64).to_le_bytes()).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.write_all(payload).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn minimal_file_loads() {
        let header = r#"{"layers.0.q_proj.weight":{"dtype":"f32","shape":[4,4],"offset_begin":0,"offset_end":64}}"#;
        let payload: Vec<u8> = (0..16).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let f = write_raw(header, &payload);
        let a = load_archive(f.path()).unwrap();
        assert_eq!(a.len(), 1);
        let t = a.get("layers.0.q_proj.weight").unwrap();
        assert_eq!(t.numel(), 16);
        assert_eq!(t.as_f32().unwrap()[5], 5.0);
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let header = r#"{"w":{"dtype":"f32","shape":[4,4],"offset_begin":0,"offset_end":64}}"#;
        let f = write_raw(header, &[0u8; 60]);
        assert!(matches!(load_archive(f.path()), Err(Error::Io(_))));
    }

    #[test]
    fn truncated_header_is_io_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&1000u64.to_le_bytes()).unwrap();
        f.write_all(b"{}").unwrap();
        assert!(matches!(load_archive(f.path()), Err(Error::Io(_))));
    }

    #[test]
    fn malformed_header_is_parse_error() {
        let f = write_raw("{not json", &[]);
        assert!(matches!(load_archive(f.path()), Err(Error::Parse(_))));
        let f = write_raw(r#"{"w":{"dtype":"f16","shape":[1],"offset_begin":0,"offset_end":2}}"#, &[0, 0]);
        assert!(matches!(load_archive(f.path()), Err(Error::Parse(_))));
    }

    #[test]
    fn duplicate_name_is_parse_error() {
        let header = r#"{"w":{"dtype":"u8","shape":[1],"offset_begin":0,"offset_end":1},"w":{"dtype":"u8","shape":[1],"offset_begin":1,"offset_end":2}}"#;
        let f = write_raw(header, &[1, 2]);
        assert!(matches!(load_archive(f.path()), Err(Error::Parse(_))));
    }

    #[test]
    fn non_contiguous_offsets_rejected() {
        let header = r#"{"a":{"dtype":"u8","shape":[1],"offset_begin":1,"offset_end":2},"b":{"dtype":"u8","shape":[1],"offset_begin":0,"offset_end":1}}"#;
        let f = write_raw(header, &[1, 2]);
        assert!(matches!(load_archive(f.path()), Err(Error::Parse(_))));
    }

    #[test]
    fn empty_archive_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.dppa");
        TensorArchive::new().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..], b"{}");
        assert!(load_archive(&p).unwrap().is_empty());
    }

    #[test]
    fn nan_bits_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.dppa");
        let odd_nan = f32::from_bits(0x7fc0_1234);
        let mut a = TensorArchive::new();
        a.insert("x", Tensor::from_f32(vec![3], vec![odd_nan, -0.0, f32::NAN]).unwrap())
            .unwrap();
        a.save(&p).unwrap();
        let b = load_archive(&p).unwrap();
        let v = b.get("x").unwrap().as_f32().unwrap();
        assert_eq!(v[0].to_bits(), 0x7fc0_1234);
        assert_eq!(v[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn insert_rejects_duplicates_and_bad_shapes() {
        let mut a = TensorArchive::new();
        a.insert("x", Tensor::from_u8(vec![1], vec![1]).unwrap()).unwrap();
        assert!(a.insert("x", Tensor::from_u8(vec![1], vec![1]).unwrap()).is_err());
        assert!(Tensor::from_f32(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_f32(vec![2, 2], vec![0.0; 3]).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..4, 0..3).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>(), n)
                    .prop_map(|b| TensorData::F32(b.into_iter().map(f32::from_bits).collect())),
                prop::collection::vec(any::<u64>(), n)
                    .prop_map(|b| TensorData::F64(b.into_iter().map(f64::from_bits).collect())),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ]
            .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn save_load_is_bit_exact(
            tensors in prop::collection::vec(arb_tensor(), 0..6),
            meta in prop::collection::btree_map("[a-z]{1,6}", "[ -~]{0,8}", 0..3),
        ) {
            let mut a = TensorArchive::new();
            for (i, t) in tensors.into_iter().enumerate() {
                a.insert(format!("t{i}.\"q\""), t).unwrap();
            }
            a.metadata = meta;
            let f = tempfile::NamedTempFile::new().unwrap();
            a.save(f.path()).unwrap();
            let b = load_archive(f.path()).unwrap();
            prop_assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
            prop_assert_eq!(a, b);
        }
    }
}
