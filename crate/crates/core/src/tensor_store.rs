//! Reading and writing checkpoint archives of named tensors.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of UTF-8
//! JSON mapping tensor names to `{"dtype", "shape", "data_offsets"}`, then the
//! packed little-endian payload. Offsets are relative to the first payload
//! byte. An optional `"__metadata__"` key maps strings to strings.
//!
//! Writing is canonical: metadata first, tensors in lexicographic order,
//! payload packed with no gaps, header padded with spaces to a multiple of 8.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("truncated archive: {0}")]
    Truncated(String),
    #[error("malformed JSON header: {0}")]
    MalformedHeader(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {tensor:?}: invalid header entry: {reason}")]
    InvalidEntry { tensor: String, reason: String },
    #[error("tensor {tensor:?}: unknown dtype {dtype:?}")]
    UnknownDtype { tensor: String, dtype: String },
    #[error("tensor {tensor:?}: invalid shape {shape:?}")]
    InvalidShape { tensor: String, shape: Vec<usize> },
    #[error("tensor {tensor:?}: offset range mismatch, shape needs {expected} bytes but range spans {actual}")]
    OffsetMismatch { tensor: String, expected: usize, actual: usize },
    #[error("tensor {tensor:?}: data range ends at {end}, payload is {len} bytes")]
    OutOfBounds { tensor: String, end: usize, len: usize },
    #[error("tensor {tensor:?}: data range overlaps tensor {other:?}")]
    Overlap { tensor: String, other: String },
    #[error("tensor {tensor:?}: {reason}")]
    InvalidTensor { tensor: String, reason: String },
    #[error("tensor {tensor:?}: not a matrix-like tensor (rank {rank})")]
    NotMatrix { tensor: String, rank: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A named, shaped tensor holding its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: DType,
        data: Vec<u8>,
    ) -> Result<Self, CheckpointError> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(CheckpointError::InvalidTensor {
                tensor: name,
                reason: "name is reserved for metadata".into(),
            });
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(CheckpointError::InvalidShape { tensor: name, shape });
        }
        let expected = shape.iter().product::<usize>() * dtype.byte_width();
        if data.len() != expected {
            return Err(CheckpointError::InvalidTensor {
                tensor: name,
                reason: format!("buffer has {} bytes, shape needs {expected}", data.len()),
            });
        }
        Ok(Self { name, shape, dtype, data })
    }

    /// Encodes `values` in `dtype`; F32 narrowing rounds to nearest even.
    pub fn from_f64(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: DType,
        values: &[f64],
    ) -> Result<Self, CheckpointError> {
        Self::new(name, shape, dtype, encode(dtype, values))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Values promoted to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self.data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => self.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        }
    }

    /// A tensor with the same name, shape and dtype holding `values`.
    pub fn with_values(&self, values: &[f64]) -> Result<Self, CheckpointError> {
        Self::from_f64(self.name.clone(), self.shape.clone(), self.dtype, values)
    }

    /// Flattens to `shape[0] x product(shape[1..])`, so a conv kernel
    /// `[c_out, c_in, k, k]` becomes `c_out x (c_in * k * k)`.
    pub fn as_matrix(&self) -> Result<Matrix, CheckpointError> {
        if self.rank() < 2 {
            return Err(CheckpointError::NotMatrix { tensor: self.name.clone(), rank: self.rank() });
        }
        let rows = self.shape[0];
        let cols = self.numel() / rows;
        Ok(Matrix::from_vec(rows, cols, self.to_f64()).expect("shape checked at construction"))
    }
}

fn encode(dtype: DType, values: &[f64]) -> Vec<u8> {
    match dtype {
        DType::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        DType::F64 => values.iter().flat_map(|&v| v.to_le_bytes()).collect(),
    }
}

/// Named tensors in lexicographic order plus optional string metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = Tensor>) -> Result<Self, CheckpointError> {
        let mut ckpt = Self::new();
        for t in tensors {
            ckpt.insert(t)?;
        }
        Ok(ckpt)
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, tensor: Tensor) -> Result<(), CheckpointError> {
        if self.tensors.contains_key(tensor.name()) {
            return Err(CheckpointError::DuplicateName(tensor.name.clone()));
        }
        self.tensors.insert(tensor.name.clone(), tensor);
        Ok(())
    }

    /// Replaces an existing tensor of the same name, or inserts it.
    pub fn replace(&mut self, tensor: Tensor) {
        self.tensors.insert(tensor.name.clone(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        read_checkpoint(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, write_checkpoint(self))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct EntryOut<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

#[derive(Deserialize)]
struct EntryIn {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Header keys in file order, so duplicates can be reported.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some(kv) = map.next_entry::<String, serde_json::Value>()? {
                    out.push(kv);
                }
                Ok(RawHeader(out))
            }
        }
        de.deserialize_map(V)
    }
}

/// Parses an archive, materializing every tensor.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| CheckpointError::Truncated("missing 8-byte header length".into()))?
        .try_into()
        .unwrap();
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| CheckpointError::Truncated("header length overflows".into()))?;
    let header_end = 8usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        CheckpointError::Truncated(format!("header declares {header_len} bytes, only {} available", bytes.len() - 8))
    })?;
    let header =
        std::str::from_utf8(&bytes[8..header_end]).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let RawHeader(raw) = serde_json::from_str(header).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut metadata = None;
    let mut entries: BTreeMap<String, EntryIn> = BTreeMap::new();
    for (name, value) in raw {
        if name == METADATA_KEY {
            let map: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| CheckpointError::MalformedHeader(format!("{METADATA_KEY}: {e}")))?;
            metadata = Some(map);
            continue;
        }
        let entry: EntryIn = serde_json::from_value(value)
            .map_err(|e| CheckpointError::InvalidEntry { tensor: name.clone(), reason: e.to_string() })?;
        if entries.contains_key(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        entries.insert(name, entry);
    }

    let mut ranges: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for (name, e) in &entries {
        let dtype = DType::from_tag(&e.dtype)
            .ok_or_else(|| CheckpointError::UnknownDtype { tensor: name.clone(), dtype: e.dtype.clone() })?;
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(CheckpointError::InvalidShape { tensor: name.clone(), shape: e.shape.clone() });
        }
        let expected = e
            .shape
            .iter()
            .try_fold(dtype.byte_width(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::InvalidShape { tensor: name.clone(), shape: e.shape.clone() })?;
        let [begin, end] = e.data_offsets;
        let actual = end.saturating_sub(begin);
        if end < begin || actual != expected {
            return Err(CheckpointError::OffsetMismatch { tensor: name.clone(), expected, actual });
        }
        if end > payload.len() {
            return Err(CheckpointError::OutOfBounds { tensor: name.clone(), end, len: payload.len() });
        }
        ranges.push((begin, end, name));
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        let (_, prev_end, prev) = pair[0];
        let (begin, _, name) = pair[1];
        if begin < prev_end {
            return Err(CheckpointError::Overlap { tensor: name.to_string(), other: prev.to_string() });
        }
    }

    let mut ckpt = Checkpoint::new();
    for (name, e) in entries {
        let dtype = DType::from_tag(&e.dtype).expect("validated above");
        let [begin, end] = e.data_offsets;
        ckpt.insert(Tensor::new(name, e.shape, dtype, payload[begin..end].to_vec())?)?;
    }
    ckpt.metadata = metadata;
    Ok(ckpt)
}

/// Serializes `ckpt` in canonical form.
pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = String::from("{");
    let mut first = true;
    let mut push_key = |header: &mut String, key: &str| {
        if !first {
            header.push(',');
        }
        first = false;
        header.push_str(&serde_json::to_string(key).expect("string serializes"));
        header.push(':');
    };
    if let Some(meta) = &ckpt.metadata {
        push_key(&mut header, METADATA_KEY);
        header.push_str(&serde_json::to_string(meta).expect("map serializes"));
    }
    let mut offset = 0;
    for t in ckpt.tensors.values() {
        let entry = EntryOut { dtype: t.dtype.tag(), shape: &t.shape, data_offsets: [offset, offset + t.data.len()] };
        offset += t.data.len();
        push_key(&mut header, &t.name);
        header.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
    }
    header.push('}');
    while header.len() % 8 != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in ckpt.tensors.values() {
        out.extend_from_slice(&t.data);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn archive(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn hand_built_single_tensor() {
        let bytes = archive(r#"{"t":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#, &1.0f64.to_le_bytes());
        let ckpt = read_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.len(), 1);
        let t = ckpt.get("t").unwrap();
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.to_f64(), vec![1.0]);
        let again = read_checkpoint(&write_checkpoint(&ckpt)).unwrap();
        assert_eq!(again, ckpt);
    }

    #[test]
    fn empty_header() {
        let ckpt = read_checkpoint(&archive("{}", &[])).unwrap();
        assert!(ckpt.is_empty());
        assert!(ckpt.metadata().is_none());
    }

    #[test]
    fn offset_mismatch() {
        let bytes = archive(r#"{"w":{"dtype":"F64","shape":[2,2],"data_offsets":[0,24]}}"#, &[0u8; 32]);
        let err = read_checkpoint(&bytes).unwrap_err();
        assert!(matches!(&err, CheckpointError::OffsetMismatch { tensor, expected: 32, actual: 24 } if tensor == "w"));
        assert!(err.to_string().contains("offset range mismatch"));
    }

    #[test]
    fn distinct_parse_errors() {
        let bad_json = archive("{\"a\":", &[]);
        assert!(matches!(read_checkpoint(&bad_json), Err(CheckpointError::MalformedHeader(_))));

        let dtype = archive(r#"{"a":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#, &[0]);
        assert!(
            matches!(read_checkpoint(&dtype), Err(CheckpointError::UnknownDtype { tensor, dtype }) if tensor == "a" && dtype == "I8")
        );

        let oob = archive(r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#, &[0; 4]);
        assert!(matches!(read_checkpoint(&oob), Err(CheckpointError::OutOfBounds { tensor, .. }) if tensor == "a"));

        let overlap = archive(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0; 8],
        );
        assert!(
            matches!(read_checkpoint(&overlap), Err(CheckpointError::Overlap { tensor, other }) if tensor == "b" && other == "a")
        );

        let dup = archive(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0; 8],
        );
        assert!(matches!(read_checkpoint(&dup), Err(CheckpointError::DuplicateName(n)) if n == "a"));

        let scalar = archive(r#"{"s":{"dtype":"F32","shape":[],"data_offsets":[0,4]}}"#, &[0; 4]);
        assert!(matches!(read_checkpoint(&scalar), Err(CheckpointError::InvalidShape { .. })));

        let entry = archive(r#"{"e":{"dtype":"F32"}}"#, &[]);
        assert!(matches!(read_checkpoint(&entry), Err(CheckpointError::InvalidEntry { tensor, .. }) if tensor == "e"));

        assert!(matches!(read_checkpoint(&[1, 2, 3]), Err(CheckpointError::Truncated(_))));
        let mut long = 100u64.to_le_bytes().to_vec();
        long.extend_from_slice(b"{}");
        assert!(matches!(read_checkpoint(&long), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn metadata_round_trips() {
        let bytes = archive(r#"{"__metadata__":{"format":"pt"}}"#, &[]);
        let ckpt = read_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.metadata().unwrap()["format"], "pt");
        assert_eq!(read_checkpoint(&write_checkpoint(&ckpt)).unwrap(), ckpt);
    }

    #[test]
    fn zero_f32_payload_is_four_zero_bytes() {
        let ckpt = Checkpoint::from_tensors([Tensor::from_f64("z", vec![1], DType::F32, &[0.0]).unwrap()]).unwrap();
        let bytes = write_checkpoint(&ckpt);
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(&bytes[8 + n..], &[0, 0, 0, 0]);
    }

    #[test]
    fn lexicographic_entry_order() {
        let b = Tensor::from_f64("b", vec![1], DType::F32, &[2.0]).unwrap();
        let a = Tensor::from_f64("a", vec![1], DType::F32, &[1.0]).unwrap();
        let bytes = write_checkpoint(&Checkpoint::from_tensors([b, a]).unwrap());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        assert!(header.find("\"a\"").unwrap() < header.find("\"b\"").unwrap());
        assert_eq!(&bytes[8 + n..8 + n + 4], &1.0f32.to_le_bytes());
        assert_eq!(n % 8, 0);
    }

    #[test]
    fn as_matrix_flattens_trailing_dims() {
        let vals: Vec<f64> = (0..48).map(f64::from).collect();
        let t = Tensor::from_f64("conv", vec![4, 3, 2, 2], DType::F64, &vals).unwrap();
        let m = t.as_matrix().unwrap();
        assert_eq!(m.shape(), (4, 12));
        assert_eq!(m[(2, 5)], 2.0 * 12.0 + 5.0);

        let t = Tensor::from_f64("dense", vec![5, 7], DType::F32, &[0.5; 35]).unwrap();
        assert_eq!(t.as_matrix().unwrap().shape(), (5, 7));

        let t = Tensor::from_f64("bias", vec![8], DType::F32, &[0.0; 8]).unwrap();
        let err = t.as_matrix().unwrap_err();
        assert!(err.to_string().contains("not a matrix-like tensor"));
    }

    #[test]
    fn f32_narrowing_rounds_to_nearest() {
        let x = 0.1f64;
        let t = Tensor::from_f64("x", vec![1], DType::F32, &[x]).unwrap();
        assert_eq!(t.bytes(), &0.1f32.to_le_bytes());
    }

    #[test]
    fn invalid_tensor_construction() {
        assert!(Tensor::new("t", vec![2], DType::F64, vec![0; 8]).is_err());
        assert!(Tensor::new("t", vec![0], DType::F64, vec![]).is_err());
        assert!(Tensor::new(METADATA_KEY, vec![1], DType::F32, vec![0; 4]).is_err());
        let t = Tensor::new("t", vec![1], DType::F32, vec![0; 4]).unwrap();
        let mut c = Checkpoint::new();
        c.insert(t.clone()).unwrap();
        assert!(matches!(c.insert(t), Err(CheckpointError::DuplicateName(_))));
    }
}
