//! Chunked binary container.
//!
//! Layout: `b"OCCT"`, version `u32`, header length `u64`, UTF-8 JSON header,
//! zero padding to a 64-byte boundary, then the payload. Tensor offsets in the
//! header are relative to the payload start and 64-byte aligned; all integers
//! and arrays are little-endian.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const MAGIC: [u8; 4] = *b"OCCT";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U32,
    U64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
            TensorData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U32 => TensorData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U64 => TensorData::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
    /// Header fields of this entry not understood by this version.
    pub extra: Map<String, Value>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Self {
        Entry {
            name: name.into(),
            shape,
            data,
            extra: Map::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub entries: Vec<Entry>,
    /// Top-level header fields not understood by this version.
    pub extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorHeader>,
    payload_len: u64,
    crc32: u32,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Container {
            meta,
            entries: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        self.entries.push(Entry::new(name, shape, data));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// The named entry, which must be f64 with the given element count.
    pub fn f64s(&self, name: &str, len: usize) -> Result<&[f64]> {
        match self.get(name).map(|e| &e.data) {
            Some(TensorData::F64(v)) if v.len() == len => Ok(v),
            Some(TensorData::F64(v)) => Err(Error::Config(format!("tensor {name} has {} values, expected {len}", v.len()))),
            Some(_) => Err(Error::Config(format!("tensor {name} is not f64"))),
            None => Err(Error::Config(format!("tensor {name} is missing"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::shape(format!(
                    "entry {} has shape {:?} but {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            payload.resize(align_up(payload.len()), 0);
            tensors.push(TensorHeader {
                name: e.name.clone(),
                dtype: e.data.dtype(),
                shape: e.shape.clone(),
                offset: payload.len() as u64,
                extra: e.extra.clone(),
            });
            e.data.write_le(&mut payload);
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors,
            payload_len: payload.len() as u64,
            crc32: crc32fast::hash(&payload),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(align_up(PREAMBLE + json.len()) + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::format(bytes.len() as u64, "file shorter than the fixed preamble"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64).checked_add(header_len).filter(|&e| e <= bytes.len() as u64);
        let Some(header_end) = header_end.map(|e| e as usize) else {
            return Err(Error::format(8, format!("header length {header_len} runs past the end of the file")));
        };
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::format(PREAMBLE as u64, format!("malformed header: {e}")))?;
        let start = align_up(header_end);
        if bytes[header_end..start.min(bytes.len())].iter().any(|&b| b != 0) {
            return Err(Error::format(header_end as u64, "nonzero header padding"));
        }
        let expected = start as u64 + header.payload_len;
        if (bytes.len() as u64) < expected {
            return Err(Error::format(bytes.len() as u64, format!("payload truncated: file should be {expected} bytes")));
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::format(expected, "trailing bytes after payload"));
        }
        let payload = &bytes[start..];
        if crc32fast::hash(payload) != header.crc32 {
            return Err(Error::format(start as u64, "payload checksum mismatch"));
        }
        let mut spans: Vec<(u64, u64, usize)> = Vec::with_capacity(header.tensors.len());
        let mut entries = Vec::with_capacity(header.tensors.len());
        for (i, t) in header.tensors.into_iter().enumerate() {
            let at = start as u64 + t.offset;
            let count = t.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = count.and_then(|c| c.checked_mul(t.dtype.size())).map(|n| n as u64);
            let end = nbytes.and_then(|n| t.offset.checked_add(n));
            let Some(end) = end.filter(|&e| e <= header.payload_len) else {
                return Err(Error::format(at, format!("tensor {} extends past the payload", t.name)));
            };
            if t.offset % ALIGN as u64 != 0 {
                return Err(Error::format(at, format!("tensor {} is not {ALIGN}-byte aligned", t.name)));
            }
            if entries.iter().any(|e: &Entry| e.name == t.name) {
                return Err(Error::format(PREAMBLE as u64, format!("duplicate tensor name {}", t.name)));
            }
            spans.push((t.offset, end, i));
            let data = TensorData::read_le(t.dtype, &payload[t.offset as usize..end as usize]);
            entries.push(Entry {
                name: t.name,
                shape: t.shape,
                data,
                extra: t.extra,
            });
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::format(
                    start as u64 + w[1].0,
                    format!("tensor {} overlaps tensor {}", entries[w[1].2].name, entries[w[0].2].name),
                ));
            }
        }
        Ok(Container {
            meta: header.meta,
            entries,
            extra: header.extra,
        })
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
