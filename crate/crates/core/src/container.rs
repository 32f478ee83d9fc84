//! Binary container framing shared by every i2x file kind.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic        b"I2XA"
//! offset 4   version      u32
//! offset 8   manifest_len u64
//! offset 16  manifest     UTF-8 JSON, space-padded so blobs start 8-byte aligned
//! ...        blobs        raw tensors, concatenated in manifest order
//! ```
//!
//! The manifest is a JSON object with a `kind` string, a `format_version`
//! number, a `tensors` array of `{name, dtype, shape, offset, length}` entries
//! (offsets absolute from the start of the file) and any kind-specific keys.
//! Keys are emitted in sorted order, so identical inputs give identical bytes.

use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"I2XA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"I2XA\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("corrupt blob for tensor '{tensor}': {detail}")]
    CorruptBlob { tensor: String, detail: String },
    #[error("tensor '{0}' not found")]
    MissingTensor(String),
    #[error("expected a '{expected}' container, found '{found}'")]
    WrongKind { expected: String, found: String },
    #[error("tensor '{name}' is {found:?}, requested {requested:?}")]
    DTypeMismatch {
        name: String,
        found: DType,
        requested: DType,
    },
}

pub type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

impl TensorInfo {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn byte_len(&self) -> u64 {
        match self {
            TensorData::F32(v) => v.len() as u64 * 4,
            TensorData::F64(v) => v.len() as u64 * 8,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// Accumulates a manifest and tensors, then serializes them in one pass.
#[derive(Debug, Clone)]
pub struct ContainerWriter {
    kind: String,
    meta: Map<String, Value>,
    tensors: Vec<(String, Vec<usize>, TensorData)>,
}

impl ContainerWriter {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Map::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a manifest key. `kind`, `format_version` and `tensors` are reserved.
    pub fn meta(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        assert!(
            !matches!(key, "kind" | "format_version" | "tensors"),
            "reserved manifest key {key}"
        );
        let value = serde_json::to_value(value).expect("manifest values serialize");
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn add_f32(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f32>,
    ) -> &mut Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        self.tensors
            .push((name.into(), shape.to_vec(), TensorData::F32(data)));
        self
    }

    pub fn add_f64(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
    ) -> &mut Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        self.tensors
            .push((name.into(), shape.to_vec(), TensorData::F64(data)));
        self
    }

    fn manifest_for(&self, data_start: u64) -> Vec<u8> {
        let mut offset = data_start;
        let infos: Vec<TensorInfo> = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let info = TensorInfo {
                    name: name.clone(),
                    dtype: data.dtype(),
                    shape: shape.clone(),
                    offset,
                    length: data.byte_len(),
                };
                offset += info.length;
                info
            })
            .collect();
        let mut manifest = self.meta.clone();
        manifest.insert("kind".into(), Value::String(self.kind.clone()));
        manifest.insert("format_version".into(), Value::from(FORMAT_VERSION));
        manifest.insert(
            "tensors".into(),
            serde_json::to_value(infos).expect("tensor infos serialize"),
        );
        serde_json::to_vec(&Value::Object(manifest)).expect("manifest serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // Offsets are absolute, so the manifest length feeds back into itself;
        // iterate to the (monotone) fixed point and pad with spaces.
        let mut start = HEADER_LEN;
        let manifest = loop {
            let m = self.manifest_for(start);
            let needed = align8(HEADER_LEN + m.len() as u64);
            if needed <= start {
                break m;
            }
            start = needed;
        };
        let mut out = Vec::with_capacity(start as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(start - HEADER_LEN).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.resize(start as usize, b' ');
        for (_, _, data) in &self.tensors {
            data.write_le(&mut out);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let io = |source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&bytes).map_err(io)?;
        w.flush().map_err(io)
    }
}

fn align8(x: u64) -> u64 {
    x.div_ceil(8) * 8
}

#[derive(Debug, Clone)]
enum Source {
    File(PathBuf),
    Memory(Arc<Vec<u8>>),
}

/// An opened container. Only the header and manifest are decoded up front;
/// tensors are read on demand.
#[derive(Debug, Clone)]
pub struct Container {
    source: Source,
    kind: String,
    manifest: Map<String, Value>,
    tensors: Vec<TensorInfo>,
    file_len: u64,
}

impl Container {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = File::open(path).map_err(io)?;
        let file_len = f.metadata().map_err(io)?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        let got = read_up_to(&mut f, &mut header).map_err(io)?;
        let manifest_len = parse_header(&header[..got])?;
        let mut manifest = vec![
            0u8;
            usize::try_from(manifest_len)
                .unwrap_or(usize::MAX)
                .min(file_len as usize)
        ];
        let got = read_up_to(&mut f, &mut manifest).map_err(io)?;
        if (got as u64) < manifest_len {
            return Err(ContainerError::BadManifest(format!(
                "manifest declares {manifest_len} bytes but only {got} remain"
            )));
        }
        Self::from_parts(Source::File(path.to_path_buf()), &manifest, file_len)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let manifest_len = parse_header(&bytes[..bytes.len().min(HEADER_LEN as usize)])?;
        let end = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&e| e <= bytes.len() as u64);
        let Some(end) = end else {
            return Err(ContainerError::BadManifest(format!(
                "manifest declares {manifest_len} bytes but file has {}",
                bytes.len()
            )));
        };
        let manifest = bytes[HEADER_LEN as usize..end as usize].to_vec();
        let len = bytes.len() as u64;
        Self::from_parts(Source::Memory(Arc::new(bytes)), &manifest, len)
    }

    fn from_parts(source: Source, manifest: &[u8], file_len: u64) -> Result<Self> {
        let value: Value = serde_json::from_slice(manifest)
            .map_err(|e| ContainerError::BadManifest(e.to_string()))?;
        let Value::Object(mut map) = value else {
            return Err(ContainerError::BadManifest(
                "manifest is not an object".into(),
            ));
        };
        let kind = map
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| ContainerError::BadManifest("missing 'kind'".into()))?
            .to_string();
        let tensors: Vec<TensorInfo> = serde_json::from_value(
            map.remove("tensors")
                .ok_or_else(|| ContainerError::BadManifest("missing 'tensors'".into()))?,
        )
        .map_err(|e| ContainerError::BadManifest(format!("tensors: {e}")))?;
        let data_start = HEADER_LEN + manifest.len() as u64;
        for t in &tensors {
            let expected = t.element_count() as u64 * t.dtype.size();
            if t.length != expected {
                return Err(ContainerError::CorruptBlob {
                    tensor: t.name.clone(),
                    detail: format!(
                        "length {} does not match shape {:?} ({expected} bytes)",
                        t.length, t.shape
                    ),
                });
            }
            if t.offset < data_start {
                return Err(ContainerError::CorruptBlob {
                    tensor: t.name.clone(),
                    detail: format!(
                        "offset {} overlaps the manifest (data starts at {data_start})",
                        t.offset
                    ),
                });
            }
            if t.offset
                .checked_add(t.length)
                .is_none_or(|end| end > file_len)
            {
                return Err(ContainerError::CorruptBlob {
                    tensor: t.name.clone(),
                    detail: format!(
                        "blob [{}, {}) runs past end of file ({file_len} bytes)",
                        t.offset,
                        t.offset.saturating_add(t.length)
                    ),
                });
            }
        }
        Ok(Self {
            source,
            kind,
            manifest: map,
            tensors,
            file_len,
        })
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ContainerError::WrongKind {
                expected: kind.into(),
                found: self.kind.clone(),
            })
        }
    }

    /// Manifest keys other than `tensors`.
    pub fn manifest(&self) -> &Map<String, Value> {
        &self.manifest
    }

    /// Deserializes one manifest key.
    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .get(key)
            .ok_or_else(|| ContainerError::BadManifest(format!("missing '{key}'")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| ContainerError::BadManifest(format!("{key}: {e}")))
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    pub fn tensor_info(&self, name: &str) -> Result<&TensorInfo> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ContainerError::MissingTensor(name.into()))
    }

    fn read_raw(&self, info: &TensorInfo) -> Result<Vec<u8>> {
        match &self.source {
            Source::Memory(bytes) => {
                Ok(bytes[info.offset as usize..(info.offset + info.length) as usize].to_vec())
            }
            Source::File(path) => {
                let io = |source| ContainerError::Io {
                    path: path.display().to_string(),
                    source,
                };
                let mut f = File::open(path).map_err(io)?;
                f.seek(SeekFrom::Start(info.offset)).map_err(io)?;
                let mut buf = vec![0u8; info.length as usize];
                let got = read_up_to(&mut f, &mut buf).map_err(io)?;
                if got != buf.len() {
                    return Err(ContainerError::CorruptBlob {
                        tensor: info.name.clone(),
                        detail: format!("expected {} bytes, read {got}", info.length),
                    });
                }
                Ok(buf)
            }
        }
    }

    pub fn read_f32(&self, name: &str) -> Result<Vec<f32>> {
        let info = self.tensor_info(name)?;
        if info.dtype != DType::F32 {
            return Err(ContainerError::DTypeMismatch {
                name: name.into(),
                found: info.dtype,
                requested: DType::F32,
            });
        }
        let raw = self.read_raw(info)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn read_f64(&self, name: &str) -> Result<Vec<f64>> {
        let info = self.tensor_info(name)?;
        if info.dtype != DType::F64 {
            return Err(ContainerError::DTypeMismatch {
                name: name.into(),
                found: info.dtype,
                requested: DType::F64,
            });
        }
        let raw = self.read_raw(info)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn parse_header(header: &[u8]) -> Result<u64> {
    if header.len() < 4 || header[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = header.len().min(4);
        found[..n].copy_from_slice(&header[..n]);
        return Err(ContainerError::BadMagic { found });
    }
    if header.len() < HEADER_LEN as usize {
        return Err(ContainerError::BadManifest("truncated header".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ContainerError::VersionUnsupported(version));
    }
    Ok(u64::from_le_bytes(
        header[8..16].try_into().expect("8 bytes"),
    ))
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}
