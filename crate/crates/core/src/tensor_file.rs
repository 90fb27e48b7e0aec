//! Binary tensor container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header, then
//! the raw little-endian element data of every tensor back to back. Tensor
//! offsets in the header are relative to the start of the data section.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SLSGTNSR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    F32,
    F64,
}

impl ElemType {
    fn size(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }

    fn dtype(self) -> DType {
        match self {
            ElemType::F32 => DType::F32,
            ElemType::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: ElemType,
    pub offset: u64,
    pub frozen: bool,
    /// Name of the frozen base matrix a low-rank adapter factor belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_of: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
    pub adapter_of: Option<String>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            frozen: false,
            adapter_of: None,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn adapter_of(mut self, base: impl Into<String>) -> Self {
        self.adapter_of = Some(base.into());
        self
    }
}

/// In-memory view of a container: named tensors plus free-form metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub records: Vec<TensorRecord>,
    pub meta: serde_json::Value,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            records: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, record: TensorRecord) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|r| &r.tensor)
            .ok_or_else(|| Error::TensorFile(format!("no tensor named {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let dtype = match rec.tensor.dtype() {
                DType::F32 => ElemType::F32,
                DType::F64 => ElemType::F64,
                other => {
                    return Err(Error::TensorFile(format!(
                        "unsupported element type {other:?}"
                    )))
                }
            };
            entries.push(TensorEntry {
                name: rec.name.clone(),
                shape: rec.tensor.dims().to_vec(),
                dtype,
                offset: data.len() as u64,
                frozen: rec.frozen,
                adapter_of: rec.adapter_of.clone(),
            });
            let flat = rec.tensor.flatten_all()?;
            match dtype {
                ElemType::F32 => {
                    for v in flat.to_vec1::<f32>()? {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ElemType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::TensorFile("header larger than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        let data_start = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let data = &bytes[data_start..];
        let mut records = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * entry.dtype.size();
            let raw = data.get(start..end).ok_or_else(|| {
                Error::TensorFile(format!("tensor {} extends past end of file", entry.name))
            })?;
            let tensor = match entry.dtype {
                ElemType::F32 => {
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
                }
                ElemType::F64 => {
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
                }
            };
            debug_assert_eq!(tensor.dtype(), entry.dtype.dtype());
            records.push(TensorRecord {
                name: entry.name,
                tensor,
                frozen: entry.frozen,
                adapter_of: entry.adapter_of,
            });
        }
        Ok(Self {
            records,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Parses only the magic and JSON header.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::TensorFile("bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let raw = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::TensorFile("truncated header".into()))?;
    Ok(serde_json::from_slice(raw)?)
}
