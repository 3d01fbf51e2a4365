//! Tensor bundle files: a one-line JSON manifest, a newline, then the raw
//! little-endian payloads of every array concatenated in manifest order.
//! Used for datasets (f32 features, u32 labels) and checkpoints.

use crate::error::{FdseError, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const BUNDLE_FORMAT: &str = "tensor-bundle/v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<EntryHeader>,
}

#[derive(Debug, Clone)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl Payload {
    pub fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::U32(_) => "u32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn from_tensor<F: Real>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().iter().map(|v| v.into_f32()).collect()),
        }
    }

    pub fn from_labels(name: impl Into<String>, labels: &[u32]) -> Self {
        Entry {
            name: name.into(),
            shape: vec![labels.len()],
            payload: Payload::U32(labels.to_vec()),
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        match &self.payload {
            Payload::F32(v) => {
                Tensor::new(self.shape.clone(), v.iter().map(|&x| F::from_f32(x)).collect())
            }
            Payload::U32(_) => Err(FdseError::Dimension(format!(
                "entry '{}' holds u32 data, expected f32",
                self.name
            ))),
        }
    }

    pub fn to_labels(&self) -> Result<Vec<u32>> {
        match &self.payload {
            Payload::U32(v) => Ok(v.clone()),
            Payload::F32(_) => Err(FdseError::Dimension(format!(
                "entry '{}' holds f32 data, expected u32",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Bundle {
    pub fn new(meta: serde_json::Value) -> Self {
        Bundle { meta, entries: Vec::new() }
    }

    pub fn push_tensor<F: Real>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        self.entries.push(Entry::from_tensor(name, t));
    }

    pub fn push_labels(&mut self, name: impl Into<String>, labels: &[u32]) {
        self.entries.push(Entry::from_labels(name, labels));
    }

    pub fn find(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.find(name).ok_or_else(|| {
            FdseError::Alignment(format!("bundle has no entry named '{}'", name))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let disp = path.display().to_string();
        for e in &self.entries {
            let numel: usize = e.shape.iter().product();
            if numel != e.payload.len() {
                return Err(FdseError::Dimension(format!(
                    "entry '{}': shape {:?} does not match payload length {}",
                    e.name,
                    e.shape,
                    e.payload.len()
                )));
            }
        }
        let manifest = Manifest {
            format: BUNDLE_FORMAT.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|e| EntryHeader {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: e.payload.dtype().to_string(),
                })
                .collect(),
        };
        let file = std::fs::File::create(path).map_err(|e| FdseError::io(&disp, e))?;
        let mut w = BufWriter::new(file);
        let line = serde_json::to_string(&manifest)
            .map_err(|e| FdseError::parse(&disp, e.to_string()))?;
        w.write_all(line.as_bytes()).map_err(|e| FdseError::io(&disp, e))?;
        w.write_all(b"\n").map_err(|e| FdseError::io(&disp, e))?;
        for e in &self.entries {
            match &e.payload {
                Payload::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes()).map_err(|e| FdseError::io(&disp, e))?;
                    }
                }
                Payload::U32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes()).map_err(|e| FdseError::io(&disp, e))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| FdseError::io(&disp, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let disp = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| FdseError::io(&disp, e))?;
        let mut r = BufReader::new(file);

        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match r.read(&mut byte).map_err(|e| FdseError::io(&disp, e))? {
                0 => return Err(FdseError::parse(&disp, "missing manifest line")),
                _ => {
                    if byte[0] == b'\n' {
                        break;
                    }
                    line.push(byte[0]);
                    if line.len() > 16 * 1024 * 1024 {
                        return Err(FdseError::parse(&disp, "manifest line exceeds 16 MiB"));
                    }
                }
            }
        }
        let manifest: Manifest = serde_json::from_slice(&line)
            .map_err(|e| FdseError::parse(&disp, format!("bad manifest: {}", e)))?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(FdseError::parse(
                &disp,
                format!("unsupported format '{}', expected '{}'", manifest.format, BUNDLE_FORMAT),
            ));
        }

        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for h in &manifest.tensors {
            let numel: usize = h.shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf).map_err(|_| {
                FdseError::parse(
                    &disp,
                    format!("truncated payload for entry '{}' (expected {} bytes)", h.name, numel * 4),
                )
            })?;
            let payload = match h.dtype.as_str() {
                "f32" => Payload::F32(
                    buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                ),
                "u32" => Payload::U32(
                    buf.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                ),
                other => {
                    return Err(FdseError::parse(
                        &disp,
                        format!("entry '{}': unknown dtype '{}'", h.name, other),
                    ))
                }
            };
            entries.push(Entry { name: h.name.clone(), shape: h.shape.clone(), payload });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| FdseError::io(&disp, e))? != 0 {
            return Err(FdseError::parse(&disp, "trailing bytes after last payload"));
        }
        Ok(Bundle { meta: manifest.meta, entries })
    }
}
