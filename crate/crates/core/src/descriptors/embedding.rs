//! Descriptor embedding table and the NEMB file format:
//!
//! ```text
//! "NEMB" | u32 version=1 | u32 dim | u64 count | (u32 len + UTF-8) * count | f32 * count * dim
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::{io_err, DescriptorError};
use crate::binio::{self, Reader};

pub const NEMB_MAGIC: &[u8; 4] = b"NEMB";
pub const NEMB_VERSION: u32 = 1;

/// Tolerance on the L2 norm of every stored vector.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: u32,
    surfaces: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Rows must already be unit-normalized.
    pub fn new(
        dim: u32,
        surfaces: Vec<String>,
        vectors: Vec<f32>,
    ) -> Result<Self, DescriptorError> {
        let invalid = |m: String| DescriptorError::InvalidEmbedding(m);
        if dim == 0 {
            return Err(invalid("dimension must be positive".into()));
        }
        let d = dim as usize;
        if vectors.len() != surfaces.len() * d {
            return Err(invalid(format!(
                "{} values for {} rows of dimension {dim}",
                vectors.len(),
                surfaces.len()
            )));
        }
        let mut index = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(invalid(format!("duplicate surface {s:?}")));
            }
            let row = &vectors[i * d..(i + 1) * d];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite value in row {s:?}")));
            }
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(invalid(format!("row {s:?} has norm {norm}")));
            }
        }
        Ok(Self {
            dim,
            surfaces,
            vectors,
            index,
        })
    }

    /// Normalizes each row before building the table.
    pub fn from_raw(dim: u32, rows: Vec<(String, Vec<f32>)>) -> Result<Self, DescriptorError> {
        let mut surfaces = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim as usize);
        for (s, v) in rows {
            if v.len() != dim as usize {
                return Err(DescriptorError::InvalidEmbedding(format!(
                    "row {s:?} has length {}, expected {dim}",
                    v.len()
                )));
            }
            let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(DescriptorError::InvalidEmbedding(format!(
                    "row {s:?} cannot be normalized"
                )));
            }
            vectors.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
            surfaces.push(s);
        }
        Self::new(dim, surfaces, vectors)
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn get(&self, surface: &str) -> Option<&[f32]> {
        let d = self.dim as usize;
        self.index
            .get(surface)
            .map(|&i| &self.vectors[i * d..(i + 1) * d])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NEMB_MAGIC);
        binio::put_u32(&mut out, NEMB_VERSION);
        binio::put_u32(&mut out, self.dim);
        binio::put_u64(&mut out, self.surfaces.len() as u64);
        for s in &self.surfaces {
            binio::put_str(&mut out, s);
        }
        binio::put_f32s(&mut out, &self.vectors);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DescriptorError> {
        let fmt = |m: String| DescriptorError::Format(m);
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic").map_err(|e| fmt(e.to_string()))?;
        if magic != NEMB_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = r.u32("version").map_err(|e| fmt(e.to_string()))?;
        if version != NEMB_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let dim = r.u32("dim").map_err(|e| fmt(e.to_string()))?;
        let count = r.u64("count").map_err(|e| fmt(e.to_string()))?;
        if count > (r.remaining() / 4) as u64 {
            return Err(fmt(format!("count {count} exceeds file size")));
        }
        let mut surfaces = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let raw = r.prefixed("string table").map_err(|e| fmt(e.to_string()))?;
            let s = std::str::from_utf8(raw)
                .map_err(|_| fmt(format!("invalid UTF-8 at byte {}", r.position())))?;
            surfaces.push(s.to_string());
        }
        let n = (count as usize)
            .checked_mul(dim as usize)
            .ok_or_else(|| fmt("payload size overflows".into()))?;
        let vectors = r.f32s(n, "vectors").map_err(|e| fmt(e.to_string()))?;
        if r.remaining() > 0 {
            return Err(fmt(format!("{} trailing bytes", r.remaining())));
        }
        Self::new(dim, surfaces, vectors)
    }
}

pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<(), DescriptorError> {
    crate::write_atomic(path, &table.to_bytes()).map_err(io_err(path))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable, DescriptorError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    EmbeddingTable::from_bytes(&bytes)
}
