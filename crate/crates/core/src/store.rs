//! Per-sentence, per-neuron activation store and its NACT file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NACT" | u32 version=1 | u32 len + model_id | u32 layers | u32 neurons_per_layer
//! | u64 sentence_count | (u32 len + id) * sentence_count
//! | f32 * sentence_count * layers * neurons_per_layer   (row-major)
//! ```
//!
//! Only one position per sentence is stored (the sequence-summary token),
//! so a row holds exactly `layers * neurons_per_layer` values.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{self, Reader, Truncated};

pub const NACT_MAGIC: &[u8; 4] = b"NACT";
pub const NACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"NACT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported NACT version {0}")]
    UnsupportedVersion(u32),
    #[error("{0}")]
    Truncated(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite activation {value} at sentence {sentence}, ordinal {ordinal}")]
    NonFinite {
        sentence: usize,
        ordinal: usize,
        value: f32,
    },
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("duplicate sentence id {0:?}")]
    DuplicateId(String),
    #[error("layers and neurons_per_layer must be positive (got {layers} x {neurons})")]
    EmptyGrid { layers: u32, neurons: u32 },
    #[error("payload has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("neuron {neuron} out of bounds for {layers} x {neurons} grid")]
    OutOfBounds {
        neuron: NeuronId,
        layers: u32,
        neurons: u32,
    },
}

impl From<Truncated> for StoreError {
    fn from(t: Truncated) -> Self {
        StoreError::Truncated(t.to_string())
    }
}

/// A neuron addressed by layer and index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: u32,
    pub index: u32,
}

impl NeuronId {
    pub fn new(layer: u32, index: u32) -> Self {
        Self { layer, index }
    }

    /// `layer * neurons_per_layer + index`.
    pub fn ordinal(self, neurons_per_layer: u32) -> usize {
        self.layer as usize * neurons_per_layer as usize + self.index as usize
    }

    pub fn from_ordinal(ordinal: usize, neurons_per_layer: u32) -> Self {
        let n = neurons_per_layer as usize;
        Self {
            layer: (ordinal / n) as u32,
            index: (ordinal % n) as u32,
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    model_id: String,
    layers: u32,
    neurons_per_layer: u32,
    sentence_ids: Vec<String>,
    values: Vec<f32>,
}

impl ActivationStore {
    /// `values` is row-major `[sentence][layer * neurons_per_layer + index]`.
    pub fn new(
        model_id: impl Into<String>,
        layers: u32,
        neurons_per_layer: u32,
        sentence_ids: Vec<String>,
        values: Vec<f32>,
    ) -> Result<Self, StoreError> {
        if layers == 0 || neurons_per_layer == 0 {
            return Err(StoreError::EmptyGrid {
                layers,
                neurons: neurons_per_layer,
            });
        }
        let width = layers as usize * neurons_per_layer as usize;
        let expected = sentence_ids.len() * width;
        if values.len() != expected {
            return Err(StoreError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        let mut seen = HashSet::with_capacity(sentence_ids.len());
        for id in &sentence_ids {
            if !seen.insert(id.as_str()) {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        check_finite(&values, width)?;
        Ok(Self {
            model_id: model_id.into(),
            layers,
            neurons_per_layer,
            sentence_ids,
            values,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn layers(&self) -> u32 {
        self.layers
    }

    pub fn neurons_per_layer(&self) -> u32 {
        self.neurons_per_layer
    }

    /// `layers * neurons_per_layer`.
    pub fn width(&self) -> usize {
        self.layers as usize * self.neurons_per_layer as usize
    }

    pub fn sentence_ids(&self) -> &[String] {
        &self.sentence_ids
    }

    pub fn len(&self) -> usize {
        self.sentence_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence_ids.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, sentence: usize) -> &[f32] {
        let w = self.width();
        &self.values[sentence * w..(sentence + 1) * w]
    }

    /// Every neuron of the grid, in ordinal order.
    pub fn neurons(&self) -> Vec<NeuronId> {
        (0..self.width())
            .map(|o| NeuronId::from_ordinal(o, self.neurons_per_layer))
            .collect()
    }

    pub fn check_neuron(&self, neuron: NeuronId) -> Result<usize, StoreError> {
        if neuron.layer >= self.layers || neuron.index >= self.neurons_per_layer {
            return Err(StoreError::OutOfBounds {
                neuron,
                layers: self.layers,
                neurons: self.neurons_per_layer,
            });
        }
        Ok(neuron.ordinal(self.neurons_per_layer))
    }

    /// Activations of one neuron, in store order.
    pub fn column(&self, neuron: NeuronId) -> Result<Vec<f32>, StoreError> {
        let ord = self.check_neuron(neuron)?;
        let w = self.width();
        Ok((0..self.len()).map(|s| self.values[s * w + ord]).collect())
    }

    /// `(sentence_id, activation)` pairs for one neuron, in store order.
    pub fn neuron_column(&self, neuron: NeuronId) -> Result<Vec<(&str, f32)>, StoreError> {
        let col = self.column(neuron)?;
        Ok(self
            .sentence_ids
            .iter()
            .map(String::as_str)
            .zip(col)
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ids_len: usize = self.sentence_ids.iter().map(|s| 4 + s.len()).sum();
        let mut out =
            Vec::with_capacity(32 + self.model_id.len() + ids_len + self.values.len() * 4);
        out.extend_from_slice(NACT_MAGIC);
        binio::put_u32(&mut out, NACT_VERSION);
        binio::put_str(&mut out, &self.model_id);
        binio::put_u32(&mut out, self.layers);
        binio::put_u32(&mut out, self.neurons_per_layer);
        binio::put_u64(&mut out, self.sentence_ids.len() as u64);
        for id in &self.sentence_ids {
            binio::put_str(&mut out, id);
        }
        binio::put_f32s(&mut out, &self.values);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != NACT_MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != NACT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let model_id = std::str::from_utf8(r.prefixed("model_id")?)
            .map_err(|_| StoreError::InvalidUtf8("model_id"))?
            .to_string();
        let layers = r.u32("layers")?;
        let neurons = r.u32("neurons_per_layer")?;
        let count = r.u64("sentence count")?;
        // Each id needs at least its 4-byte length prefix.
        if count > (r.remaining() / 4) as u64 {
            return Err(StoreError::Truncated(format!(
                "sentence count {count} exceeds file size"
            )));
        }
        let mut ids = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = std::str::from_utf8(r.prefixed("sentence id")?)
                .map_err(|_| StoreError::InvalidUtf8("sentence id"))?;
            ids.push(id.to_string());
        }
        if layers == 0 || neurons == 0 {
            return Err(StoreError::EmptyGrid { layers, neurons });
        }
        let n_values = (count as usize)
            .checked_mul(layers as usize * neurons as usize)
            .ok_or_else(|| StoreError::Truncated("payload size overflows".into()))?;
        let values = r.f32s(n_values, "payload")?;
        if r.remaining() > 0 {
            return Err(StoreError::TrailingBytes(r.remaining()));
        }
        Self::new(model_id, layers, neurons, ids, values)
    }
}

fn check_finite(values: &[f32], width: usize) -> Result<(), StoreError> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite {
            sentence: pos / width,
            ordinal: pos % width,
            value: values[pos],
        });
    }
    Ok(())
}

/// Writes the store atomically (temp file + rename).
pub fn write_store(store: &ActivationStore, path: &Path) -> Result<(), StoreError> {
    check_finite(&store.values, store.width())?;
    crate::write_atomic(path, &store.to_bytes()).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_store(path: &Path) -> Result<ActivationStore, StoreError> {
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ActivationStore::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ActivationStore {
        // 3 sentences, 2 layers x 2 neurons.
        ActivationStore::new(
            "test-model",
            2,
            2,
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                0.0, 1.0, 2.0, 3.0, //
                10.0, 11.0, 12.0, 13.0, //
                -1.0, -2.0, -3.0, -4.0,
            ],
        )
        .unwrap()
    }

    #[test]
    fn column_matches_direct_indexing() {
        let s = small();
        for layer in 0..2 {
            for index in 0..2 {
                let n = NeuronId::new(layer, index);
                let col = s.neuron_column(n).unwrap();
                assert_eq!(col.len(), 3);
                for (row, (id, v)) in col.iter().enumerate() {
                    assert_eq!(*id, s.sentence_ids()[row]);
                    assert_eq!(*v, s.values()[row * 4 + (layer * 2 + index) as usize]);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_neuron() {
        let s = small();
        assert!(matches!(
            s.neuron_column(NeuronId::new(2, 0)),
            Err(StoreError::OutOfBounds { .. })
        ));
        assert!(s.neuron_column(NeuronId::new(0, 2)).is_err());
    }

    #[test]
    fn ordinal_bijection() {
        let n = 768;
        for o in [0usize, 1, 767, 768, 9215] {
            let id = NeuronId::from_ordinal(o, n);
            assert_eq!(id.ordinal(n), o);
        }
        assert_eq!(NeuronId::from_ordinal(9215, n), NeuronId::new(11, 767));
    }

    #[test]
    fn bert_base_row_width() {
        let s = ActivationStore::new(
            "bert-base-uncased",
            12,
            768,
            vec!["x".into(), "y".into()],
            vec![0.5; 2 * 9216],
        )
        .unwrap();
        assert_eq!(s.width(), 9216);
        let bytes = s.to_bytes();
        let header = 4 + 4 + (4 + 17) + 4 + 4 + 8 + (4 + 1) * 2;
        assert_eq!(bytes.len(), header + 2 * 9216 * 4);
    }

    #[test]
    fn empty_store_round_trip() {
        let s = ActivationStore::new("m", 1, 1, vec![], vec![]).unwrap();
        let back = ActivationStore::from_bytes(&s.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, s);
    }

    #[test]
    fn bad_magic() {
        let mut b = small().to_bytes();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            ActivationStore::from_bytes(&b),
            Err(StoreError::BadMagic(_))
        ));
    }

    #[test]
    fn bad_version() {
        let mut b = small().to_bytes();
        b[4] = 2;
        assert!(matches!(
            ActivationStore::from_bytes(&b),
            Err(StoreError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncated_payload() {
        let b = small().to_bytes();
        let cut = &b[..b.len() - 6];
        assert!(matches!(
            ActivationStore::from_bytes(cut),
            Err(StoreError::Truncated(_))
        ));
    }

    #[test]
    fn trailing_bytes() {
        let mut b = small().to_bytes();
        b.push(0);
        assert!(matches!(
            ActivationStore::from_bytes(&b),
            Err(StoreError::TrailingBytes(1))
        ));
    }

    #[test]
    fn nan_rejected_on_construct_and_read() {
        let mut values = small().values().to_vec();
        values[5] = f32::NAN;
        let err = ActivationStore::new("m", 2, 2, vec!["a".into(), "b".into(), "c".into()], values);
        assert!(matches!(
            err,
            Err(StoreError::NonFinite {
                sentence: 1,
                ordinal: 1,
                ..
            })
        ));

        let mut b = small().to_bytes();
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            ActivationStore::from_bytes(&b),
            Err(StoreError::NonFinite { .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = ActivationStore::new("m", 1, 1, vec!["a".into(), "a".into()], vec![0.0, 1.0]);
        assert!(matches!(err, Err(StoreError::DuplicateId(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nact");
        let s = small();
        write_store(&s, &path).unwrap();
        assert_eq!(read_store(&path).unwrap(), s);
        assert_eq!(std::fs::read(&path).unwrap(), s.to_bytes());
    }
}
