//! Sentence × descriptor yes/no annotation and the `.nbin` matrix format.
//!
//! `.nbin` layout: one compact JSON header line
//! `{"descriptors":[..],"sentence_ids":[..],"unresolved":[[id,label],..]}`
//! terminated by `\n`, followed by one packed bitset per row. Each row takes
//! `ceil(|descriptors| / 8)` bytes; descriptor `j` lives in byte `j / 8`, bit
//! `j % 8` (least significant first); padding bits are zero.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::descriptors::{DescriptorError, DescriptorSet, PromptTemplate};
use crate::gateway::{Gateway, LlmRequest};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupted matrix header: {0}")]
    Header(String),
    #[error("matrix payload has {got} bytes, expected {expected} for {rows} x {cols}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("corrupted matrix payload: {0}")]
    Payload(String),
    #[error("duplicate {kind} {name:?}")]
    Duplicate { kind: &'static str, name: String },
    #[error("unresolved cell ({0:?}, {1:?}) is not in the matrix")]
    UnknownCell(String, String),
    #[error("nothing to annotate: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Template(#[from] DescriptorError),
    #[error("CSV export failed: {0}")]
    Csv(String),
}

/// A parsed yes/no answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Answer {
    Yes,
    No,
    Unresolved,
}

/// Case-insensitive; leading whitespace and punctuation are ignored and only
/// the first word counts, so "yes it does" is Yes but "yesterday" is not.
pub fn parse_yes_no(raw: &str) -> Answer {
    let word: String = raw
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Answer::Yes,
        "no" => Answer::No,
        _ => Answer::Unresolved,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    sentence_ids: Vec<String>,
    descriptors: Vec<String>,
    bits: Vec<bool>,
    unresolved: BTreeSet<(usize, usize)>,
    row_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    descriptors: Vec<String>,
    sentence_ids: Vec<String>,
    unresolved: Vec<(String, String)>,
}

impl BinaryMatrix {
    pub fn zeros(
        sentence_ids: Vec<String>,
        descriptors: Vec<String>,
    ) -> Result<Self, AnnotationError> {
        let mut row_index = HashMap::with_capacity(sentence_ids.len());
        for (i, id) in sentence_ids.iter().enumerate() {
            if row_index.insert(id.clone(), i).is_some() {
                return Err(AnnotationError::Duplicate {
                    kind: "sentence id",
                    name: id.clone(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for d in &descriptors {
            if !seen.insert(d.as_str()) {
                return Err(AnnotationError::Duplicate {
                    kind: "descriptor",
                    name: d.clone(),
                });
            }
        }
        Ok(Self {
            bits: vec![false; sentence_ids.len() * descriptors.len()],
            sentence_ids,
            descriptors,
            unresolved: BTreeSet::new(),
            row_index,
        })
    }

    pub fn rows(&self) -> usize {
        self.sentence_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.descriptors.len()
    }

    pub fn sentence_ids(&self) -> &[String] {
        &self.sentence_ids
    }

    pub fn descriptors(&self) -> &[String] {
        &self.descriptors
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.row_index.get(id).copied()
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.descriptors.iter().position(|d| d == label)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols() + col]
    }

    /// Sets a resolved answer, clearing any unresolved mark on the cell.
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let c = self.cols();
        self.bits[row * c + col] = value;
        self.unresolved.remove(&(row, col));
    }

    /// Marks a cell unresolved; its bit reads as 0.
    pub fn set_unresolved(&mut self, row: usize, col: usize) {
        let c = self.cols();
        self.bits[row * c + col] = false;
        self.unresolved.insert((row, col));
    }

    pub fn is_unresolved(&self, row: usize, col: usize) -> bool {
        self.unresolved.contains(&(row, col))
    }

    /// Unresolved cells as `(row, col)`, sorted.
    pub fn unresolved(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.unresolved.iter().copied()
    }

    pub fn unresolved_count(&self) -> usize {
        self.unresolved.len()
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let c = self.cols();
        &self.bits[row * c..(row + 1) * c]
    }

    pub fn column(&self, col: usize) -> Vec<bool> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn row_bytes(&self) -> usize {
        self.cols().div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            descriptors: self.descriptors.clone(),
            sentence_ids: self.sentence_ids.clone(),
            unresolved: self
                .unresolved
                .iter()
                .map(|&(r, c)| (self.sentence_ids[r].clone(), self.descriptors[c].clone()))
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        let rb = self.row_bytes();
        out.reserve(rb * self.rows());
        for r in 0..self.rows() {
            let mut packed = vec![0u8; rb];
            for (j, &b) in self.row(r).iter().enumerate() {
                if b {
                    packed[j / 8] |= 1 << (j % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AnnotationError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| AnnotationError::Header("no header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| AnnotationError::Header(e.to_string()))?;
        let mut m = Self::zeros(header.sentence_ids, header.descriptors)?;
        let payload = &bytes[nl + 1..];
        let rb = m.row_bytes();
        let expected = rb * m.rows();
        if payload.len() != expected {
            return Err(AnnotationError::DimensionMismatch {
                rows: m.rows(),
                cols: m.cols(),
                expected,
                got: payload.len(),
            });
        }
        let cols = m.cols();
        for r in 0..m.rows() {
            let packed = &payload[r * rb..(r + 1) * rb];
            for j in 0..cols {
                m.bits[r * cols + j] = packed[j / 8] >> (j % 8) & 1 == 1;
            }
            if cols % 8 != 0 && packed[rb - 1] >> (cols % 8) != 0 {
                return Err(AnnotationError::Payload(format!(
                    "non-zero padding in row {r}"
                )));
            }
        }
        for (sid, label) in header.unresolved {
            let (Some(r), Some(c)) = (m.row_index(&sid), m.column_index(&label)) else {
                return Err(AnnotationError::UnknownCell(sid, label));
            };
            if m.get(r, c) {
                return Err(AnnotationError::Payload(format!(
                    "unresolved cell ({sid:?}, {label:?}) has bit 1"
                )));
            }
            m.unresolved.insert((r, c));
        }
        Ok(m)
    }

    /// Header row `sentence_id,<descriptors...>`, then one 0/1 row per sentence.
    pub fn to_csv(&self) -> Result<String, AnnotationError> {
        let csv_err = |e: csv::Error| AnnotationError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sentence_id"];
        header.extend(self.descriptors.iter().map(String::as_str));
        w.write_record(&header).map_err(csv_err)?;
        for (r, id) in self.sentence_ids.iter().enumerate() {
            let mut rec = vec![id.as_str()];
            rec.extend(self.row(r).iter().map(|&b| if b { "1" } else { "0" }));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| AnnotationError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

pub fn write_matrix(matrix: &BinaryMatrix, path: &Path) -> Result<(), AnnotationError> {
    crate::write_atomic(path, &matrix.to_bytes()).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_matrix(path: &Path) -> Result<BinaryMatrix, AnnotationError> {
    let bytes = std::fs::read(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    BinaryMatrix::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotateOptions {
    pub max_output_tokens: u32,
    pub max_in_flight: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            max_output_tokens: 4,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellFailure {
    pub sentence_id: String,
    pub descriptor: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub matrix: BinaryMatrix,
    pub requests: usize,
    /// Cells left unresolved because the gateway failed; cells whose answer
    /// simply did not parse are unresolved without an entry here.
    pub failures: Vec<CellFailure>,
}

/// Asks one yes/no question per (sentence, descriptor) cell. Rows follow
/// corpus order and columns follow the descriptor set.
pub fn annotate(
    gateway: &Gateway,
    model_id: &str,
    corpus: &Corpus,
    set: &DescriptorSet,
    template: &PromptTemplate,
    opts: AnnotateOptions,
) -> Result<Annotation, AnnotationError> {
    if corpus.is_empty() {
        return Err(AnnotationError::Empty("corpus"));
    }
    if set.is_empty() {
        return Err(AnnotationError::Empty("descriptor set"));
    }
    let mut matrix = BinaryMatrix::zeros(
        corpus.ids().map(String::from).collect(),
        set.descriptors.clone(),
    )?;
    let mut reqs = Vec::with_capacity(corpus.len() * set.len());
    for s in &corpus.sentences {
        for d in &set.descriptors {
            let prompt = template.render_p2(d, s)?;
            reqs.push(
                LlmRequest::new(model_id, prompt).with_max_output_tokens(opts.max_output_tokens),
            );
        }
    }
    let responses = gateway.request_batch(&reqs, opts.max_in_flight);
    let cols = set.len();
    let mut failures = Vec::new();
    for (i, resp) in responses.into_iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        match resp.map(|x| parse_yes_no(&x.text)) {
            Ok(Answer::Yes) => matrix.set(r, c, true),
            Ok(Answer::No) => matrix.set(r, c, false),
            Ok(Answer::Unresolved) => matrix.set_unresolved(r, c),
            Err(e) => {
                matrix.set_unresolved(r, c);
                failures.push(CellFailure {
                    sentence_id: matrix.sentence_ids()[r].clone(),
                    descriptor: set.descriptors[c].clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(Annotation {
        matrix,
        requests: reqs.len(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes"), Answer::Yes);
        assert_eq!(parse_yes_no("no."), Answer::No);
        assert_eq!(parse_yes_no("maybe"), Answer::Unresolved);
        assert_eq!(parse_yes_no("  YES it does"), Answer::Yes);
        assert_eq!(parse_yes_no("\"No\""), Answer::No);
        assert_eq!(parse_yes_no("yesterday"), Answer::Unresolved);
        assert_eq!(parse_yes_no("nope"), Answer::Unresolved);
        assert_eq!(parse_yes_no(""), Answer::Unresolved);
    }

    fn ids(n: usize, prefix: &str) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn empty_matrix_round_trip() {
        let m = BinaryMatrix::zeros(vec![], ids(3, "d")).unwrap();
        let back = BinaryMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.rows(), 0);
    }

    #[test]
    fn corrupted_header() {
        assert!(matches!(
            BinaryMatrix::from_bytes(b"{not json\n"),
            Err(AnnotationError::Header(_))
        ));
        assert!(matches!(
            BinaryMatrix::from_bytes(b"no newline"),
            Err(AnnotationError::Header(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let m = BinaryMatrix::zeros(ids(4, "s"), ids(9, "d")).unwrap();
        let mut b = m.to_bytes();
        b.pop();
        assert!(matches!(
            BinaryMatrix::from_bytes(&b),
            Err(AnnotationError::DimensionMismatch {
                rows: 4,
                cols: 9,
                expected: 8,
                got: 7
            })
        ));
    }

    #[test]
    fn padding_and_unresolved_checks() {
        let mut m = BinaryMatrix::zeros(ids(1, "s"), ids(3, "d")).unwrap();
        m.set_unresolved(0, 1);
        let mut b = m.to_bytes();
        let last = b.len() - 1;
        b[last] = 0b1000_0000;
        assert!(matches!(
            BinaryMatrix::from_bytes(&b),
            Err(AnnotationError::Payload(_))
        ));
        b[last] = 0b0000_0010;
        assert!(matches!(
            BinaryMatrix::from_bytes(&b),
            Err(AnnotationError::Payload(_))
        ));
    }

    #[test]
    fn bit_layout_is_lsb_first() {
        let mut m = BinaryMatrix::zeros(ids(1, "s"), ids(10, "d")).unwrap();
        m.set(0, 0, true);
        m.set(0, 9, true);
        let b = m.to_bytes();
        assert_eq!(&b[b.len() - 2..], &[0b0000_0001, 0b0000_0010]);
    }

    #[test]
    fn csv_export() {
        let mut m =
            BinaryMatrix::zeros(ids(2, "s"), vec!["Size, Fit".into(), "Color".into()]).unwrap();
        m.set(1, 1, true);
        assert_eq!(
            m.to_csv().unwrap(),
            "sentence_id,\"Size, Fit\",Color\ns0,0,0\ns1,0,1\n"
        );
    }

    #[test]
    fn set_clears_unresolved() {
        let mut m = BinaryMatrix::zeros(ids(1, "s"), ids(1, "d")).unwrap();
        m.set_unresolved(0, 0);
        assert!(m.is_unresolved(0, 0));
        m.set(0, 0, true);
        assert!(!m.is_unresolved(0, 0));
        assert!(m.get(0, 0));
    }

    proptest! {
        #[test]
        fn bits_and_unresolved_round_trip(
            rows in 0usize..12,
            cols in 0usize..20,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let mut m = BinaryMatrix::zeros(ids(rows, "s"), ids(cols, "d")).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    match rng.below(3) {
                        0 => m.set(r, c, true),
                        1 => m.set_unresolved(r, c),
                        _ => {}
                    }
                }
            }
            let bytes = m.to_bytes();
            let back = BinaryMatrix::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.to_bytes(), bytes);
            for (r, c) in back.unresolved() {
                prop_assert!(!back.get(r, c));
            }
        }
    }
}
