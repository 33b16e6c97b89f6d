//! Sentence corpus: JSON-lines loading, length/language filtering, and the
//! seeded calibration/validation split.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::BinaryMatrix;
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate sentence id {0:?}")]
    DuplicateId(String),
    #[error("cannot split an empty corpus")]
    Empty,
    #[error("corpus has no split assignment")]
    NotSplit,
    #[error("split assignment covers some but not all sentences (first missing: {0:?})")]
    PartialSplit(String),
    #[error("sentence {0:?} has no row in the annotation matrix")]
    MissingFromMatrix(String),
    #[error("invalid filter bounds: min_words {min} > max_words {max}")]
    InvalidBounds { min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calibration,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub category: Option<String>,
    pub word_count: usize,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            id: id.into(),
            word_count: word_count(&text),
            text,
            category: None,
        }
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }
}

/// Number of whitespace-delimited tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Where a corpus came from and which filters have been applied to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<String>,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub split_of: Option<HashMap<String, Split>>,
    pub provenance: Provenance,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    text: String,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    category: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids.
    pub fn from_sentences(sentences: Vec<Sentence>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(sentences.len());
        for s in &sentences {
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self {
            sentences,
            split_of: None,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(|s| s.id.as_str())
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split_of.as_ref().and_then(|m| m.get(id).copied())
    }

    /// Sentences assigned to `split`, in corpus order.
    pub fn subset(&self, split: Split) -> Result<Corpus, CorpusError> {
        let map = self.split_of.as_ref().ok_or(CorpusError::NotSplit)?;
        let sentences = self
            .sentences
            .iter()
            .filter(|s| map.get(&s.id) == Some(&split))
            .cloned()
            .collect();
        let mut provenance = self.provenance.clone();
        provenance
            .filters
            .push(format!("subset={}", split_name(split)));
        Ok(Corpus {
            sentences,
            split_of: None,
            provenance,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            let rec = RecordOut {
                id: &s.id,
                text: &s.text,
                category: s.category.as_deref(),
                split: self.split_of(&s.id),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        crate::write_atomic(path, self.to_jsonl().as_bytes()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Calibration => "calibration",
        Split::Validation => "validation",
    }
}

/// Loads a JSON-lines corpus. Blank lines are skipped. A `split` field is
/// honoured when every record carries one.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut corpus = parse_jsonl(BufReader::new(file))?;
    corpus.provenance.source = Some(path.display().to_string());
    Ok(corpus)
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut sentences = Vec::new();
    let mut splits = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId(rec.id));
        }
        let mut s = Sentence::new(rec.id, rec.text);
        s.category = rec.category;
        splits.push(rec.split);
        sentences.push(s);
    }

    let split_of = if splits.iter().all(Option::is_none) {
        None
    } else {
        let mut map = HashMap::with_capacity(sentences.len());
        for (s, split) in sentences.iter().zip(&splits) {
            match split {
                Some(x) => {
                    map.insert(s.id.clone(), *x);
                }
                None => return Err(CorpusError::PartialSplit(s.id.clone())),
            }
        }
        Some(map)
    };

    Ok(Corpus {
        sentences,
        split_of,
        provenance: Provenance::default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub min_words: usize,
    pub max_words: usize,
    pub english_only: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            min_words: 10,
            max_words: 200,
            english_only: false,
        }
    }
}

/// Share of alphabetic characters that must be ASCII letters for a sentence
/// to pass the English heuristic.
pub const ENGLISH_ASCII_RATIO: f64 = 0.9;

/// True when at least 90% of the alphabetic characters are ASCII letters.
/// Text without any alphabetic character fails.
pub fn looks_english(text: &str) -> bool {
    let (mut alpha, mut ascii) = (0usize, 0usize);
    for c in text.chars().filter(|c| c.is_alphabetic()) {
        alpha += 1;
        if c.is_ascii_alphabetic() {
            ascii += 1;
        }
    }
    alpha > 0 && ascii as f64 >= ENGLISH_ASCII_RATIO * alpha as f64
}

/// Keeps sentences with `min_words <= word_count <= max_words` (and, when
/// requested, passing [`looks_english`]). Order is preserved.
pub fn filter_corpus(corpus: &Corpus, params: &FilterParams) -> Result<Corpus, CorpusError> {
    if params.min_words > params.max_words {
        return Err(CorpusError::InvalidBounds {
            min: params.min_words,
            max: params.max_words,
        });
    }
    let sentences: Vec<Sentence> = corpus
        .sentences
        .iter()
        .filter(|s| s.word_count >= params.min_words && s.word_count <= params.max_words)
        .filter(|s| !params.english_only || looks_english(&s.text))
        .cloned()
        .collect();
    let split_of = corpus.split_of.as_ref().map(|m| {
        sentences
            .iter()
            .filter_map(|s| m.get(&s.id).map(|x| (s.id.clone(), *x)))
            .collect()
    });
    let mut provenance = corpus.provenance.clone();
    provenance.filters.push(format!(
        "words={}..={}{}",
        params.min_words,
        params.max_words,
        if params.english_only {
            ",english_only"
        } else {
            ""
        }
    ));
    Ok(Corpus {
        sentences,
        split_of,
        provenance,
    })
}

/// Seeded uniform split. Calibration receives `ceil(n/2)` sentences,
/// validation `floor(n/2)`.
pub fn split_corpus(corpus: &Corpus, seed: u64) -> Result<Corpus, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let n_cal = n.div_ceil(2);
    let mut map = HashMap::with_capacity(n);
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_cal {
            Split::Calibration
        } else {
            Split::Validation
        };
        map.insert(corpus.sentences[idx].id.clone(), split);
    }
    let mut out = corpus.clone();
    out.split_of = Some(map);
    out.provenance.filters.push(format!("split(seed={seed})"));
    Ok(out)
}

/// Per-descriptor positive counts in each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDistribution {
    pub descriptors: Vec<String>,
    pub calibration: Vec<usize>,
    pub validation: Vec<usize>,
    pub calibration_size: usize,
    pub validation_size: usize,
}

pub fn split_distribution(
    corpus: &Corpus,
    matrix: &BinaryMatrix,
) -> Result<SplitDistribution, CorpusError> {
    let map = corpus.split_of.as_ref().ok_or(CorpusError::NotSplit)?;
    let width = matrix.descriptors().len();
    let mut dist = SplitDistribution {
        descriptors: matrix.descriptors().to_vec(),
        calibration: vec![0; width],
        validation: vec![0; width],
        calibration_size: 0,
        validation_size: 0,
    };
    for s in &corpus.sentences {
        let row = matrix
            .row_index(&s.id)
            .ok_or_else(|| CorpusError::MissingFromMatrix(s.id.clone()))?;
        let (counts, size) = match map.get(&s.id) {
            Some(Split::Calibration) => (&mut dist.calibration, &mut dist.calibration_size),
            Some(Split::Validation) => (&mut dist.validation, &mut dist.validation_size),
            None => return Err(CorpusError::PartialSplit(s.id.clone())),
        };
        *size += 1;
        for (col, c) in counts.iter_mut().enumerate() {
            if matrix.get(row, col) {
                *c += 1;
            }
        }
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence_of(words: usize, id: &str) -> Sentence {
        let text = vec!["word"; words].join(" ");
        Sentence::new(id, text)
    }

    fn corpus_of(n: usize) -> Corpus {
        Corpus::from_sentences((0..n).map(|i| sentence_of(12, &format!("s{i}"))).collect()).unwrap()
    }

    #[test]
    fn loads_three_records_in_order() {
        let data = r#"{"id":"a","text":"one two three"}
{"id":"b","text":"four","category":"books"}

{"id":"c","text":"  five   six "}
"#;
        let c = parse_jsonl(data.as_bytes()).unwrap();
        assert_eq!(c.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(c.sentences[0].word_count, 3);
        assert_eq!(c.sentences[1].category.as_deref(), Some("books"));
        assert_eq!(c.sentences[2].word_count, 2);
        assert!(c.split_of.is_none());
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let data = "{\"id\":\"r1\",\"text\":\"x\"}\n{\"id\":\"r1\",\"text\":\"y\"}\n";
        assert!(matches!(
            parse_jsonl(data.as_bytes()),
            Err(CorpusError::DuplicateId(id)) if id == "r1"
        ));
    }

    #[test]
    fn malformed_record_names_line() {
        let data = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\"}\n";
        match parse_jsonl(data.as_bytes()) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partial_split_field_is_rejected() {
        let data = "{\"id\":\"a\",\"text\":\"x\",\"split\":\"calibration\"}\n{\"id\":\"b\",\"text\":\"y\"}\n";
        assert!(matches!(
            parse_jsonl(data.as_bytes()),
            Err(CorpusError::PartialSplit(_))
        ));
    }

    #[test]
    fn filter_word_bounds() {
        let c = Corpus::from_sentences(vec![
            sentence_of(5, "five"),
            sentence_of(10, "ten"),
            sentence_of(200, "two-hundred"),
            sentence_of(201, "two-hundred-one"),
            sentence_of(250, "two-fifty"),
        ])
        .unwrap();
        let f = filter_corpus(&c, &FilterParams::default()).unwrap();
        assert_eq!(f.ids().collect::<Vec<_>>(), ["ten", "two-hundred"]);
    }

    #[test]
    fn filter_rejects_inverted_bounds() {
        let p = FilterParams {
            min_words: 5,
            max_words: 4,
            english_only: false,
        };
        assert!(filter_corpus(&corpus_of(2), &p).is_err());
    }

    #[test]
    fn english_heuristic() {
        assert!(looks_english("This colour is great, 10/10 would buy again"));
        assert!(!looks_english("Этот цвет просто великолепный и яркий"));
        assert!(!looks_english("12345 !!!"));
        // 9 of 10 letters ASCII: exactly on the boundary.
        assert!(looks_english("abcdefghié"));
        assert!(!looks_english("abcdefghéé"));
        let c = Corpus::from_sentences(vec![
            Sentence::new("en", "this is a perfectly fine english review of a product"),
            Sentence::new(
                "ru",
                "это совершенно нормальный отзыв о продукте на русском языке",
            ),
        ])
        .unwrap();
        let p = FilterParams {
            english_only: true,
            ..FilterParams::default()
        };
        let f = filter_corpus(&c, &p).unwrap();
        assert_eq!(f.ids().collect::<Vec<_>>(), ["en"]);
    }

    #[test]
    fn split_sizes() {
        let s = split_corpus(&corpus_of(1), 0).unwrap();
        assert_eq!(s.split_of("s0"), Some(Split::Calibration));
        for n in [2, 7, 100, 101] {
            let s = split_corpus(&corpus_of(n), 11).unwrap();
            let cal = s.subset(Split::Calibration).unwrap().len();
            let val = s.subset(Split::Validation).unwrap().len();
            assert_eq!(cal, n.div_ceil(2));
            assert_eq!(val, n / 2);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let c = corpus_of(101);
        let a = split_corpus(&c, 7).unwrap();
        let b = split_corpus(&c, 7).unwrap();
        assert_eq!(a.split_of, b.split_of);
    }

    #[test]
    fn split_empty_is_error() {
        assert!(matches!(
            split_corpus(&corpus_of(0), 1),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn jsonl_round_trip_with_split() {
        let c = split_corpus(&corpus_of(5), 2).unwrap();
        let back = parse_jsonl(c.to_jsonl().as_bytes()).unwrap();
        assert_eq!(back.sentences, c.sentences);
        assert_eq!(back.split_of, c.split_of);
    }

    #[test]
    fn distribution_all_zero_and_one_sided() {
        let c = split_corpus(&corpus_of(10), 5).unwrap();
        let ids: Vec<String> = c.ids().map(String::from).collect();
        let labels = vec!["Color".to_string(), "Price".to_string()];
        let zero = BinaryMatrix::zeros(ids.clone(), labels.clone()).unwrap();
        let d = split_distribution(&c, &zero).unwrap();
        assert_eq!(d.calibration, vec![0, 0]);
        assert_eq!(d.validation, vec![0, 0]);
        assert_eq!((d.calibration_size, d.validation_size), (5, 5));

        let mut m = BinaryMatrix::zeros(ids.clone(), labels).unwrap();
        for (row, id) in ids.iter().enumerate() {
            if c.split_of(id) == Some(Split::Calibration) {
                m.set(row, 0, true);
            }
        }
        let d = split_distribution(&c, &m).unwrap();
        assert_eq!((d.calibration[0], d.validation[0]), (5, 0));
    }

    #[test]
    fn distribution_missing_row() {
        let c = split_corpus(&corpus_of(3), 5).unwrap();
        let m = BinaryMatrix::zeros(vec!["s0".into(), "s1".into()], vec!["X".into()]).unwrap();
        assert!(matches!(
            split_distribution(&c, &m),
            Err(CorpusError::MissingFromMatrix(id)) if id == "s2"
        ));
    }
}
