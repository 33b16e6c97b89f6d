//! Exemplar sets and threshold-based descriptor assignment per neuron.
//!
//! For a neuron, the exemplar set is the top `k`% of sentences by activation
//! (ties by store order). `f(c)` is the share of exemplar sentences annotated
//! with descriptor `c`, and the neuron is assigned every `c` with
//! `f(c) > t`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::BinaryMatrix;
use crate::parallel::{self, Parallelism};
use crate::store::{ActivationStore, NeuronId, StoreError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("activation store is empty")]
    EmptyStore,
    #[error("k_percent must be in (0, 100], got {0}")]
    InvalidKPercent(f64),
    #[error("threshold must be in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("exemplar sentence {0:?} has no row in the annotation matrix")]
    MissingSentence(String),
    #[error("neuron {0} listed more than once")]
    DuplicateNeuron(NeuronId),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

/// `ceil(k_percent / 100 * n)`.
///
/// Products that land within a relative 1e-9 of an integer are treated as
/// that integer, so e.g. 3% of 100 is 3 rather than 4 from rounding noise.
pub fn exemplar_size(n: usize, k_percent: f64) -> usize {
    let x = k_percent * n as f64 / 100.0;
    let r = x.round();
    let size = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (size as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub neuron: NeuronId,
    pub k_percent: f64,
    pub ranked_ids: Vec<String>,
    /// Store rows matching `ranked_ids`.
    #[serde(skip)]
    pub rows: Vec<usize>,
}

fn check_k(k_percent: f64) -> Result<(), AttributionError> {
    if k_percent > 0.0 && k_percent <= 100.0 {
        Ok(())
    } else {
        Err(AttributionError::InvalidKPercent(k_percent))
    }
}

/// Store rows of the top `m` activations, activation-descending, ties by row.
fn top_rows(col: &[f32], m: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| {
        col[*b]
            .partial_cmp(&col[*a])
            .expect("activations are finite")
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..col.len()).collect();
    if m == 0 {
        return Vec::new();
    }
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, cmp);
        idx.truncate(m);
    }
    idx.sort_unstable_by(cmp);
    idx
}

pub fn exemplar_set(
    store: &ActivationStore,
    neuron: NeuronId,
    k_percent: f64,
) -> Result<ExemplarSet, AttributionError> {
    check_k(k_percent)?;
    if store.is_empty() {
        return Err(AttributionError::EmptyStore);
    }
    let col = store.column(neuron)?;
    let rows = top_rows(&col, exemplar_size(store.len(), k_percent));
    Ok(ExemplarSet {
        neuron,
        k_percent,
        ranked_ids: rows
            .iter()
            .map(|&r| store.sentence_ids()[r].clone())
            .collect(),
        rows,
    })
}

/// How unresolved annotation cells enter `f(c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnresolvedPolicy {
    /// Unresolved cells count as "no" and stay in the denominator.
    #[default]
    CountAsNo,
    /// Unresolved cells are left out of that descriptor's denominator.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorFrequencies {
    pub neuron: NeuronId,
    pub descriptors: Vec<String>,
    /// Exemplar sentences annotated with each descriptor.
    pub counts: Vec<usize>,
    /// Denominator per descriptor; `|E|` unless unresolved cells are excluded.
    pub denominators: Vec<usize>,
}

impl DescriptorFrequencies {
    pub fn frequency(&self, col: usize) -> f64 {
        match self.denominators[col] {
            0 => 0.0,
            d => self.counts[col] as f64 / d as f64,
        }
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.descriptors
            .iter()
            .position(|d| d == label)
            .map(|c| self.frequency(c))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.descriptors
            .iter()
            .enumerate()
            .map(|(c, d)| (d.as_str(), self.frequency(c)))
    }

    /// Labels with `f > 0`, by frequency descending then label.
    pub fn ranked(&self) -> Vec<(String, f64)> {
        let mut r: Vec<(String, f64)> = self
            .entries()
            .filter(|(_, f)| *f > 0.0)
            .map(|(d, f)| (d.to_string(), f))
            .collect();
        sort_ranked(&mut r);
        r
    }
}

pub(crate) fn sort_ranked(r: &mut [(String, f64)]) {
    r.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
}

/// Store row -> matrix row, `None` where the sentence is not annotated.
pub fn matrix_rows(store: &ActivationStore, matrix: &BinaryMatrix) -> Vec<Option<usize>> {
    store
        .sentence_ids()
        .iter()
        .map(|id| matrix.row_index(id))
        .collect()
}

fn frequencies_from_rows(
    store: &ActivationStore,
    matrix: &BinaryMatrix,
    row_map: &[Option<usize>],
    ex: &ExemplarSet,
    policy: UnresolvedPolicy,
) -> Result<DescriptorFrequencies, AttributionError> {
    let cols = matrix.cols();
    let mut counts = vec![0usize; cols];
    let mut denominators = vec![ex.rows.len(); cols];
    for &r in &ex.rows {
        let mr = row_map[r]
            .ok_or_else(|| AttributionError::MissingSentence(store.sentence_ids()[r].clone()))?;
        for (c, (count, denom)) in counts.iter_mut().zip(denominators.iter_mut()).enumerate() {
            if matrix.get(mr, c) {
                *count += 1;
            } else if policy == UnresolvedPolicy::Exclude && matrix.is_unresolved(mr, c) {
                *denom -= 1;
            }
        }
    }
    Ok(DescriptorFrequencies {
        neuron: ex.neuron,
        descriptors: matrix.descriptors().to_vec(),
        counts,
        denominators,
    })
}

pub fn descriptor_frequencies(
    exemplars: &ExemplarSet,
    matrix: &BinaryMatrix,
    policy: UnresolvedPolicy,
) -> Result<DescriptorFrequencies, AttributionError> {
    let cols = matrix.cols();
    let mut counts = vec![0usize; cols];
    let mut denominators = vec![exemplars.ranked_ids.len(); cols];
    for id in &exemplars.ranked_ids {
        let mr = matrix
            .row_index(id)
            .ok_or_else(|| AttributionError::MissingSentence(id.clone()))?;
        for c in 0..cols {
            if matrix.get(mr, c) {
                counts[c] += 1;
            } else if policy == UnresolvedPolicy::Exclude && matrix.is_unresolved(mr, c) {
                denominators[c] -= 1;
            }
        }
    }
    Ok(DescriptorFrequencies {
        neuron: exemplars.neuron,
        descriptors: matrix.descriptors().to_vec(),
        counts,
        denominators,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronDescriptors {
    pub neuron: NeuronId,
    pub threshold: f64,
    /// `{c | f(c) > t}`, in ranked order.
    pub assigned: Vec<String>,
    /// Every label with `f > 0`, frequency-descending, ties by label.
    pub ranked: Vec<(String, f64)>,
}

impl NeuronDescriptors {
    /// Builds from an already sorted ranked list.
    pub fn from_ranked(neuron: NeuronId, ranked: Vec<(String, f64)>, threshold: f64) -> Self {
        let assigned = ranked
            .iter()
            .filter(|(_, f)| *f > threshold)
            .map(|(d, _)| d.clone())
            .collect();
        Self {
            neuron,
            threshold,
            assigned,
            ranked,
        }
    }

    /// Assignment the same frequencies would give at another threshold.
    pub fn assigned_at(&self, threshold: f64) -> BTreeSet<&str> {
        self.ranked
            .iter()
            .filter(|(_, f)| *f > threshold)
            .map(|(d, _)| d.as_str())
            .collect()
    }

    pub fn assigned_set(&self) -> BTreeSet<&str> {
        self.assigned.iter().map(String::as_str).collect()
    }

    pub fn top_k(&self, k: usize) -> Vec<&str> {
        self.ranked
            .iter()
            .take(k)
            .map(|(d, _)| d.as_str())
            .collect()
    }
}

fn check_t(t: f64) -> Result<(), AttributionError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(AttributionError::InvalidThreshold(t))
    }
}

pub fn assign_descriptors(
    freqs: &DescriptorFrequencies,
    t: f64,
) -> Result<NeuronDescriptors, AttributionError> {
    check_t(t)?;
    Ok(NeuronDescriptors::from_ranked(
        freqs.neuron,
        freqs.ranked(),
        t,
    ))
}

/// First `k` labels of the ranked list.
pub fn top_k_descriptors(freqs: &DescriptorFrequencies, k: usize) -> Vec<String> {
    freqs.ranked().into_iter().take(k).map(|(d, _)| d).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionParams {
    pub k_percent: f64,
    pub threshold: f64,
    pub unresolved: UnresolvedPolicy,
}

impl Default for AttributionParams {
    fn default() -> Self {
        Self {
            k_percent: 1.0,
            threshold: 0.35,
            unresolved: UnresolvedPolicy::CountAsNo,
        }
    }
}

/// Frequencies for many neurons, fanned out according to `par`.
pub fn neuron_frequencies(
    store: &ActivationStore,
    matrix: &BinaryMatrix,
    neurons: &[NeuronId],
    k_percent: f64,
    policy: UnresolvedPolicy,
    par: Parallelism,
) -> Result<Vec<DescriptorFrequencies>, AttributionError> {
    check_k(k_percent)?;
    if store.is_empty() {
        return Err(AttributionError::EmptyStore);
    }
    let mut seen = HashSet::with_capacity(neurons.len());
    for &n in neurons {
        store.check_neuron(n)?;
        if !seen.insert(n) {
            return Err(AttributionError::DuplicateNeuron(n));
        }
    }
    let row_map = matrix_rows(store, matrix);
    parallel::try_map(par, neurons, |&n| {
        let ex = exemplar_set(store, n, k_percent)?;
        frequencies_from_rows(store, matrix, &row_map, &ex, policy)
    })
}

pub fn attribute(
    store: &ActivationStore,
    matrix: &BinaryMatrix,
    neurons: &[NeuronId],
    params: AttributionParams,
    par: Parallelism,
) -> Result<Vec<NeuronDescriptors>, AttributionError> {
    check_t(params.threshold)?;
    let freqs = neuron_frequencies(
        store,
        matrix,
        neurons,
        params.k_percent,
        params.unresolved,
        par,
    )?;
    freqs
        .iter()
        .map(|f| assign_descriptors(f, params.threshold))
        .collect()
}

/// Descriptor -> neurons carrying it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InverseMap(pub BTreeMap<String, BTreeSet<NeuronId>>);

impl InverseMap {
    pub fn neurons(&self, label: &str) -> Option<&BTreeSet<NeuronId>> {
        self.0.get(label)
    }

    /// `{label: [[layer, index], ...]}`.
    pub fn to_json(&self) -> String {
        let m: BTreeMap<&str, Vec<(u32, u32)>> = self
            .0
            .iter()
            .map(|(k, v)| (k.as_str(), v.iter().map(|n| (n.layer, n.index)).collect()))
            .collect();
        let mut s = serde_json::to_string_pretty(&m).expect("inverse map serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let m: BTreeMap<String, Vec<(u32, u32)>> = serde_json::from_str(text)?;
        Ok(Self(
            m.into_iter()
                .map(|(k, v)| (k, v.into_iter().map(|(l, i)| NeuronId::new(l, i)).collect()))
                .collect(),
        ))
    }
}

pub fn invert_mapping(all: &[NeuronDescriptors]) -> Result<InverseMap, AttributionError> {
    invert_with(all, |nd| nd.assigned.iter().map(String::as_str).collect())
}

/// Inverse map of the assignment each neuron would get at `threshold`.
pub fn invert_at(
    all: &[NeuronDescriptors],
    threshold: f64,
) -> Result<InverseMap, AttributionError> {
    invert_with(all, |nd| nd.assigned_at(threshold).into_iter().collect())
}

fn invert_with<F>(all: &[NeuronDescriptors], labels: F) -> Result<InverseMap, AttributionError>
where
    F: Fn(&NeuronDescriptors) -> Vec<&str>,
{
    let mut seen = HashSet::with_capacity(all.len());
    let mut map: BTreeMap<String, BTreeSet<NeuronId>> = BTreeMap::new();
    for nd in all {
        if !seen.insert(nd.neuron) {
            return Err(AttributionError::DuplicateNeuron(nd.neuron));
        }
        for l in labels(nd) {
            map.entry(l.to_string()).or_default().insert(nd.neuron);
        }
    }
    Ok(InverseMap(map))
}

#[derive(Serialize, Deserialize)]
struct ReportRecord {
    layer: u32,
    index: u32,
    threshold: f64,
    assigned: Vec<String>,
    ranked: Vec<(String, f64)>,
}

/// JSON-lines, one record per neuron.
pub fn report_jsonl(all: &[NeuronDescriptors]) -> String {
    let mut out = String::new();
    for nd in all {
        let rec = ReportRecord {
            layer: nd.neuron.layer,
            index: nd.neuron.index,
            threshold: nd.threshold,
            assigned: nd.assigned.clone(),
            ranked: nd.ranked.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_report(all: &[NeuronDescriptors], path: &Path) -> Result<(), AttributionError> {
    crate::write_atomic(path, report_jsonl(all).as_bytes()).map_err(|source| AttributionError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_report(path: &Path) -> Result<Vec<NeuronDescriptors>, AttributionError> {
    let io = |source| AttributionError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AttributionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReportRecord =
            serde_json::from_str(&line).map_err(|e| AttributionError::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })?;
        out.push(NeuronDescriptors {
            neuron: NeuronId::new(rec.layer, rec.index),
            threshold: rec.threshold,
            assigned: rec.assigned,
            ranked: rec.ranked,
        });
    }
    Ok(out)
}
