//! Metrics: precision/recall against ground truth (thresholded and top-K),
//! calibration/validation Jaccard consistency, phi correlation between
//! descriptor columns, and Cohen's kappa between two annotations.
//!
//! Undefined statistics (empty denominators, constant columns) are `None`
//! and serialize as `null`; they are never folded into zero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::BinaryMatrix;
use crate::attribution::{
    invert_at, neuron_frequencies, AttributionError, NeuronDescriptors, UnresolvedPolicy,
};
use crate::parallel::{self, Parallelism};
use crate::store::{ActivationStore, NeuronId};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("K must be at least 1")]
    InvalidK,
    #[error("annotation lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("annotations must be non-empty")]
    EmptyAnnotations,
    #[error("neuron {0} is missing from {1}")]
    MissingNeuron(NeuronId, &'static str),
    #[error("the two annotation matrices share no cells")]
    NoOverlap,
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall<T: Ord>(pred: &BTreeSet<T>, truth: &BTreeSet<T>) -> PrecisionRecall {
    let hits = pred.intersection(truth).count();
    PrecisionRecall {
        precision: ratio(hits, pred.len()),
        recall: ratio(hits, truth.len()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub hits: usize,
    pub precision: f64,
    pub recall: Option<f64>,
}

/// `P@K = |top-K ∩ truth| / K`, `R@K = |top-K ∩ truth| / |truth|`. A ranked
/// list shorter than `K` still divides by `K`.
pub fn precision_recall_at_k<S: AsRef<str>>(
    ranked: &[S],
    truth: &BTreeSet<&str>,
    k: usize,
) -> Result<AtK, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let top: BTreeSet<&str> = ranked.iter().take(k).map(AsRef::as_ref).collect();
    let hits = top.iter().filter(|d| truth.contains(*d)).count();
    Ok(AtK {
        k,
        hits,
        precision: hits as f64 / k as f64,
        recall: ratio(hits, truth.len()),
    })
}

/// `|a ∩ b| / |a ∪ b|`, with `J(∅, ∅) = 1`.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of<I: IntoIterator<Item = Option<f64>>>(values: I) -> Self {
        let xs: Vec<f64> = values.into_iter().flatten().collect();
        if xs.is_empty() {
            return Self {
                mean: None,
                std: None,
                n: 0,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            n: xs.len(),
        }
    }
}

/// Reference descriptor lists per neuron, most relevant first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth(pub BTreeMap<NeuronId, Vec<String>>);

#[derive(Serialize, Deserialize)]
struct TruthFile {
    neurons: Vec<TruthRecord>,
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    layer: u32,
    index: u32,
    labels: Vec<String>,
}

impl GroundTruth {
    /// Keeps the first `n` labels per neuron.
    pub fn truncated(&self, n: usize) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (*k, v.iter().take(n).cloned().collect()))
                .collect(),
        )
    }

    pub fn labels(&self, n: NeuronId) -> Option<BTreeSet<&str>> {
        self.0
            .get(&n)
            .map(|v| v.iter().map(String::as_str).collect())
    }

    /// `{"neurons": [{"layer", "index", "labels": [...]}, ...]}`.
    pub fn to_json(&self) -> String {
        let f = TruthFile {
            neurons: self
                .0
                .iter()
                .map(|(n, l)| TruthRecord {
                    layer: n.layer,
                    index: n.index,
                    labels: l.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&f).expect("truth serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let f: TruthFile = serde_json::from_str(text)?;
        Ok(Self(
            f.neurons
                .into_iter()
                .map(|r| (NeuronId::new(r.layer, r.index), r.labels))
                .collect(),
        ))
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JaccardPoint {
    pub t: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn pair_up<'a>(
    cal: &'a [NeuronDescriptors],
    val: &'a [NeuronDescriptors],
) -> Result<Vec<(&'a NeuronDescriptors, &'a NeuronDescriptors)>, EvalError> {
    let by_id: BTreeMap<NeuronId, &NeuronDescriptors> = val.iter().map(|v| (v.neuron, v)).collect();
    let cal_ids: BTreeSet<NeuronId> = cal.iter().map(|c| c.neuron).collect();
    if let Some(extra) = by_id.keys().find(|n| !cal_ids.contains(n)) {
        return Err(EvalError::MissingNeuron(*extra, "calibration attribution"));
    }
    cal.iter()
        .map(|c| {
            by_id
                .get(&c.neuron)
                .map(|v| (c, *v))
                .ok_or(EvalError::MissingNeuron(c.neuron, "validation attribution"))
        })
        .collect()
}

/// Mean/std over neurons of `J(assigned_cal(t), assigned_val(t))` for each
/// `t`, using the ranked frequencies carried by each attribution.
pub fn consistency_curve(
    cal: &[NeuronDescriptors],
    val: &[NeuronDescriptors],
    t_grid: &[f64],
    par: Parallelism,
) -> Result<Vec<JaccardPoint>, EvalError> {
    let pairs = pair_up(cal, val)?;
    Ok(parallel::map(par, t_grid, |&t| {
        let js = pairs
            .iter()
            .map(|(c, v)| Some(jaccard(&c.assigned_at(t), &v.assigned_at(t))));
        let s = MeanStd::of(js);
        JaccardPoint {
            t,
            mean: s.mean.unwrap_or(1.0),
            std: s.std.unwrap_or(0.0),
            n: s.n,
        }
    }))
}

/// Runs attribution on both splits and sweeps `t_grid`.
#[allow(clippy::too_many_arguments)]
pub fn neuron_consistency_curve(
    store_cal: &ActivationStore,
    store_val: &ActivationStore,
    matrix_cal: &BinaryMatrix,
    matrix_val: &BinaryMatrix,
    neurons: &[NeuronId],
    k_percent: f64,
    t_grid: &[f64],
    par: Parallelism,
) -> Result<Vec<JaccardPoint>, EvalError> {
    let ranked = |store, matrix| -> Result<Vec<NeuronDescriptors>, EvalError> {
        Ok(neuron_frequencies(
            store,
            matrix,
            neurons,
            k_percent,
            UnresolvedPolicy::CountAsNo,
            par,
        )?
        .iter()
        .map(|f| NeuronDescriptors::from_ranked(f.neuron, f.ranked(), 0.0))
        .collect())
    };
    let cal = ranked(store_cal, matrix_cal)?;
    let val = ranked(store_val, matrix_val)?;
    consistency_curve(&cal, &val, t_grid, par)
}

/// Per-label Jaccard between the neuron sets of two inverse maps; a label
/// absent from a map counts as the empty set.
pub fn descriptor_consistency(
    cal: &crate::attribution::InverseMap,
    val: &crate::attribution::InverseMap,
    labels: &[String],
) -> BTreeMap<String, f64> {
    let empty = BTreeSet::new();
    labels
        .iter()
        .map(|l| {
            let a = cal.neurons(l).unwrap_or(&empty);
            let b = val.neurons(l).unwrap_or(&empty);
            (l.clone(), jaccard(a, b))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorJaccardPoint {
    pub t: f64,
    pub per_label: BTreeMap<String, f64>,
}

pub fn descriptor_consistency_curve(
    cal: &[NeuronDescriptors],
    val: &[NeuronDescriptors],
    labels: &[String],
    t_grid: &[f64],
    par: Parallelism,
) -> Result<Vec<DescriptorJaccardPoint>, EvalError> {
    pair_up(cal, val)?;
    parallel::try_map(par, t_grid, |&t| {
        let a = invert_at(cal, t)?;
        let b = invert_at(val, t)?;
        Ok(DescriptorJaccardPoint {
            t,
            per_label: descriptor_consistency(&a, &b, labels),
        })
    })
}

/// Phi coefficient of two binary columns from their 2x2 contingency table.
/// `None` when either column is constant.
pub fn phi(a: &[bool], b: &[bool]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "phi over columns of different length");
    let (mut n11, mut n10, mut n01, mut n00) = (0u64, 0u64, 0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => n11 += 1,
            (true, false) => n10 += 1,
            (false, true) => n01 += 1,
            (false, false) => n00 += 1,
        }
    }
    let row = (n11 + n10) as u128 * (n01 + n00) as u128;
    let col = (n11 + n01) as u128 * (n10 + n00) as u128;
    if row == 0 || col == 0 {
        return None;
    }
    let num = n11 as f64 * n00 as f64 - n10 as f64 * n01 as f64;
    // Equal marginal products give an exact denominator, keeping ±1 exact.
    let den = if row == col {
        row as f64
    } else {
        ((row * col) as f64).sqrt()
    };
    Some((num / den).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }

    /// Labels header, then one row per label; undefined entries are `NA`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).expect("in-memory csv");
        for (label, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| match v {
                Some(x) => format!("{x}"),
                None => "NA".to_string(),
            }));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

/// Pairwise phi over the matrix columns; the diagonal is 1 for non-constant
/// columns.
pub fn phi_correlation(matrix: &BinaryMatrix, par: Parallelism) -> CorrelationMatrix {
    let cols: Vec<Vec<bool>> = (0..matrix.cols()).map(|c| matrix.column(c)).collect();
    let n = cols.len();
    let upper: Vec<Vec<Option<f64>>> = parallel::map_range(par, n, |i| {
        (i..n)
            .map(|j| {
                if i == j {
                    phi(&cols[i], &cols[i]).map(|_| 1.0)
                } else {
                    phi(&cols[i], &cols[j])
                }
            })
            .collect()
    });
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = upper[i][j - i];
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    CorrelationMatrix {
        labels: matrix.descriptors().to_vec(),
        values,
    }
}

/// `(p_o - p_e) / (1 - p_e)` evaluated from integer counts with a single
/// final division. `None` when `p_e = 1` and `p_o < 1`.
pub fn cohens_kappa(a: &[bool], b: &[bool]) -> Result<Option<f64>, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::EmptyAnnotations);
    }
    let n = a.len() as u128;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as u128;
    let a1 = a.iter().filter(|&&x| x).count() as u128;
    let b1 = b.iter().filter(|&&x| x).count() as u128;
    let chance = a1 * b1 + (n - a1) * (n - b1); // p_e * n^2
    let num = (agree * n) as i128 - chance as i128;
    let den = (n * n) as i128 - chance as i128;
    if den == 0 {
        return Ok((agree == n).then_some(1.0));
    }
    Ok(Some(num as f64 / den as f64))
}

/// Agreement of one annotation against a reference over their shared cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationAgreement {
    pub cells: usize,
    /// Pooled over all cells.
    pub micro: PrecisionRecall,
    /// Mean of per-descriptor precision and recall (defined values only).
    pub macro_avg: PrecisionRecall,
    pub kappa: Option<f64>,
}

pub fn compare_annotations(
    pred: &BinaryMatrix,
    truth: &BinaryMatrix,
) -> Result<AnnotationAgreement, EvalError> {
    let cols: Vec<(usize, usize)> = pred
        .descriptors()
        .iter()
        .enumerate()
        .filter_map(|(i, d)| truth.column_index(d).map(|j| (i, j)))
        .collect();
    let rows: Vec<(usize, usize)> = pred
        .sentence_ids()
        .iter()
        .enumerate()
        .filter_map(|(i, id)| truth.row_index(id).map(|j| (i, j)))
        .collect();
    if cols.is_empty() || rows.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let (mut all_p, mut all_t) = (Vec::new(), Vec::new());
    let mut per_p = Vec::new();
    let mut per_r = Vec::new();
    for &(pc, tc) in &cols {
        let (mut tp, mut pp, mut tt) = (0, 0, 0);
        for &(pr, tr) in &rows {
            let (p, t) = (pred.get(pr, pc), truth.get(tr, tc));
            tp += (p && t) as usize;
            pp += p as usize;
            tt += t as usize;
            all_p.push(p);
            all_t.push(t);
        }
        per_p.push(ratio(tp, pp));
        per_r.push(ratio(tp, tt));
    }
    let tp = all_p.iter().zip(&all_t).filter(|(p, t)| **p && **t).count();
    let pp = all_p.iter().filter(|&&p| p).count();
    let tt = all_t.iter().filter(|&&t| t).count();
    Ok(AnnotationAgreement {
        cells: all_p.len(),
        micro: PrecisionRecall {
            precision: ratio(tp, pp),
            recall: ratio(tp, tt),
        },
        macro_avg: PrecisionRecall {
            precision: MeanStd::of(per_p).mean,
            recall: MeanStd::of(per_r).mean,
        },
        kappa: cohens_kappa(&all_p, &all_t)?,
    })
}

/// `0, 0.05, ..., 1`.
pub fn default_t_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurvePoint {
    pub t: f64,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtKPoint {
    pub k: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub t_grid: Vec<f64>,
    pub k_list: Vec<usize>,
    /// Truth lists are cut to this many labels before P@K/R@K.
    pub truth_top: Option<usize>,
    /// Labels for descriptor-level Jaccard; all assigned labels when `None`.
    pub labels: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t_grid: default_t_grid(),
            k_list: (1..=5).collect(),
            truth_top: Some(3),
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSection {
    pub value: Option<f64>,
    pub agreement: AnnotationAgreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pr_curves: Vec<PrCurvePoint>,
    pub pr_at_k: Vec<AtKPoint>,
    pub neuron_jaccard: Vec<JaccardPoint>,
    pub descriptor_jaccard: Vec<DescriptorJaccardPoint>,
    pub correlation: Option<CorrelationMatrix>,
    pub kappa: Option<KappaSection>,
}

#[derive(Default)]
pub struct EvalInputs<'a> {
    pub calibration: &'a [NeuronDescriptors],
    pub validation: Option<&'a [NeuronDescriptors]>,
    pub truth: Option<&'a GroundTruth>,
    pub matrix: Option<&'a BinaryMatrix>,
    /// `(reference, other)` annotations for agreement statistics.
    pub annotations: Option<(&'a BinaryMatrix, &'a BinaryMatrix)>,
}

/// Thresholded P/R curves against the full truth lists; P@K/R@K against
/// truth cut to `truth_top`. Both use the calibration attribution.
pub fn truth_metrics(
    cal: &[NeuronDescriptors],
    truth: &GroundTruth,
    cfg: &EvalConfig,
    par: Parallelism,
) -> Result<(Vec<PrCurvePoint>, Vec<AtKPoint>), EvalError> {
    let by_id: BTreeMap<NeuronId, &NeuronDescriptors> = cal.iter().map(|c| (c.neuron, c)).collect();
    let evaluated: Vec<(&NeuronDescriptors, BTreeSet<&str>)> = truth
        .0
        .iter()
        .map(|(n, labels)| {
            by_id
                .get(n)
                .map(|nd| (*nd, labels.iter().map(String::as_str).collect()))
                .ok_or(EvalError::MissingNeuron(*n, "calibration attribution"))
        })
        .collect::<Result<_, _>>()?;

    let curves = parallel::map(par, &cfg.t_grid, |&t| {
        let prs: Vec<PrecisionRecall> = evaluated
            .iter()
            .map(|(nd, truth)| precision_recall(&nd.assigned_at(t), truth))
            .collect();
        PrCurvePoint {
            t,
            precision: MeanStd::of(prs.iter().map(|p| p.precision)),
            recall: MeanStd::of(prs.iter().map(|p| p.recall)),
        }
    });

    let cut = match cfg.truth_top {
        Some(n) => truth.truncated(n),
        None => truth.clone(),
    };
    let mut at_k = Vec::with_capacity(cfg.k_list.len());
    for &k in &cfg.k_list {
        let scores = evaluated
            .iter()
            .map(|(nd, _)| {
                let t = cut.labels(nd.neuron).unwrap_or_default();
                precision_recall_at_k(&nd.top_k(k), &t, k)
            })
            .collect::<Result<Vec<_>, _>>()?;
        at_k.push(AtKPoint {
            k,
            precision: MeanStd::of(scores.iter().map(|s| Some(s.precision))),
            recall: MeanStd::of(scores.iter().map(|s| s.recall)),
        });
    }
    Ok((curves, at_k))
}

pub fn build_report(
    inputs: &EvalInputs<'_>,
    cfg: &EvalConfig,
    par: Parallelism,
) -> Result<EvalReport, EvalError> {
    let (pr_curves, pr_at_k) = match inputs.truth {
        Some(truth) => truth_metrics(inputs.calibration, truth, cfg, par)?,
        None => (Vec::new(), Vec::new()),
    };
    let (neuron_jaccard, descriptor_jaccard) = match inputs.validation {
        Some(val) => {
            let labels = cfg.labels.clone().unwrap_or_else(|| {
                inputs
                    .calibration
                    .iter()
                    .chain(val)
                    .flat_map(|nd| nd.ranked.iter().map(|(l, _)| l.clone()))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            });
            (
                consistency_curve(inputs.calibration, val, &cfg.t_grid, par)?,
                descriptor_consistency_curve(inputs.calibration, val, &labels, &cfg.t_grid, par)?,
            )
        }
        None => (Vec::new(), Vec::new()),
    };
    let correlation = inputs.matrix.map(|m| phi_correlation(m, par));
    let kappa = match inputs.annotations {
        Some((reference, other)) => {
            let agreement = compare_annotations(other, reference)?;
            Some(KappaSection {
                value: agreement.kappa,
                agreement,
            })
        }
        None => None,
    };
    Ok(EvalReport {
        pr_curves,
        pr_at_k,
        neuron_jaccard,
        descriptor_jaccard,
        correlation,
        kappa,
    })
}
