//! Planted-truth fixtures.
//!
//! Each neuron is given one planted descriptor and fires (by
//! `signal_strength`, plus Gaussian noise) on sentences carrying it. The
//! outputs use the same file formats as the real pipeline, and
//! [`write_all`] can also emit replay fixtures, embeddings and a label map
//! so every stage can run offline against the synthetic corpus. Sentence
//! texts are numbered so that no two share a prompt, and hence a fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{write_matrix, AnnotateOptions, AnnotationError, BinaryMatrix};
use crate::attribution::{AttributionError, NeuronDescriptors};
use crate::corpus::{split_corpus, Corpus, CorpusError, Sentence, Split};
use crate::descriptors::{
    join_descriptor_list, write_embeddings, DescriptorError, DescriptorSet, EmbeddingTable,
    GenerateOptions, LabelMap, PromptTemplate,
};
use crate::evaluation::GroundTruth;
use crate::gateway::{write_entry, CacheEntry, GatewayError, LlmRequest};
use crate::rng::SplitMix64;
use crate::store::{write_store, ActivationStore, NeuronId, StoreError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_sentences: usize,
    pub n_descriptors: usize,
    pub layers: u32,
    pub neurons_per_layer: u32,
    /// Descriptor index per neuron (ordinal order). Drawn uniformly if absent.
    pub planted: Option<Vec<usize>>,
    pub signal_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Probability that a sentence carries a given descriptor.
    pub descriptor_rate: f64,
    /// At most one descriptor per sentence; it is present with probability
    /// `min(1, descriptor_rate * n_descriptors)`.
    pub exclusive: bool,
    /// Probability that an annotation cell is left unresolved.
    pub unresolved_rate: f64,
    /// Surface spellings per descriptor used in sentences and fixtures.
    pub surface_variants: usize,
    /// Model id recorded in the replay fixtures.
    pub llm_model: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_sentences: 2000,
            n_descriptors: 8,
            layers: 2,
            neurons_per_layer: 32,
            planted: None,
            signal_strength: 3.0,
            noise_std: 1.0,
            seed: 0,
            descriptor_rate: 0.05,
            exclusive: false,
            unresolved_rate: 0.0,
            surface_variants: 10,
            llm_model: "synth-llm".to_string(),
        }
    }
}

impl SynthSpec {
    pub fn neuron_count(&self) -> usize {
        self.layers as usize * self.neurons_per_layer as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_sentences == 0 {
            return bad("n_sentences must be positive");
        }
        if self.n_descriptors == 0 {
            return bad("n_descriptors must be positive");
        }
        if self.layers == 0 || self.neurons_per_layer == 0 {
            return bad("neuron grid must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.descriptor_rate) {
            return bad("descriptor_rate must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.unresolved_rate) {
            return bad("unresolved_rate must be in [0, 1]");
        }
        if !self.signal_strength.is_finite() || !self.noise_std.is_finite() || self.noise_std < 0.0
        {
            return bad("signal_strength must be finite and noise_std finite and non-negative");
        }
        if self.surface_variants == 0 || self.surface_variants > VARIANTS.len() {
            return Err(SynthError::InvalidSpec(format!(
                "surface_variants must be in 1..={}",
                VARIANTS.len()
            )));
        }
        if let Some(p) = &self.planted {
            if p.len() != self.neuron_count() {
                return Err(SynthError::InvalidSpec(format!(
                    "planted has {} entries for {} neurons",
                    p.len(),
                    self.neuron_count()
                )));
            }
            if let Some(bad_idx) = p.iter().find(|&&d| d >= self.n_descriptors) {
                return Err(SynthError::InvalidSpec(format!(
                    "planted descriptor {bad_idx} out of range"
                )));
            }
        }
        Ok(())
    }
}

const NAMES: [&str; 16] = [
    "Color",
    "Price",
    "Size",
    "Taste",
    "Smell",
    "Shipping",
    "Durability",
    "Comfort",
    "Noise",
    "Battery",
    "Packaging",
    "Texture",
    "Weight",
    "Brightness",
    "Sound",
    "Warranty",
];

const VARIANTS: [&str; 10] = [
    "{}",
    "{} quality",
    "the {}",
    "{} issues",
    "good {}",
    "bad {}",
    "{} overall",
    "great {}",
    "poor {}",
    "{} level",
];

pub fn descriptor_name(i: usize) -> String {
    match NAMES.get(i) {
        Some(n) => n.to_string(),
        None => format!("Aspect {i}"),
    }
}

/// Lowercase surface spelling `variant` of descriptor `i`.
pub fn surface(i: usize, variant: usize) -> String {
    VARIANTS[variant].replace("{}", &descriptor_name(i).to_lowercase())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: Corpus,
    pub descriptors: DescriptorSet,
    pub matrix: BinaryMatrix,
    pub calibration: ActivationStore,
    pub validation: ActivationStore,
    pub truth: GroundTruth,
    /// Descriptor index per neuron, ordinal order.
    pub planted: Vec<usize>,
    /// `(descriptor, variant)` mentioned by each sentence, corpus order.
    pub mentions: Vec<Vec<(usize, usize)>>,
}

/// Pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let nd = spec.n_descriptors;
    let labels: Vec<String> = (0..nd).map(descriptor_name).collect();
    let ids: Vec<String> = (0..spec.n_sentences)
        .map(|i| format!("syn-{i:06}"))
        .collect();

    let mut matrix = BinaryMatrix::zeros(ids.clone(), labels.clone())?;
    let mut mentions = Vec::with_capacity(spec.n_sentences);
    let mut sentences = Vec::with_capacity(spec.n_sentences);
    for (r, id) in ids.iter().enumerate() {
        let carried: Vec<usize> = if spec.exclusive {
            let p = (spec.descriptor_rate * nd as f64).min(1.0);
            if rng.bernoulli(p) {
                vec![rng.below(nd as u64) as usize]
            } else {
                Vec::new()
            }
        } else {
            (0..nd)
                .filter(|_| rng.bernoulli(spec.descriptor_rate))
                .collect()
        };
        let mut m = Vec::with_capacity(carried.len());
        for &d in &carried {
            matrix.set(r, d, true);
            m.push((d, rng.below(spec.surface_variants as u64) as usize));
        }
        let text = if m.is_empty() {
            format!("review {r} mentioning nothing in particular")
        } else {
            let parts: Vec<String> = m.iter().map(|&(d, v)| surface(d, v)).collect();
            format!("review {r} mentioning {}", parts.join(" and "))
        };
        sentences.push(Sentence::new(id.clone(), text));
        mentions.push(m);
    }
    if spec.unresolved_rate > 0.0 {
        for r in 0..spec.n_sentences {
            for c in 0..nd {
                if rng.bernoulli(spec.unresolved_rate) {
                    matrix.set_unresolved(r, c);
                }
            }
        }
    }

    let planted = match &spec.planted {
        Some(p) => p.clone(),
        None => (0..spec.neuron_count())
            .map(|_| rng.below(nd as u64) as usize)
            .collect(),
    };

    let mut corpus = Corpus::from_sentences(sentences)?;
    corpus.provenance.source = Some(format!("synthkit(seed={})", spec.seed));
    let corpus = split_corpus(&corpus, rng.next_u64())?;

    let truth = GroundTruth(
        planted
            .iter()
            .enumerate()
            .map(|(o, &d)| {
                (
                    NeuronId::from_ordinal(o, spec.neurons_per_layer),
                    vec![labels[d].clone()],
                )
            })
            .collect(),
    );
    let calibration = draw_store(
        spec,
        &corpus,
        &mentions,
        &planted,
        Split::Calibration,
        &mut rng,
    )?;
    let validation = draw_store(
        spec,
        &corpus,
        &mentions,
        &planted,
        Split::Validation,
        &mut rng,
    )?;

    Ok(SynthData {
        descriptors: DescriptorSet::new(labels)?,
        corpus,
        matrix,
        calibration,
        validation,
        truth,
        planted,
        mentions,
    })
}

/// Activations come from the planted bit itself, not the (possibly
/// unresolved) annotation.
fn draw_store(
    spec: &SynthSpec,
    corpus: &Corpus,
    mentions: &[Vec<(usize, usize)>],
    planted: &[usize],
    split: Split,
    rng: &mut SplitMix64,
) -> Result<ActivationStore, SynthError> {
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (r, s) in corpus.sentences.iter().enumerate() {
        if corpus.split_of(&s.id) != Some(split) {
            continue;
        }
        ids.push(s.id.clone());
        for &d in planted {
            let on = mentions[r].iter().any(|&(m, _)| m == d);
            let signal = if on { spec.signal_strength } else { 0.0 };
            values.push((signal + spec.noise_std * rng.gaussian()) as f32);
        }
    }
    Ok(ActivationStore::new(
        "synthkit",
        spec.layers,
        spec.neurons_per_layer,
        ids,
        values,
    )?)
}

/// Unit vectors: descriptor `i` points along axis `i`, with a small
/// per-variant offset on an extra axis, so spellings of one descriptor
/// have cosine above 0.9 and different descriptors stay below 0.1.
pub fn embeddings(spec: &SynthSpec) -> Result<EmbeddingTable, SynthError> {
    let dim = spec.n_descriptors + spec.surface_variants;
    let mut rows = Vec::new();
    for d in 0..spec.n_descriptors {
        for v in 0..spec.surface_variants {
            let mut x = vec![0f32; dim];
            x[d] = 1.0;
            x[spec.n_descriptors + v] = 0.3;
            rows.push((surface(d, v), x));
        }
    }
    Ok(EmbeddingTable::from_raw(dim as u32, rows)?)
}

/// Every surface spelling mapped to its descriptor label.
pub fn label_map(spec: &SynthSpec) -> LabelMap {
    let mut m = BTreeMap::new();
    for d in 0..spec.n_descriptors {
        for v in 0..spec.surface_variants {
            m.insert(surface(d, v), descriptor_name(d));
        }
    }
    LabelMap(m)
}

/// Writes replay fixtures answering the default descriptor-generation and
/// annotation prompts for this corpus. Returns the number of entries.
pub fn write_fixtures(spec: &SynthSpec, data: &SynthData, dir: &Path) -> Result<usize, SynthError> {
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let p1 = PromptTemplate::default_p1();
    let p2 = PromptTemplate::default_p2();
    let gen_tokens = GenerateOptions::default().max_output_tokens;
    let ann_tokens = AnnotateOptions::default().max_output_tokens;
    let mut n = 0;
    let mut put = |req: LlmRequest, text: String| -> Result<(), SynthError> {
        write_entry(dir, &req.cache_key(), &CacheEntry::for_request(&req, text))?;
        n += 1;
        Ok(())
    };
    for (r, s) in data.corpus.sentences.iter().enumerate() {
        let surfaces: Vec<String> = data.mentions[r]
            .iter()
            .map(|&(d, v)| surface(d, v))
            .collect();
        let prompt = p1.render_p1(s)?;
        put(
            LlmRequest::new(&spec.llm_model, prompt).with_max_output_tokens(gen_tokens),
            join_descriptor_list(&surfaces),
        )?;
        for (c, label) in data.descriptors.descriptors.iter().enumerate() {
            let prompt = p2.render_p2(label, s)?;
            let answer = if data.matrix.is_unresolved(r, c) {
                "Unclear"
            } else if data.matrix.get(r, c) {
                "Yes"
            } else {
                "No"
            };
            put(
                LlmRequest::new(&spec.llm_model, prompt).with_max_output_tokens(ann_tokens),
                answer.to_string(),
            )?;
        }
    }
    Ok(n)
}

fn write_text(path: &Path, text: &str) -> Result<(), SynthError> {
    crate::write_atomic(path, text.as_bytes()).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the synthetic artifacts into `dir` and returns their paths:
/// `spec.json`, `corpus.jsonl`, `descriptors.json`, `matrix.nbin`,
/// `cal.nact`, `val.nact`, `truth.json`; with `fixtures` also
/// `embeddings.nemb`, `label_map.json` and the `fixtures/` directory.
pub fn write_all(
    spec: &SynthSpec,
    data: &SynthData,
    dir: &Path,
    fixtures: bool,
) -> Result<Vec<PathBuf>, SynthError> {
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let p = |name: &str| dir.join(name);
    let mut out = Vec::new();

    let mut spec_json = serde_json::to_string_pretty(spec).expect("spec serializes");
    spec_json.push('\n');
    write_text(&p("spec.json"), &spec_json)?;
    out.push(p("spec.json"));
    data.corpus.write_jsonl(&p("corpus.jsonl"))?;
    out.push(p("corpus.jsonl"));
    write_text(&p("descriptors.json"), &data.descriptors.to_json())?;
    out.push(p("descriptors.json"));
    write_matrix(&data.matrix, &p("matrix.nbin"))?;
    out.push(p("matrix.nbin"));
    write_store(&data.calibration, &p("cal.nact"))?;
    out.push(p("cal.nact"));
    write_store(&data.validation, &p("val.nact"))?;
    out.push(p("val.nact"));
    write_text(&p("truth.json"), &data.truth.to_json())?;
    out.push(p("truth.json"));

    if fixtures {
        write_embeddings(&embeddings(spec)?, &p("embeddings.nemb"))?;
        out.push(p("embeddings.nemb"));
        let mut lm = serde_json::to_string_pretty(&label_map(spec)).expect("label map serializes");
        lm.push('\n');
        write_text(&p("label_map.json"), &lm)?;
        out.push(p("label_map.json"));
        write_fixtures(spec, data, &p("fixtures"))?;
        out.push(p("fixtures"));
    }
    Ok(out)
}

fn oracle_size(n: usize, k_percent: f64) -> usize {
    // Rounded to nine decimals before the ceiling to absorb binary
    // representation error in k_percent.
    let x = ((k_percent * n as f64 / 100.0) * 1e9).round() / 1e9;
    (x.ceil() as usize).min(n)
}

/// Brute-force attribution for every neuron of `store`: full sort of each
/// column, linear-scan lookups, direct counting. Unresolved cells count as
/// "no". Used as a test reference.
pub fn oracle_attribution(
    matrix: &BinaryMatrix,
    store: &ActivationStore,
    k_percent: f64,
    t: f64,
) -> Result<Vec<NeuronDescriptors>, AttributionError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(AttributionError::InvalidKPercent(k_percent));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(AttributionError::InvalidThreshold(t));
    }
    if store.is_empty() {
        return Err(AttributionError::EmptyStore);
    }
    let width = store.width();
    let n = store.len();
    let size = oracle_size(n, k_percent);
    let mut out = Vec::with_capacity(width);
    for o in 0..width {
        let mut order: Vec<(f32, usize)> = (0..n).map(|r| (store.row(r)[o], r)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let exemplar = &order[..size];

        let mut yes = vec![0usize; matrix.cols()];
        for &(_, r) in exemplar {
            let id = &store.sentence_ids()[r];
            let mr = matrix
                .sentence_ids()
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| AttributionError::MissingSentence(id.clone()))?;
            for (c, y) in yes.iter_mut().enumerate() {
                if matrix.get(mr, c) {
                    *y += 1;
                }
            }
        }
        let mut ranked: Vec<(String, f64)> = matrix
            .descriptors()
            .iter()
            .zip(&yes)
            .filter(|(_, &y)| y > 0)
            .map(|(label, &y)| (label.clone(), y as f64 / size as f64))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let assigned = ranked
            .iter()
            .filter(|(_, f)| *f > t)
            .map(|(l, _)| l.clone())
            .collect();
        out.push(NeuronDescriptors {
            neuron: NeuronId::from_ordinal(o, store.neurons_per_layer()),
            threshold: t,
            assigned,
            ranked,
        });
    }
    Ok(out)
}
