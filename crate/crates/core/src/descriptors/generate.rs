use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, parse_descriptor_list, DescriptorError, PromptTemplate};
use crate::corpus::Corpus;
use crate::gateway::{Gateway, LlmRequest};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DescriptorCandidate {
    pub surface: String,
    pub source_model: String,
    pub source_sentence_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub sentence_id: String,
    pub model_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateRun {
    pub candidates: Vec<DescriptorCandidate>,
    pub failures: Vec<CandidateFailure>,
    /// Responses that parsed to nothing (or oddly), with their warning.
    pub parse_warnings: Vec<CandidateFailure>,
    pub requests: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_output_tokens: u32,
    pub max_in_flight: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_output_tokens: 64,
            max_in_flight: 4,
        }
    }
}

/// One request per sentence and model. The result is the union of parsed
/// surfaces, one record per (surface, model, sentence). Gateway failures are
/// collected rather than aborting the run.
pub fn generate_candidates(
    gateway: &Gateway,
    corpus: &Corpus,
    templates: &[(String, PromptTemplate)],
    opts: GenerateOptions,
) -> Result<CandidateRun, DescriptorError> {
    if corpus.is_empty() {
        return Err(DescriptorError::EmptyCorpus);
    }
    let mut keys = Vec::with_capacity(corpus.len() * templates.len());
    let mut reqs = Vec::with_capacity(keys.capacity());
    for s in &corpus.sentences {
        for (model, template) in templates {
            let prompt = template.render_p1(s)?;
            reqs.push(
                LlmRequest::new(model.clone(), prompt)
                    .with_max_output_tokens(opts.max_output_tokens),
            );
            keys.push((s.id.as_str(), model.as_str()));
        }
    }
    let responses = gateway.request_batch(&reqs, opts.max_in_flight);

    let mut run = CandidateRun {
        requests: reqs.len(),
        ..CandidateRun::default()
    };
    for ((sentence_id, model), resp) in keys.into_iter().zip(responses) {
        let failure = |message: String| CandidateFailure {
            sentence_id: sentence_id.to_string(),
            model_id: model.to_string(),
            message,
        };
        match resp {
            Ok(r) => {
                let parsed = parse_descriptor_list(&r.text);
                if let Some(w) = parsed.warning {
                    run.parse_warnings.push(failure(w));
                }
                for surface in parsed.surfaces {
                    run.candidates.push(DescriptorCandidate {
                        surface,
                        source_model: model.to_string(),
                        source_sentence_id: sentence_id.to_string(),
                    });
                }
            }
            Err(e) => run.failures.push(failure(e.to_string())),
        }
    }
    Ok(run)
}

/// Distinct surfaces, sorted.
pub fn unique_surfaces(candidates: &[DescriptorCandidate]) -> Vec<String> {
    candidates
        .iter()
        .map(|c| c.surface.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn write_candidates(
    candidates: &[DescriptorCandidate],
    path: &Path,
) -> Result<(), DescriptorError> {
    let mut out = String::new();
    for c in candidates {
        out.push_str(&serde_json::to_string(c).expect("candidate serializes"));
        out.push('\n');
    }
    crate::write_atomic(path, out.as_bytes()).map_err(io_err(path))
}

pub fn read_candidates(path: &Path) -> Result<Vec<DescriptorCandidate>, DescriptorError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: DescriptorCandidate =
            serde_json::from_str(&line).map_err(|e| DescriptorError::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })?;
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    Ok(out)
}
