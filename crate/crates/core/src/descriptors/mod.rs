//! Descriptor mining: candidate generation through an LLM, normalization,
//! greedy cosine community detection over descriptor embeddings, manual
//! representative labels, and the final blacklist.

mod cluster;
mod embedding;
mod generate;
mod labels;
mod parse;
mod prompt;

pub use cluster::{cluster_descriptors, ClusterParams, DescriptorCluster};
pub use embedding::{read_embeddings, write_embeddings, EmbeddingTable, NEMB_MAGIC, NEMB_VERSION};
pub use generate::{
    generate_candidates, read_candidates, unique_surfaces, write_candidates, CandidateFailure,
    CandidateRun, DescriptorCandidate, GenerateOptions,
};
pub use labels::{
    apply_blacklist, assign_representatives, DescriptorSet, LabelMap, Labeling, AMZN_DESCRIPTORS,
    DEFAULT_BLACKLIST,
};
pub use parse::{join_descriptor_list, normalize_surface, parse_descriptor_list, ParsedList};
pub use prompt::{
    OneShotExample, PromptTemplate, DEFAULT_P1_TEMPLATE, DEFAULT_P2_TEMPLATE, DESCRIPTOR_MARKER,
    EXAMPLE_MARKER, INPUT_MARKER,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("template error: {0}")]
    Template(String),
    #[error("no embedding for surface {0:?}")]
    MissingEmbedding(String),
    #[error("invalid embedding table: {0}")]
    InvalidEmbedding(String),
    #[error("bad NEMB file: {0}")]
    Format(String),
    #[error("cluster {index} has no label (members: {members:?})")]
    UnlabeledCluster { index: usize, members: Vec<String> },
    #[error("cluster {index} members map to conflicting labels {labels:?}")]
    ConflictingLabels { index: usize, labels: Vec<String> },
    #[error("duplicate descriptor label {0:?}")]
    DuplicateLabel(String),
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty corpus")]
    EmptyCorpus,
}

pub(crate) fn io_err(
    path: &std::path::Path,
) -> impl FnOnce(std::io::Error) -> DescriptorError + '_ {
    move |source| DescriptorError::Io {
        path: path.display().to_string(),
        source,
    }
}
