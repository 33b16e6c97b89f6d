//! Natural-language descriptors for individual neurons of a text encoder.
//!
//! The pipeline mines candidate descriptors from a sentence corpus with
//! generative LLMs, clusters them into a compact descriptor set, annotates
//! every sentence against that set, and then assigns descriptors to neurons
//! from the sentences that activate them most strongly. The [`evaluation`]
//! module holds the metrics used to judge the result.
//!
//! Everything that talks to a model goes through [`gateway`], which has a
//! deterministic replay mode so the whole pipeline can run offline against
//! recorded responses. [`synthkit`] produces planted-truth fixtures for the
//! same purpose.

pub mod annotation;
pub mod attribution;
mod binio;
pub mod corpus;
pub mod descriptors;
pub mod evaluation;
pub mod gateway;
pub mod parallel;
pub mod rng;
pub mod store;
pub mod synthkit;

pub use annotation::{Answer, BinaryMatrix};
pub use attribution::{DescriptorFrequencies, ExemplarSet, InverseMap, NeuronDescriptors};
pub use corpus::{Corpus, Sentence, Split};
pub use descriptors::{DescriptorSet, EmbeddingTable, PromptTemplate};
pub use gateway::{Gateway, GatewayConfig, LlmRequest, LlmResponse};
pub use parallel::Parallelism;
pub use store::{ActivationStore, NeuronId};

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// renaming it into place once fully written.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => std::path::Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
