//! Greedy community detection over descriptor embeddings.
//!
//! Every surface's neighbourhood is the set of surfaces whose cosine
//! similarity to it is at least `threshold` (a surface is always its own
//! neighbour). Surfaces whose neighbourhood has at least
//! `min_community_size` members become seeds, visited by neighbourhood size
//! (largest first, then lexicographically). A seed that has not yet been
//! claimed forms a community from its still-unclaimed neighbours if there
//! are at least `min_community_size` of them. Whatever is never claimed is
//! returned as residual singletons.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DescriptorError, EmbeddingTable};
use crate::parallel::{self, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub threshold: f32,
    pub min_community_size: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            threshold: 0.75,
            min_community_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorCluster {
    pub seed: String,
    /// Sorted; includes the seed.
    pub members: Vec<String>,
    pub residual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative: Option<String>,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn cluster_descriptors(
    surfaces: &[String],
    table: &EmbeddingTable,
    params: ClusterParams,
    par: Parallelism,
) -> Result<Vec<DescriptorCluster>, DescriptorError> {
    if !(params.threshold > 0.0 && params.threshold <= 1.0) {
        return Err(DescriptorError::InvalidParams(format!(
            "threshold {} not in (0, 1]",
            params.threshold
        )));
    }
    if params.min_community_size == 0 {
        return Err(DescriptorError::InvalidParams(
            "min_community_size must be at least 1".into(),
        ));
    }

    let names: Vec<&str> = surfaces
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let vectors = names
        .iter()
        .map(|s| {
            table
                .get(s)
                .ok_or_else(|| DescriptorError::MissingEmbedding(s.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let threshold = params.threshold as f64;
    let neighbourhoods: Vec<Vec<usize>> = parallel::map_range(par, names.len(), |i| {
        (0..names.len())
            .filter(|&j| j == i || dot(vectors[i], vectors[j]) >= threshold)
            .collect()
    });

    let mut seeds: Vec<usize> = (0..names.len())
        .filter(|&i| neighbourhoods[i].len() >= params.min_community_size)
        .collect();
    // names are sorted, so index order is lexicographic order
    seeds.sort_by_key(|&i| (std::cmp::Reverse(neighbourhoods[i].len()), i));

    let mut claimed = vec![false; names.len()];
    let mut clusters = Vec::new();
    for seed in seeds {
        if claimed[seed] {
            continue;
        }
        let free: Vec<usize> = neighbourhoods[seed]
            .iter()
            .copied()
            .filter(|&j| !claimed[j])
            .collect();
        if free.len() < params.min_community_size {
            continue;
        }
        for &j in &free {
            claimed[j] = true;
        }
        clusters.push(DescriptorCluster {
            seed: names[seed].to_string(),
            members: free.iter().map(|&j| names[j].to_string()).collect(),
            residual: false,
            representative: None,
        });
    }
    for (i, name) in names.iter().enumerate() {
        if !claimed[i] {
            clusters.push(DescriptorCluster {
                seed: name.to_string(),
                members: vec![name.to_string()],
                residual: true,
                representative: None,
            });
        }
    }
    Ok(clusters)
}
