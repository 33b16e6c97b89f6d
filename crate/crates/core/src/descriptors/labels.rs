use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DescriptorCluster, DescriptorError};

/// The 26 representative descriptors mined from the Amazon review corpus.
pub const AMZN_DESCRIPTORS: [&str; 26] = [
    "Age Appropriate / For Kids",
    "Audio / Sound",
    "Battery / Charging",
    "Beverage",
    "Cleaning / Maintenance",
    "Color",
    "Controls",
    "Design / Looks / Appearance",
    "Durability",
    "Fabric",
    "Gift / Present",
    "Graphics",
    "Grip",
    "Healthy / Fresh",
    "Negative",
    "Packaging / Shipping / Delivery",
    "Positive",
    "Price",
    "Product Quality",
    "Protection / Safety",
    "Size / Fit",
    "Skincare / Haircare",
    "Smell / Fragrance / Odor",
    "Taste / Flavor",
    "Texture",
    "User Experience",
];

/// Descriptors too broad to be informative about individual neurons.
pub const DEFAULT_BLACKLIST: [&str; 3] = ["Positive", "Product Quality", "User Experience"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub descriptors: Vec<String>,
    #[serde(default)]
    pub blacklist_applied: Vec<String>,
}

impl DescriptorSet {
    pub fn new(descriptors: Vec<String>) -> Result<Self, DescriptorError> {
        let mut seen = HashSet::new();
        for d in &descriptors {
            if !seen.insert(d.as_str()) {
                return Err(DescriptorError::DuplicateLabel(d.clone()));
            }
        }
        Ok(Self {
            descriptors,
            blacklist_applied: Vec::new(),
        })
    }

    pub fn amzn() -> Self {
        Self::new(AMZN_DESCRIPTORS.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn read_json(path: &Path) -> Result<Self, DescriptorError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let set: DescriptorSet =
            serde_json::from_str(&text).map_err(|e| DescriptorError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let checked = Self::new(set.descriptors)?;
        Ok(Self {
            blacklist_applied: set.blacklist_applied,
            ..checked
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("set serializes");
        s.push('\n');
        s
    }
}

/// `{cluster_key: label}` where a key is either a cluster index (as a
/// string) or any member surface of the cluster. Index keys win.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap(pub BTreeMap<String, String>);

impl LabelMap {
    pub fn read_json(path: &Path) -> Result<Self, DescriptorError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DescriptorError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn label_for(
        &self,
        index: usize,
        cluster: &DescriptorCluster,
    ) -> Result<Option<String>, DescriptorError> {
        if let Some(l) = self.0.get(&index.to_string()) {
            return Ok(Some(l.clone()));
        }
        let labels: Vec<&String> = cluster
            .members
            .iter()
            .filter_map(|m| self.0.get(m))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        match labels.as_slice() {
            [] => Ok(None),
            [one] => Ok(Some((*one).clone())),
            many => Err(DescriptorError::ConflictingLabels {
                index,
                labels: many.iter().map(|s| s.to_string()).collect(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub set: DescriptorSet,
    /// Surfaces behind each label, merged across clusters sharing it.
    pub members: BTreeMap<String, Vec<String>>,
    /// Residual surfaces dropped for lack of a label.
    pub dropped_residuals: Vec<String>,
    pub clusters: Vec<DescriptorCluster>,
}

/// Applies manual labels. Clusters sharing a label merge into one
/// descriptor (ordered by first appearance); unlabeled residual singletons
/// are dropped and reported.
pub fn assign_representatives(
    clusters: &[DescriptorCluster],
    labels: &LabelMap,
) -> Result<Labeling, DescriptorError> {
    let mut order = Vec::new();
    let mut members: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut dropped = Vec::new();
    let mut labeled = Vec::with_capacity(clusters.len());

    for (i, c) in clusters.iter().enumerate() {
        let label = match labels.label_for(i, c)? {
            Some(l) => l,
            None if c.residual => {
                dropped.extend(c.members.iter().cloned());
                continue;
            }
            None => {
                return Err(DescriptorError::UnlabeledCluster {
                    index: i,
                    members: c.members.clone(),
                })
            }
        };
        let entry = members.entry(label.clone()).or_default();
        if entry.is_empty() {
            order.push(label.clone());
        }
        entry.extend(c.members.iter().cloned());
        let mut c = c.clone();
        c.representative = Some(label);
        labeled.push(c);
    }
    for v in members.values_mut() {
        v.sort();
        v.dedup();
    }
    Ok(Labeling {
        set: DescriptorSet::new(order)?,
        members,
        dropped_residuals: dropped,
        clusters: labeled,
    })
}

/// Removes blacklisted labels. Returns the filtered set and a warning for
/// each blacklist entry that was not present.
pub fn apply_blacklist(set: &DescriptorSet, blacklist: &[String]) -> (DescriptorSet, Vec<String>) {
    let banned: HashSet<&str> = blacklist.iter().map(String::as_str).collect();
    let present: HashSet<&str> = set.descriptors.iter().map(String::as_str).collect();
    let mut out = set.clone();
    out.descriptors.retain(|d| !banned.contains(d.as_str()));
    let mut warnings = Vec::new();
    for b in blacklist {
        if present.contains(b.as_str()) {
            if !out.blacklist_applied.contains(b) {
                out.blacklist_applied.push(b.clone());
            }
        } else {
            warnings.push(format!("blacklisted descriptor {b:?} not in set"));
        }
    }
    (out, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(members: &[&str], residual: bool) -> DescriptorCluster {
        DescriptorCluster {
            seed: members[0].to_string(),
            members: members.iter().map(|s| s.to_string()).collect(),
            residual,
            representative: None,
        }
    }

    fn map(pairs: &[(&str, &str)]) -> LabelMap {
        LabelMap(
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn color_cluster_by_surface_key() {
        let c = vec![cluster(&["blue", "hue", "pink color"], false)];
        let l = assign_representatives(&c, &map(&[("hue", "Color")])).unwrap();
        assert_eq!(l.set.descriptors, ["Color"]);
        assert_eq!(l.clusters[0].representative.as_deref(), Some("Color"));
    }

    #[test]
    fn shared_label_merges() {
        let c = vec![
            cluster(&["stench", "bad scent"], false),
            cluster(&["price"], false),
            cluster(&["pleasant aroma", "nice smelling"], false),
        ];
        let m = map(&[
            ("0", "Smell/Fragrance/Odor"),
            ("1", "Price"),
            ("2", "Smell/Fragrance/Odor"),
        ]);
        let l = assign_representatives(&c, &m).unwrap();
        assert_eq!(l.set.descriptors, ["Smell/Fragrance/Odor", "Price"]);
        assert_eq!(l.members["Smell/Fragrance/Odor"].len(), 4);
    }

    #[test]
    fn missing_label_errors() {
        let c = vec![cluster(&["a", "b", "c", "d", "e"], false)];
        match assign_representatives(&c, &LabelMap::default()) {
            Err(DescriptorError::UnlabeledCluster { members, .. }) => assert_eq!(members.len(), 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conflicting_member_labels() {
        let c = vec![cluster(&["a", "b"], false)];
        assert!(matches!(
            assign_representatives(&c, &map(&[("a", "X"), ("b", "Y")])),
            Err(DescriptorError::ConflictingLabels { .. })
        ));
    }

    #[test]
    fn residuals_dropped_unless_labeled() {
        let c = vec![
            cluster(&["a", "b"], false),
            cluster(&["lonely"], true),
            cluster(&["kept"], true),
        ];
        let l = assign_representatives(&c, &map(&[("0", "A"), ("kept", "K")])).unwrap();
        assert_eq!(l.set.descriptors, ["A", "K"]);
        assert_eq!(l.dropped_residuals, ["lonely"]);
    }

    #[test]
    fn blacklist_26_to_23() {
        let set = DescriptorSet::amzn();
        assert_eq!(set.len(), 26);
        let bl = strings(&DEFAULT_BLACKLIST);
        let (out, warnings) = apply_blacklist(&set, &bl);
        assert_eq!(out.len(), 23);
        assert!(warnings.is_empty());
        assert_eq!(out.blacklist_applied, bl);
        for b in DEFAULT_BLACKLIST {
            assert!(!out.descriptors.iter().any(|d| d == b));
        }
        let (twice, w2) = apply_blacklist(&out, &bl);
        assert_eq!(twice, out);
        assert_eq!(w2.len(), 3);
    }

    #[test]
    fn blacklist_identity_and_unknown() {
        let set = DescriptorSet::amzn();
        assert_eq!(apply_blacklist(&set, &[]).0, set);
        let (out, w) = apply_blacklist(&set, &strings(&["Nonexistent"]));
        assert_eq!(out, set);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(DescriptorSet::new(strings(&["A", "A"])).is_err());
    }
}
