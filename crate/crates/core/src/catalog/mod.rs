//! Attribute catalogs and their base/novel splits.
//!
//! Raw dataset attribute names are verbalized through a reviewed lookup table,
//! embedded as phrases, grouped by agglomerative clustering and then split
//! cluster by cluster into base (trained) and novel (held-out) attributes.

mod cluster;
mod embed;
mod split;

pub use cluster::{cluster_attributes, ClusterAssignment, Linkage};
pub(crate) use embed::fnv1a;
pub use embed::{embed_phrases, HashNgramEmbedder, PhraseEmbedder, PrecomputedEmbedder};
pub use split::{partition_clusters, AttributeSplit, NovelFraction, SplitManifest};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OaprError, Result};

/// Marker in the second column of a verbalization table that removes an attribute.
pub const DROP_MARKER: &str = "DROP";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub raw_name: String,
    pub phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_hint: Option<String>,
    pub body_parts: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCatalog {
    pub dataset_name: String,
    pub records: Vec<AttributeRecord>,
    pub filtered_out: Vec<String>,
}

impl AttributeCatalog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, raw_name: &str) -> Option<&AttributeRecord> {
        self.records
            .binary_search_by(|r| r.raw_name.as_str().cmp(raw_name))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn position(&self, raw_name: &str) -> Option<usize> {
        self.records
            .binary_search_by(|r| r.raw_name.as_str().cmp(raw_name))
            .ok()
    }

    pub fn raw_names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.raw_name.as_str())
    }

    /// Fails when any body-part index falls outside `[0, n_parts)`.
    pub fn check_body_parts(&self, n_parts: usize) -> Result<()> {
        for r in &self.records {
            if r.body_parts.is_empty() || r.body_parts.iter().any(|&p| p >= n_parts) {
                return Err(OaprError::InvalidArgument(format!(
                    "attribute `{}` has body parts {:?}, expected non-empty indices below {n_parts}",
                    r.raw_name, r.body_parts
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verbalization {
    Phrase {
        phrase: String,
        body_parts: BTreeSet<usize>,
    },
    Drop,
}

/// Raw attribute name → phrase (or drop) with its body parts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerbalizationTable {
    rules: BTreeMap<String, Verbalization>,
}

impl VerbalizationTable {
    /// Parses `raw_name<TAB>phrase_or_DROP<TAB>body-part-ids` lines.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| OaprError::RulesParse {
                line: line_no,
                message,
            };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let raw = fields[0].trim();
            if raw.is_empty() {
                return Err(err("empty raw name".into()));
            }
            let phrase = fields[1].trim();
            let entry = if phrase == DROP_MARKER {
                Verbalization::Drop
            } else {
                let parts_field = fields.get(2).copied().unwrap_or("").trim();
                let body_parts = parts_field
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| err(format!("bad body-part id `{s}`")))
                    })
                    .collect::<Result<BTreeSet<_>>>()?;
                if body_parts.is_empty() && !phrase.is_empty() {
                    return Err(err(format!("`{raw}` has no body parts")));
                }
                Verbalization::Phrase {
                    phrase: phrase.to_string(),
                    body_parts,
                }
            };
            if rules.insert(raw.to_string(), entry).is_some() {
                return Err(err(format!("duplicate rule for `{raw}`")));
            }
        }
        Ok(Self { rules })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, raw_name: &str) -> Option<&Verbalization> {
        self.rules.get(raw_name)
    }

    pub fn raw_names(&self) -> Vec<String> {
        self.rules.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// A phrase must read as natural language: no camel-case compounds and no
/// dataset prefixes such as `ub-Shirt`.
fn looks_dataset_native(phrase: &str) -> bool {
    phrase.split_whitespace().any(|word| {
        let chars: Vec<char> = word.chars().collect();
        let camel = chars
            .windows(2)
            .any(|w| w[0].is_lowercase() && w[1].is_uppercase());
        let prefixed = word
            .split_once('-')
            .is_some_and(|(_, rest)| rest.chars().next().is_some_and(char::is_uppercase));
        camel || prefixed
    })
}

fn category_hint(raw_name: &str) -> Option<String> {
    raw_name
        .split_once('-')
        .map(|(prefix, _)| prefix)
        .filter(|p| !p.is_empty() && p.chars().all(char::is_alphabetic))
        .map(str::to_string)
}

pub fn filter_and_verbalize(
    dataset_name: &str,
    raw_names: &[String],
    rules: &VerbalizationTable,
) -> Result<AttributeCatalog> {
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    let mut filtered_out = Vec::new();
    for raw in raw_names {
        if !seen.insert(raw.as_str()) {
            return Err(OaprError::InvalidArgument(format!(
                "duplicate raw attribute `{raw}`"
            )));
        }
        match rules.get(raw) {
            None => return Err(OaprError::UnmappedAttribute(raw.clone())),
            Some(Verbalization::Drop) => filtered_out.push(raw.clone()),
            Some(Verbalization::Phrase { phrase, body_parts }) => {
                if phrase.trim().is_empty() {
                    return Err(OaprError::EmptyPhrase(raw.clone()));
                }
                if looks_dataset_native(phrase) {
                    return Err(OaprError::InvalidArgument(format!(
                        "phrase `{phrase}` for `{raw}` still carries dataset formatting"
                    )));
                }
                records.push(AttributeRecord {
                    raw_name: raw.clone(),
                    phrase: phrase.trim().to_string(),
                    category_hint: category_hint(raw),
                    body_parts: body_parts.clone(),
                });
            }
        }
    }
    records.sort_by(|a, b| a.raw_name.cmp(&b.raw_name));
    filtered_out.sort();
    Ok(AttributeCatalog {
        dataset_name: dataset_name.to_string(),
        records,
        filtered_out,
    })
}

/// Verbalization tables shipped with the crate, keyed by dataset name.
pub fn builtin_rules(dataset: &str) -> Option<&'static str> {
    match dataset.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "pa100k" => Some(include_str!("../../data/rules/pa100k.tsv")),
        "peta" => Some(include_str!("../../data/rules/peta.tsv")),
        "rapv1" => Some(include_str!("../../data/rules/rapv1.tsv")),
        "rapv2" => Some(include_str!("../../data/rules/rapv2.tsv")),
        "synthetic" => Some(include_str!("../../data/rules/synthetic.tsv")),
        _ => None,
    }
}

/// Cluster counts used for the public benchmarks.
pub fn reference_cluster_count(dataset: &str) -> Option<usize> {
    match dataset.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "pa100k" => Some(7),
        "peta" => Some(6),
        "rapv1" | "rapv2" => Some(8),
        "synthetic" => Some(3),
        _ => None,
    }
}
