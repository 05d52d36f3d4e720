use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{AttributeCatalog, ClusterAssignment, Linkage};
use crate::error::{OaprError, Result};

/// A fraction strictly between 0 and 1, serialised as `"num/den"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NovelFraction {
    num: u32,
    den: u32,
}

impl NovelFraction {
    pub const QUARTER: NovelFraction = NovelFraction { num: 1, den: 4 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num >= den {
            return Err(OaprError::InvalidArgument(format!(
                "novel fraction {num}/{den} must lie strictly between 0 and 1"
            )));
        }
        Ok(Self { num, den })
    }

    /// `ceil(fraction · size)`, except singleton clusters contribute nothing.
    pub fn novel_count(&self, size: usize) -> usize {
        if size <= 1 {
            return 0;
        }
        let (num, den) = (self.num as usize, self.den as usize);
        (num * size).div_ceil(den)
    }
}

impl Default for NovelFraction {
    fn default() -> Self {
        Self::QUARTER
    }
}

impl fmt::Display for NovelFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for NovelFraction {
    type Err = OaprError;

    fn from_str(s: &str) -> Result<Self> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| OaprError::InvalidArgument(format!("expected `num/den`, got `{s}`")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u32>()
                .map_err(|_| OaprError::InvalidArgument(format!("bad fraction `{s}`")))
        };
        Self::new(parse(n)?, parse(d)?)
    }
}

impl Serialize for NovelFraction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NovelFraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeSplit {
    Base,
    Novel,
}

impl fmt::Display for AttributeSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttributeSplit::Base => "base",
            AttributeSplit::Novel => "novel",
        })
    }
}

/// Base/novel partition with everything needed to replay it.
///
/// Fields are declared in key order so the JSON form has sorted keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub base: Vec<String>,
    pub clusters: Vec<Vec<String>>,
    pub dataset_name: String,
    pub n_clusters: usize,
    pub novel: Vec<String>,
    pub novel_fraction: NovelFraction,
    pub seed: u64,
}

impl SplitManifest {
    pub fn split_of(&self, raw_name: &str) -> Option<AttributeSplit> {
        if self.base.binary_search_by(|b| b.as_str().cmp(raw_name)).is_ok() {
            Some(AttributeSplit::Base)
        } else if self.novel.binary_search_by(|b| b.as_str().cmp(raw_name)).is_ok() {
            Some(AttributeSplit::Novel)
        } else {
            None
        }
    }

    pub fn attributes(&self, split: AttributeSplit) -> &[String] {
        match split {
            AttributeSplit::Base => &self.base,
            AttributeSplit::Novel => &self.novel,
        }
    }

    /// Rebuilds the cluster assignment relative to `catalog`'s record order.
    pub fn cluster_assignment(&self, catalog: &AttributeCatalog) -> Result<ClusterAssignment> {
        let mut labels = vec![usize::MAX; catalog.len()];
        for (c, members) in self.clusters.iter().enumerate() {
            for name in members {
                let pos = catalog.position(name).ok_or_else(|| {
                    OaprError::InvalidArgument(format!("manifest attribute `{name}` is not in the catalog"))
                })?;
                labels[pos] = c;
            }
        }
        if labels.contains(&usize::MAX) {
            return Err(OaprError::InvalidArgument(
                "manifest clusters do not cover the catalog".into(),
            ));
        }
        Ok(ClusterAssignment {
            n_clusters: self.n_clusters,
            labels,
            linkage: Linkage::AverageCosine,
        })
    }

    /// Canonical bytes: pretty JSON with sorted keys and a trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let manifest: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[String]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.base) || !sorted(&self.novel) {
            return Err(OaprError::Format("manifest base/novel lists must be sorted and unique".into()));
        }
        if self.base.iter().any(|b| self.novel.binary_search(b).is_ok()) {
            return Err(OaprError::Format("base and novel attributes overlap".into()));
        }
        if self.clusters.len() != self.n_clusters {
            return Err(OaprError::Format("cluster count disagrees with n_clusters".into()));
        }
        Ok(())
    }
}

/// Shuffles each cluster with one seeded generator (clusters visited in id
/// order) and marks the first `ceil(fraction · |c|)` members as novel.
pub fn partition_clusters(
    assignment: &ClusterAssignment,
    catalog: &AttributeCatalog,
    seed: u64,
    novel_fraction: NovelFraction,
) -> Result<SplitManifest> {
    if assignment.labels.len() != catalog.len() {
        return Err(OaprError::ShapeMismatch(format!(
            "{} cluster labels for {} catalog records",
            assignment.labels.len(),
            catalog.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = Vec::with_capacity(assignment.n_clusters);
    let mut base = Vec::new();
    let mut novel = Vec::new();
    for members in assignment.members() {
        if members.is_empty() {
            return Err(OaprError::InvalidArgument("cluster with no members".into()));
        }
        let mut names: Vec<String> = members
            .iter()
            .map(|&i| catalog.records[i].raw_name.clone())
            .collect();
        clusters.push(names.clone());
        names.shuffle(&mut rng);
        let k = novel_fraction.novel_count(names.len());
        novel.extend_from_slice(&names[..k]);
        base.extend_from_slice(&names[k..]);
    }
    base.sort();
    novel.sort();
    Ok(SplitManifest {
        base,
        clusters,
        dataset_name: catalog.dataset_name.clone(),
        n_clusters: assignment.n_clusters,
        novel,
        novel_fraction,
        seed,
    })
}
