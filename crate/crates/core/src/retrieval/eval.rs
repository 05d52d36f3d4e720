use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{p_at_k_instance, p_at_k_label};
use super::{rank_entries, ScoreMode};
use crate::catalog::{AttributeSplit, SplitManifest};
use crate::error::{OaprError, Result};
use crate::tape::Mat;

/// Which attribute pool a query is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySplit {
    /// Every attribute is base.
    Base,
    /// Every attribute is novel.
    Novel,
    /// At least one base and one novel attribute.
    Mixed,
}

impl QuerySplit {
    pub const ALL: [QuerySplit; 3] = [QuerySplit::Base, QuerySplit::Novel, QuerySplit::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            QuerySplit::Base => "base",
            QuerySplit::Novel => "novel",
            QuerySplit::Mixed => "mixed",
        }
    }
}

/// Attribute positions (label columns), ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeQuery {
    pub attributes: Vec<usize>,
}

fn combinations(pool: &[usize], r: usize, out: &mut Vec<Vec<usize>>) {
    fn go(pool: &[usize], r: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..pool.len() {
            if pool.len() - i < r - cur.len() {
                break;
            }
            cur.push(pool[i]);
            go(pool, r, i + 1, cur, out);
            cur.pop();
        }
    }
    go(pool, r, 0, &mut Vec::with_capacity(r), out);
}

/// All size-`r` attribute combinations of `split` that at least one gallery
/// image satisfies jointly, in lexicographic order of label positions.
///
/// `attribute_names` gives the raw name of every label column.
pub fn make_query_set(
    manifest: &SplitManifest,
    attribute_names: &[String],
    labels: &[Vec<bool>],
    split: QuerySplit,
    r: usize,
) -> Result<Vec<AttributeQuery>> {
    if r == 0 {
        return Err(OaprError::InvalidArgument("queries need at least one attribute".into()));
    }
    let mut base = Vec::new();
    let mut novel = Vec::new();
    for (i, name) in attribute_names.iter().enumerate() {
        match manifest.split_of(name) {
            Some(AttributeSplit::Base) => base.push(i),
            Some(AttributeSplit::Novel) => novel.push(i),
            None => {}
        }
    }
    let mut combos = Vec::new();
    match split {
        QuerySplit::Base => combinations(&base, r, &mut combos),
        QuerySplit::Novel => combinations(&novel, r, &mut combos),
        QuerySplit::Mixed => {
            let mut pool: Vec<usize> = base.iter().chain(&novel).copied().collect();
            pool.sort_unstable();
            let mut all = Vec::new();
            combinations(&pool, r, &mut all);
            combos = all
                .into_iter()
                .filter(|c| c.iter().any(|a| base.contains(a)) && c.iter().any(|a| novel.contains(a)))
                .collect();
        }
    }
    Ok(combos
        .into_iter()
        .filter(|c| labels.iter().any(|l| c.iter().all(|&a| l[a])))
        .map(|attributes| AttributeQuery { attributes })
        .collect())
}

/// Equal-size random draws from each of the `2^r` label cells of `query`
/// (size = the smallest cell). Returned positions are ascending; empty when
/// some cell is empty.
pub fn balanced_subsample(labels: &[Vec<bool>], query: &AttributeQuery, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let r = query.attributes.len();
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); 1 << r];
    for (e, l) in labels.iter().enumerate() {
        let cell = query
            .attributes
            .iter()
            .enumerate()
            .fold(0usize, |acc, (bit, &a)| acc | (usize::from(l[a]) << bit));
        cells[cell].push(e);
    }
    let m = cells.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(m << r);
    for cell in &mut cells {
        cell.shuffle(rng);
        out.extend_from_slice(&cell[..m]);
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EvalMode {
    Full,
    Balanced { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n_queries: usize,
    /// Queries dropped because the balanced gallery held fewer than `max K` images.
    pub n_skipped: usize,
    /// Keyed by `K`.
    pub p_at_k_label: BTreeMap<usize, f64>,
    pub p_at_k_instance: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub split: QuerySplit,
    pub attributes: Vec<String>,
    /// Gallery size the query was ranked against.
    pub candidates: usize,
    pub top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub eval_mode: EvalMode,
    pub score_mode: ScoreMode,
    pub ks: Vec<usize>,
    pub splits: BTreeMap<QuerySplit, SplitMetrics>,
    pub rankings: Vec<QueryRanking>,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RetrievalReport {
    pub fn metric(&self, split: QuerySplit, instance: bool, k: usize) -> Option<f64> {
        let s = self.splits.get(&split)?;
        let m = if instance { &s.p_at_k_instance } else { &s.p_at_k_label };
        m.get(&k).copied()
    }
}

/// Ranks every query against the gallery (or its balanced subsample) using
/// precomputed `E × A` per-attribute scores and computes both metrics at each K.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_scores(
    image_ids: &[String],
    labels: &[Vec<bool>],
    attribute_names: &[String],
    scores: &Mat,
    queries: &[(QuerySplit, Vec<AttributeQuery>)],
    ks: &[usize],
    eval_mode: EvalMode,
    score_mode: ScoreMode,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(OaprError::InvalidArgument(format!("invalid K list {ks:?}")));
    }
    if scores.dim() != (image_ids.len(), attribute_names.len()) || labels.len() != image_ids.len() {
        return Err(OaprError::ShapeMismatch(format!(
            "scores {:?} for {} images, {} attributes",
            scores.dim(),
            image_ids.len(),
            attribute_names.len()
        )));
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let mut ks_sorted = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    let all: Vec<usize> = (0..image_ids.len()).collect();
    let mut splits = BTreeMap::new();
    let mut report_rankings = Vec::new();
    let mut query_counter: u64 = 0;
    for (split, qs) in queries {
        let mut tops: Vec<Vec<usize>> = Vec::new();
        let mut kept: Vec<Vec<usize>> = Vec::new();
        let mut skipped = 0;
        for q in qs {
            let candidates = match eval_mode {
                EvalMode::Full => all.clone(),
                EvalMode::Balanced { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(query_counter);
                    balanced_subsample(labels, q, &mut rng)
                }
            };
            query_counter += 1;
            if candidates.len() < k_max {
                skipped += 1;
                continue;
            }
            let ranked = rank_entries(image_ids, scores, &q.attributes, &candidates, score_mode);
            let top: Vec<usize> = ranked.into_iter().take(k_max).map(|(e, _)| e).collect();
            report_rankings.push(QueryRanking {
                split: *split,
                attributes: q.attributes.iter().map(|&a| attribute_names[a].clone()).collect(),
                candidates: candidates.len(),
                top: top.iter().map(|&e| image_ids[e].clone()).collect(),
            });
            tops.push(top);
            kept.push(q.attributes.clone());
        }
        let mut metrics = SplitMetrics {
            n_queries: kept.len(),
            n_skipped: skipped,
            p_at_k_label: BTreeMap::new(),
            p_at_k_instance: BTreeMap::new(),
        };
        if !kept.is_empty() {
            for &k in &ks_sorted {
                let cut: Vec<Vec<usize>> = tops.iter().map(|t| t[..k].to_vec()).collect();
                metrics.p_at_k_label.insert(k, p_at_k_label(&cut, labels, &kept, k)?);
                metrics.p_at_k_instance.insert(k, p_at_k_instance(&cut, labels, &kept, k)?);
            }
        }
        splits.insert(*split, metrics);
    }
    Ok(RetrievalReport {
        eval_mode,
        score_mode,
        ks: ks_sorted,
        splits,
        rankings: report_rankings,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::NovelFraction;

    fn manifest(base: &[&str], novel: &[&str]) -> SplitManifest {
        SplitManifest {
            base: base.iter().map(|s| s.to_string()).collect(),
            clusters: vec![],
            dataset_name: "t".into(),
            n_clusters: 0,
            novel: novel.iter().map(|s| s.to_string()).collect(),
            novel_fraction: NovelFraction::new(1, 4).unwrap(),
            seed: 0,
        }
    }

    #[test]
    fn combinations_are_lexicographic() {
        let mut out = Vec::new();
        combinations(&[1, 4, 7], 2, &mut out);
        assert_eq!(out, vec![vec![1, 4], vec![1, 7], vec![4, 7]]);
    }

    #[test]
    fn query_sets_filter_unattainable_pairs() {
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let m = manifest(&["a", "b", "c"], &["d"]);
        let labels = vec![vec![true, true, false, true], vec![false, true, true, false]];
        let base = make_query_set(&m, &names, &labels, QuerySplit::Base, 2).unwrap();
        // (a, c) never co-occur.
        assert_eq!(base, vec![AttributeQuery { attributes: vec![0, 1] }, AttributeQuery { attributes: vec![1, 2] }]);
        let mixed = make_query_set(&m, &names, &labels, QuerySplit::Mixed, 2).unwrap();
        assert_eq!(mixed.len(), 2);
        assert!(make_query_set(&m, &names, &labels, QuerySplit::Novel, 2).unwrap().is_empty());
        let all_pos = vec![vec![true; 4]];
        assert_eq!(make_query_set(&m, &names, &all_pos, QuerySplit::Base, 2).unwrap().len(), 3);
    }

    #[test]
    fn balanced_cells_are_equal() {
        let labels: Vec<Vec<bool>> = (0..40).map(|i| vec![i % 2 == 0, i % 5 == 0]).collect();
        let q = AttributeQuery { attributes: vec![0, 1] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = balanced_subsample(&labels, &q, &mut rng);
        // Smallest cell: (even, multiple of 5) and (odd, multiple of 5) have 4 each.
        assert_eq!(s.len(), 16);
        let both = s.iter().filter(|&&e| labels[e][0] && labels[e][1]).count();
        assert_eq!(both, 4);
    }
}
