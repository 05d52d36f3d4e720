use crate::error::{OaprError, Result};

fn check(rankings: &[Vec<usize>], queries: &[Vec<usize>], k: usize) -> Result<()> {
    if rankings.len() != queries.len() {
        return Err(OaprError::InvalidArgument(format!(
            "{} rankings for {} queries",
            rankings.len(),
            queries.len()
        )));
    }
    if queries.is_empty() {
        return Err(OaprError::InvalidArgument("no queries to score".into()));
    }
    if let Some(r) = rankings.iter().find(|r| r.len() != k) {
        return Err(OaprError::RankingLengthMismatch {
            expected: k,
            got: r.len(),
        });
    }
    if let Some(q) = queries.iter().find(|q| q.is_empty()) {
        return Err(OaprError::InvalidArgument(format!("empty query {q:?}")));
    }
    Ok(())
}

/// Per query, the fraction of `(attribute, retrieved image)` cells that are
/// positive; averaged over queries.
///
/// `rankings[q]` lists the top-`k` entry positions for query `q`, `labels[e][a]`
/// is entry `e`'s label for attribute `a`, and `queries[q]` lists attributes.
pub fn p_at_k_label(rankings: &[Vec<usize>], labels: &[Vec<bool>], queries: &[Vec<usize>], k: usize) -> Result<f64> {
    check(rankings, queries, k)?;
    let mut total = 0.0;
    for (ranking, query) in rankings.iter().zip(queries) {
        let hits: usize = ranking
            .iter()
            .map(|&e| query.iter().filter(|&&a| labels[e][a]).count())
            .sum();
        total += hits as f64 / (query.len() * k) as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Fraction of queries for which some top-`k` image has every query attribute.
pub fn p_at_k_instance(rankings: &[Vec<usize>], labels: &[Vec<bool>], queries: &[Vec<usize>], k: usize) -> Result<f64> {
    check(rankings, queries, k)?;
    let hits = rankings
        .iter()
        .zip(queries)
        .filter(|(ranking, query)| ranking.iter().any(|&e| query.iter().all(|&a| labels[e][a])))
        .count();
    Ok(hits as f64 / queries.len() as f64)
}
