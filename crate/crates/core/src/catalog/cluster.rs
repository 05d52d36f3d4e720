use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{OaprError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    AverageCosine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub n_clusters: usize,
    /// Cluster id per input row. Ids are numbered by each cluster's smallest row.
    pub labels: Vec<usize>,
    pub linkage: Linkage,
}

impl ClusterAssignment {
    /// Row indices per cluster, each list ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (row, &c) in self.labels.iter().enumerate() {
            out[c].push(row);
        }
        out
    }
}

/// Bottom-up average-linkage clustering over cosine distance.
///
/// Clusters are keyed by their smallest row. Each round merges the closest
/// pair; equal distances go to the lexicographically smallest `(i, j)` key
/// pair. Distances are updated with the size-weighted Lance–Williams rule.
pub fn cluster_attributes(embeddings: &Array2<f64>, n_clusters: usize) -> Result<ClusterAssignment> {
    let n = embeddings.nrows();
    if n_clusters == 0 {
        return Err(OaprError::InvalidArgument("n_clusters must be positive".into()));
    }
    if n_clusters > n {
        return Err(OaprError::TooManyClusters {
            requested: n_clusters,
            rows: n,
        });
    }

    let normed: Vec<Vec<f64>> = embeddings
        .rows()
        .into_iter()
        .map(|r| {
            let norm = r.dot(&r).sqrt();
            r.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect()
        })
        .collect();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let cos: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum();
            dist[i][j] = 1.0 - cos;
            dist[j][i] = dist[i][j];
        }
    }

    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut remaining = n;

    while remaining > n_clusters {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in ((i + 1)..n).filter(|&j| active[j]) {
                let d = dist[i][j];
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, keep, gone) = best.expect("at least two active clusters");
        let (si, sj) = (size[keep] as f64, size[gone] as f64);
        for k in (0..n).filter(|&k| active[k] && k != keep && k != gone) {
            let d = (si * dist[k][keep] + sj * dist[k][gone]) / (si + sj);
            dist[k][keep] = d;
            dist[keep][k] = d;
        }
        active[gone] = false;
        size[keep] += size[gone];
        for o in owner.iter_mut() {
            if *o == gone {
                *o = keep;
            }
        }
        remaining -= 1;
    }

    let mut id_of = vec![usize::MAX; n];
    let mut next = 0;
    let labels = owner
        .iter()
        .map(|&o| {
            if id_of[o] == usize::MAX {
                id_of[o] = next;
                next += 1;
            }
            id_of[o]
        })
        .collect();
    Ok(ClusterAssignment {
        n_clusters,
        labels,
        linkage: Linkage::AverageCosine,
    })
}
