//! Gallery indexing, query scoring and retrieval metrics.

mod eval;
mod index;
mod metrics;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use eval::{
    balanced_subsample, evaluate_scores, make_query_set, AttributeQuery, EvalMode, QueryRanking, QuerySplit,
    RetrievalReport, SplitMetrics,
};
pub use index::{build_index, build_index_from_features, GalleryIndex, IndexHeader, INDEX_MAGIC, INDEX_VERSION};
pub use metrics::{p_at_k_instance, p_at_k_label};

use crate::attr_select::{cross_attend, SelectionParams};
use crate::catalog::AttributeCatalog;
use crate::error::{OaprError, Result};
use crate::model::OaprModel;
use crate::tape::Mat;

/// One gallery image and its labels over the full catalog, in catalog order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub image_id: String,
    pub image_uri: String,
    pub labels: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct GalleryLine {
    image_id: String,
    image_uri: String,
    labels: BTreeMap<String, u8>,
}

/// Reads the annotation JSONL (`{"image_id", "image_uri", "labels": {raw: 0|1}}`
/// per line). Labels for attributes outside the catalog are ignored; every
/// catalog attribute must be present.
pub fn read_gallery_jsonl(path: impl AsRef<Path>, catalog: &AttributeCatalog) -> Result<Vec<GalleryEntry>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GalleryLine = serde_json::from_str(&line)
            .map_err(|e| OaprError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let mut labels = Vec::with_capacity(catalog.len());
        for rec in &catalog.records {
            match parsed.labels.get(&rec.raw_name) {
                Some(0) => labels.push(false),
                Some(1) => labels.push(true),
                Some(v) => {
                    return Err(OaprError::Format(format!(
                        "{}:{}: label {v} for `{}` is not 0 or 1",
                        path.display(),
                        n + 1,
                        rec.raw_name
                    )))
                }
                None => {
                    return Err(OaprError::Format(format!(
                        "{}:{}: missing label for `{}`",
                        path.display(),
                        n + 1,
                        rec.raw_name
                    )))
                }
            }
        }
        out.push(GalleryEntry {
            image_id: parsed.image_id,
            image_uri: parsed.image_uri,
            labels,
        });
    }
    Ok(out)
}

pub fn write_gallery_jsonl(path: impl AsRef<Path>, entries: &[GalleryEntry], catalog: &AttributeCatalog) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        check_labels(e, catalog.len())?;
        let line = GalleryLine {
            image_id: e.image_id.clone(),
            image_uri: e.image_uri.clone(),
            labels: catalog
                .records
                .iter()
                .zip(&e.labels)
                .map(|(r, &l)| (r.raw_name.clone(), u8::from(l)))
                .collect(),
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub(crate) fn check_labels(e: &GalleryEntry, n: usize) -> Result<()> {
    if e.labels.len() != n {
        return Err(OaprError::ShapeMismatch(format!(
            "`{}` has {} labels, catalog has {n}",
            e.image_id,
            e.labels.len()
        )));
    }
    Ok(())
}

/// Relative URIs resolve against the directory of the annotation file.
pub fn resolve_uri(base_dir: &Path, uri: &str) -> PathBuf {
    let p = Path::new(uri);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// A free-text multi-attribute query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub attributes: Vec<String>,
    pub k: usize,
}

impl RetrievalQuery {
    /// Trims phrases, drops blanks and duplicates (first occurrence wins).
    pub fn new(attributes: impl IntoIterator<Item = impl AsRef<str>>, k: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let attributes: Vec<String> = attributes
            .into_iter()
            .map(|a| a.as_ref().trim().to_string())
            .filter(|a| !a.is_empty() && seen.insert(a.clone()))
            .collect();
        if attributes.is_empty() {
            return Err(OaprError::InvalidArgument("query has no attributes".into()));
        }
        if k == 0 {
            return Err(OaprError::InvalidArgument("k must be positive".into()));
        }
        Ok(Self { attributes, k })
    }
}

/// How per-attribute scores combine into one ranking score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Mean,
    Product,
    Min,
}

impl ScoreMode {
    pub fn combine(self, scores: &[f64]) -> f64 {
        match self {
            ScoreMode::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            ScoreMode::Product => scores.iter().product(),
            ScoreMode::Min => scores.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = OaprError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ScoreMode::Mean),
            "product" => Ok(ScoreMode::Product),
            "min" => Ok(ScoreMode::Min),
            other => Err(OaprError::InvalidArgument(format!("unknown score mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub image_id: String,
    pub combined_score: f64,
    /// In query attribute order.
    pub per_attribute: Vec<f64>,
}

/// `E × A` matrix of `cos(f_att_img(entry)[a], f_text_att[a])`.
pub fn attribute_scores(index: &GalleryIndex, f_text_att: &Mat, selection: &SelectionParams) -> Result<Mat> {
    let a = f_text_att.nrows();
    let mut out = Mat::zeros((index.len(), a));
    let text_norms: Vec<f64> = f_text_att.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    for (e, body) in index.f_body.iter().enumerate() {
        let sel = cross_attend(f_text_att, body, selection)?;
        for i in 0..a {
            let f = sel.f_att_img.row(i);
            let t = f_text_att.row(i);
            let denom = f.dot(&f).sqrt() * text_norms[i];
            out[[e, i]] = if denom > 0.0 { f.dot(&t) / denom } else { 0.0 };
        }
    }
    Ok(out)
}

/// Orders `candidates` (entry positions) by combined score, best first; ties
/// go to the smaller image id. Columns of `scores` are the query attributes.
pub fn rank_entries(
    index_ids: &[String],
    scores: &Mat,
    columns: &[usize],
    candidates: &[usize],
    mode: ScoreMode,
) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&e| {
            let per: Vec<f64> = columns.iter().map(|&c| scores[[e, c]]).collect();
            (e, mode.combine(&per))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| index_ids[a.0].cmp(&index_ids[b.0])));
    ranked
}

/// Encodes the query phrases, scores every entry and returns the top `k`.
pub fn score_query(index: &GalleryIndex, query: &RetrievalQuery, model: &OaprModel, mode: ScoreMode) -> Result<Vec<RankedResult>> {
    if index.is_empty() {
        return Err(OaprError::EmptyGallery);
    }
    if query.k > index.len() {
        return Err(OaprError::InvalidArgument(format!(
            "k = {} exceeds the gallery size {}",
            query.k,
            index.len()
        )));
    }
    let text = model.attribute_features(&query.attributes)?;
    let scores = attribute_scores(index, &text, &model.selection)?;
    let columns: Vec<usize> = (0..query.attributes.len()).collect();
    let all: Vec<usize> = (0..index.len()).collect();
    let ids: Vec<String> = index.entries.iter().map(|e| e.image_id.clone()).collect();
    Ok(rank_entries(&ids, &scores, &columns, &all, mode)
        .into_iter()
        .take(query.k)
        .map(|(e, combined)| RankedResult {
            image_id: ids[e].clone(),
            combined_score: combined,
            per_attribute: scores.row(e).to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_trims_and_dedups() {
        let q = RetrievalQuery::new([" a hat ", "a hat", "", "a bag"], 3).unwrap();
        assert_eq!(q.attributes, vec!["a hat", "a bag"]);
        assert!(RetrievalQuery::new(["  "], 1).is_err());
        assert!(RetrievalQuery::new(["x"], 0).is_err());
    }

    #[test]
    fn score_modes() {
        assert_eq!(ScoreMode::Mean.combine(&[0.2, 0.6]), 0.4);
        assert_eq!(ScoreMode::Product.combine(&[0.5, 0.5]), 0.25);
        assert_eq!(ScoreMode::Min.combine(&[0.5, -0.1]), -0.1);
        assert_eq!("min".parse::<ScoreMode>().unwrap(), ScoreMode::Min);
    }

    #[test]
    fn ties_go_to_the_smaller_id() {
        let ids = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let scores = ndarray::array![[0.5], [0.5], [0.9]];
        let r = rank_entries(&ids, &scores, &[0], &[0, 1, 2], ScoreMode::Mean);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 1, 0]);
    }
}
