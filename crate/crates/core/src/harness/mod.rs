//! Training, checkpointing, evaluation and the synthetic dataset.

mod checkpoint;
mod config;
mod optim;
pub mod synthetic;
mod train;

use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use optim::{cosine_lr, Adam};
pub use train::{run_training, LogLine, LossRecord, TrainExample, TrainOutcome};

use crate::catalog::{AttributeCatalog, SplitManifest};
use crate::encoders::ImageTensor;
use crate::error::{OaprError, Result};
use crate::model::OaprModel;
use crate::retrieval::{
    attribute_scores, build_index, evaluate_scores, make_query_set, resolve_uri, score_query, EvalMode, GalleryEntry,
    GalleryIndex, QuerySplit, RetrievalQuery, RetrievalReport, ScoreMode,
};
use crate::tape::Mat;

/// Loads one image per entry, resolving relative URIs against `base_dir`.
pub fn load_gallery_images(entries: &[GalleryEntry], base_dir: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    entries
        .iter()
        .map(|e| {
            ImageTensor::load(resolve_uri(base_dir, &e.image_uri), size).map_err(|err| match err {
                OaprError::ImageLoad { message, .. } => OaprError::ImageLoad {
                    image_id: e.image_id.clone(),
                    message,
                },
                other => other,
            })
        })
        .collect()
}

/// Builds an index over `entries` with the checkpoint's body prompts.
pub fn index_gallery(
    checkpoint: &Checkpoint,
    model: &OaprModel,
    entries: Vec<GalleryEntry>,
    base_dir: &Path,
) -> Result<GalleryIndex> {
    let size = model.image_size();
    let names = checkpoint.catalog.raw_names().map(str::to_string).collect();
    build_index(entries, names, model, Some(checkpoint.fingerprint()?), |e| {
        ImageTensor::load(resolve_uri(base_dir, &e.image_uri), size)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub mode: EvalMode,
    pub score_mode: ScoreMode,
    /// Attributes per query.
    pub query_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 5],
            mode: EvalMode::Full,
            score_mode: ScoreMode::Mean,
            query_size: 2,
        }
    }
}

/// Phrase of every index attribute, looked up in `catalog`.
pub fn index_phrases(index: &GalleryIndex, catalog: &AttributeCatalog) -> Result<Vec<String>> {
    index
        .attributes
        .iter()
        .map(|raw| {
            catalog
                .get(raw)
                .map(|r| r.phrase.clone())
                .ok_or_else(|| OaprError::UnmappedAttribute(raw.clone()))
        })
        .collect()
}

/// `E × A` per-attribute scores of every index entry under `model`.
pub fn score_index(model: &OaprModel, index: &GalleryIndex, catalog: &AttributeCatalog) -> Result<Mat> {
    let phrases = index_phrases(index, catalog)?;
    let text = model.attribute_features(&phrases)?;
    attribute_scores(index, &text, &model.selection)
}

/// Evaluates a checkpoint on an index built from the test gallery.
///
/// The index must come from the same encoder, and when it records a
/// checkpoint, from this one.
pub fn evaluate(
    checkpoint: &Checkpoint,
    model: &OaprModel,
    manifest: &SplitManifest,
    index: &GalleryIndex,
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    if index.encoder_fingerprint != checkpoint.encoder_fingerprint {
        return Err(OaprError::FingerprintMismatch {
            expected: checkpoint.encoder_fingerprint.clone(),
            found: index.encoder_fingerprint.clone(),
        });
    }
    let model_fp = model.encoder.fingerprint();
    if model_fp != checkpoint.encoder_fingerprint {
        return Err(OaprError::FingerprintMismatch {
            expected: checkpoint.encoder_fingerprint.clone(),
            found: model_fp,
        });
    }
    let ck_fp = checkpoint.fingerprint()?;
    if let Some(fp) = &index.checkpoint_fingerprint {
        if *fp != ck_fp {
            return Err(OaprError::FingerprintMismatch {
                expected: ck_fp,
                found: fp.clone(),
            });
        }
    }
    let scores = score_index(model, index, &checkpoint.catalog)?;
    let mut report = evaluate_with_scores(index, &scores, manifest, opts)?;
    report.config = serde_json::json!({
        "checkpoint_fingerprint": ck_fp,
        "encoder_fingerprint": checkpoint.encoder_fingerprint,
        "dataset": manifest.dataset_name,
        "manifest_seed": manifest.seed,
        "novel_fraction": manifest.novel_fraction,
        "gallery_size": index.len(),
        "query_size": opts.query_size,
        "train_seed": checkpoint.config.seed,
        "epochs": checkpoint.config.epochs,
    });
    Ok(report)
}

/// Query generation and metrics for precomputed scores.
pub fn evaluate_with_scores(
    index: &GalleryIndex,
    scores: &Mat,
    manifest: &SplitManifest,
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    let labels = index.labels();
    let ids: Vec<String> = index.entries.iter().map(|e| e.image_id.clone()).collect();
    let queries = QuerySplit::ALL
        .iter()
        .map(|&s| Ok((s, make_query_set(manifest, &index.attributes, &labels, s, opts.query_size)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_scores(
        &ids,
        &labels,
        &index.attributes,
        scores,
        &queries,
        &opts.ks,
        opts.mode,
        opts.score_mode,
    )?;
    report.config = serde_json::json!({ "manifest_seed": manifest.seed });
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub queries: usize,
    pub gallery_size: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
}

/// Times `n_queries` random two-attribute queries (phrases drawn from
/// `catalog`) end to end: phrase encoding, selection over every entry, ranking.
pub fn bench_latency(
    index: &GalleryIndex,
    model: &OaprModel,
    catalog: &AttributeCatalog,
    n_queries: usize,
    k: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if index.is_empty() {
        return Err(OaprError::EmptyGallery);
    }
    if catalog.len() < 2 || n_queries == 0 {
        return Err(OaprError::InvalidArgument(
            "latency benchmark needs two attributes and at least one query".into(),
        ));
    }
    let phrases: Vec<&str> = catalog.records.iter().map(|r| r.phrase.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(n_queries);
    for _ in 0..n_queries {
        let pair: Vec<&str> = phrases.choose_multiple(&mut rng, 2).copied().collect();
        let query = RetrievalQuery::new(pair, k.min(index.len()))?;
        let start = Instant::now();
        let ranked = score_query(index, &query, model, ScoreMode::Mean)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(ranked);
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        queries: n_queries,
        gallery_size: index.len(),
        mean_ms: times.iter().sum::<f64>() / n_queries as f64,
        median_ms: sorted[n_queries / 2],
        max_ms: *sorted.last().expect("non-empty"),
    })
}
