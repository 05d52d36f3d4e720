use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::AttributeCatalog;
use crate::error::{OaprError, Result};

/// Maps a phrase to a fixed-length vector. Implementations must be deterministic.
pub trait PhraseEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, phrase: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing over lower-cased words and padded character trigrams.
///
/// Needs no model download and is stable across platforms, which makes it the
/// default for tests and the synthetic catalog.
#[derive(Debug, Clone)]
pub struct HashNgramEmbedder {
    dim: usize,
    word_weight: f64,
    trigram_weight: f64,
}

impl Default for HashNgramEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl HashNgramEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            word_weight: 1.0,
            trigram_weight: 0.5,
        }
    }

    fn add_feature(&self, out: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign * weight;
    }
}

impl PhraseEmbedder for HashNgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, phrase: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        let lower = phrase.to_lowercase();
        for word in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            self.add_feature(&mut out, &format!("w:{word}"), self.word_weight);
            let padded: Vec<char> = format!("#{word}#").chars().collect();
            for tri in padded.windows(3) {
                let s: String = tri.iter().collect();
                self.add_feature(&mut out, &format!("c:{s}"), self.trigram_weight);
            }
        }
        Ok(out)
    }
}

/// Phrase vectors computed offline by an external sentence encoder, stored as
/// a JSON object `{phrase: [f64, ...]}`.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedEmbedder {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        if dim == 0 || vectors.values().any(|v| v.len() != dim) {
            return Err(OaprError::ProviderFailure(
                "precomputed vectors must share one positive dimension".into(),
            ));
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(serde_json::from_str(&text)?)
    }
}

impl PhraseEmbedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, phrase: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(phrase)
            .cloned()
            .ok_or_else(|| OaprError::ProviderFailure(format!("no vector for `{phrase}`")))
    }
}

/// One L2-normalised row per catalog record, in record order.
pub fn embed_phrases(catalog: &AttributeCatalog, embedder: &dyn PhraseEmbedder) -> Result<Array2<f64>> {
    let dim = embedder.dim();
    if dim == 0 {
        return Err(OaprError::ProviderFailure("embedder dimension is zero".into()));
    }
    let mut out = Array2::zeros((catalog.len(), dim));
    for (i, record) in catalog.records.iter().enumerate() {
        let v = embedder.embed(&record.phrase)?;
        if v.len() != dim {
            return Err(OaprError::ProviderFailure(format!(
                "embedder returned {} values for `{}`, expected {dim}",
                v.len(),
                record.phrase
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(OaprError::ProviderFailure(format!(
                "zero or non-finite embedding for `{}`",
                record.phrase
            )));
        }
        for (dst, x) in out.row_mut(i).iter_mut().zip(v) {
            *dst = x / norm;
        }
    }
    Ok(out)
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
