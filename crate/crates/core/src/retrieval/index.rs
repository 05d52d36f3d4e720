use std::io::{Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_labels, GalleryEntry};
use crate::encoders::ImageTensor;
use crate::error::{OaprError, Result};
use crate::model::OaprModel;
use crate::tape::Mat;

pub const INDEX_MAGIC: &[u8; 8] = b"OAPRIDX\0";
pub const INDEX_VERSION: u32 = 1;

/// JSON header of an index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub version: u32,
    pub encoder_fingerprint: String,
    /// Fingerprint of the checkpoint whose body prompts produced the features.
    pub checkpoint_fingerprint: Option<String>,
    pub n: usize,
    pub c: usize,
    pub count: usize,
    pub built_at: u64,
    /// Raw attribute names, in label order.
    pub attributes: Vec<String>,
    pub entries: Vec<GalleryEntry>,
}

/// Body features of every gallery image, sorted by image id. Immutable once
/// built.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub entries: Vec<GalleryEntry>,
    /// One `N × C` matrix per entry.
    pub f_body: Vec<Mat>,
    pub encoder_fingerprint: String,
    pub checkpoint_fingerprint: Option<String>,
    pub attributes: Vec<String>,
    pub built_at: u64,
}

/// Features are stored as `f32`; rounding at build time keeps a freshly built
/// index identical to one read back from disk.
fn round_f32(m: &Mat) -> Mat {
    m.mapv(|v| v as f32 as f64)
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Index over precomputed body features (one `N × C` matrix per entry).
pub fn build_index_from_features(
    gallery: Vec<GalleryEntry>,
    f_body: Vec<Mat>,
    attributes: Vec<String>,
    encoder_fingerprint: impl Into<String>,
    checkpoint_fingerprint: Option<String>,
) -> Result<GalleryIndex> {
    if gallery.len() != f_body.len() {
        return Err(OaprError::ShapeMismatch(format!(
            "{} entries but {} feature blocks",
            gallery.len(),
            f_body.len()
        )));
    }
    if let Some(first) = f_body.first() {
        if let Some(bad) = f_body.iter().find(|m| m.dim() != first.dim()) {
            return Err(OaprError::ShapeMismatch(format!(
                "feature blocks {:?} and {:?} differ",
                first.dim(),
                bad.dim()
            )));
        }
        if f_body.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(OaprError::NonFiniteOutput("gallery body features".into()));
        }
    }
    for e in &gallery {
        check_labels(e, attributes.len())?;
    }
    let mut paired: Vec<(GalleryEntry, Mat)> = gallery.into_iter().zip(f_body.iter().map(round_f32)).collect();
    paired.sort_by(|a, b| a.0.image_id.cmp(&b.0.image_id));
    if let Some(w) = paired.windows(2).find(|w| w[0].0.image_id == w[1].0.image_id) {
        return Err(OaprError::IndexError(format!("duplicate image id `{}`", w[0].0.image_id)));
    }
    let (entries, f_body) = paired.into_iter().unzip();
    Ok(GalleryIndex {
        entries,
        f_body,
        encoder_fingerprint: encoder_fingerprint.into(),
        checkpoint_fingerprint,
        attributes,
        built_at: now(),
    })
}

/// Encodes every gallery image with the model's body prompts.
///
/// `load` maps an entry to its image tensor; failures surface as
/// [`OaprError::ImageLoad`] naming the entry.
pub fn build_index(
    gallery: Vec<GalleryEntry>,
    attributes: Vec<String>,
    model: &OaprModel,
    checkpoint_fingerprint: Option<String>,
    load: impl Fn(&GalleryEntry) -> Result<ImageTensor>,
) -> Result<GalleryIndex> {
    let mut feats = Vec::with_capacity(gallery.len());
    for e in &gallery {
        let img = load(e).map_err(|err| match err {
            OaprError::ImageLoad { message, .. } => OaprError::ImageLoad {
                image_id: e.image_id.clone(),
                message,
            },
            other => other,
        })?;
        feats.push(model.body_features(&img)?);
    }
    build_index_from_features(gallery, feats, attributes, model.encoder.fingerprint(), checkpoint_fingerprint)
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.entries
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.f_body.first().map_or((0, 0), Mat::dim)
    }

    pub fn labels(&self) -> Vec<Vec<bool>> {
        self.entries.iter().map(|e| e.labels.clone()).collect()
    }

    /// `sha256:<hex>` over the stored features (little-endian `f32`, entry order).
    pub fn feature_checksum(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.f_body {
            for v in m.iter() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        format!("sha256:{}", hex::encode(h.finalize()))
    }

    pub fn header(&self) -> IndexHeader {
        let (n, c) = self.dims();
        IndexHeader {
            version: INDEX_VERSION,
            encoder_fingerprint: self.encoder_fingerprint.clone(),
            checkpoint_fingerprint: self.checkpoint_fingerprint.clone(),
            n,
            c,
            count: self.len(),
            built_at: self.built_at,
            attributes: self.attributes.clone(),
            entries: self.entries.clone(),
        }
    }

    /// Magic, `u64` LE header length, JSON header, then `f32` LE row-major
    /// `N × C` blocks in entry order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.f_body.iter().map(|m| m.len() * 4).sum());
        for m in &self.f_body {
            for v in m.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| OaprError::Format("index file is truncated".into()))?;
        if &magic != INDEX_MAGIC {
            return Err(OaprError::Format("not an index file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)
            .map_err(|_| OaprError::Format("index header is truncated".into()))?;
        let header: IndexHeader = serde_json::from_slice(&header)?;
        if header.version != INDEX_VERSION {
            return Err(OaprError::Format(format!("unsupported index version {}", header.version)));
        }
        if header.count != header.entries.len() {
            return Err(OaprError::Format(format!(
                "header lists {} entries but count is {}",
                header.entries.len(),
                header.count
            )));
        }
        let block = header.n * header.c;
        let mut raw = vec![0u8; block * header.count * 4];
        r.read_exact(&mut raw)
            .map_err(|_| OaprError::Format("index feature blocks are truncated".into()))?;
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(OaprError::Format("trailing bytes after index features".into()));
        }
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let f_body = values
            .chunks(block.max(1))
            .take(header.count)
            .map(|c| Mat::from_shape_vec((header.n, header.c), c.to_vec()).expect("block size"))
            .collect();
        let index = GalleryIndex {
            entries: header.entries,
            f_body,
            encoder_fingerprint: header.encoder_fingerprint,
            checkpoint_fingerprint: header.checkpoint_fingerprint,
            attributes: header.attributes,
            built_at: header.built_at,
        };
        for e in &index.entries {
            check_labels(e, index.attributes.len())?;
        }
        if index.entries.windows(2).any(|w| w[0].image_id >= w[1].image_id) {
            return Err(OaprError::Format("index entries are not sorted by unique image id".into()));
        }
        Ok(index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, labels: &[bool]) -> GalleryEntry {
        GalleryEntry {
            image_id: id.into(),
            image_uri: format!("{id}.png"),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn round_trip_and_sorting() {
        let idx = build_index_from_features(
            vec![entry("b", &[true]), entry("a", &[false])],
            vec![Mat::from_elem((2, 3), 0.1), Mat::from_elem((2, 3), -2.0)],
            vec!["x".into()],
            "sha256:00",
            None,
        )
        .unwrap();
        assert_eq!(idx.entries[0].image_id, "a");
        assert_eq!(idx.f_body[0][[0, 0]], -2.0);
        assert_eq!(idx.f_body[1][[1, 2]], 0.1f32 as f64);
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], INDEX_MAGIC);
        let back = GalleryIndex::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        buf.pop();
        assert!(GalleryIndex::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn empty_gallery_is_an_empty_index() {
        let idx = build_index_from_features(vec![], vec![], vec![], "fp", None).unwrap();
        assert!(idx.is_empty());
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert!(GalleryIndex::read_from(&mut buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = build_index_from_features(
            vec![entry("a", &[]), entry("a", &[])],
            vec![Mat::zeros((1, 1)), Mat::zeros((1, 1))],
            vec![],
            "fp",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, OaprError::IndexError(_)));
    }
}
