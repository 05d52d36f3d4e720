//! A small on-disk deployment: PNG gallery, untrained checkpoint over the
//! PA-100K catalog, saved index, and the fixture manifest.
#![allow(dead_code)]

use std::path::PathBuf;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use oapr_core::catalog::{builtin_rules, filter_and_verbalize, AttributeCatalog, SplitManifest, VerbalizationTable};
use oapr_core::encoders::{DualEncoder, ImageTensor};
use oapr_core::harness::{Checkpoint, TrainConfig};
use oapr_core::retrieval::{build_index_from_features, GalleryEntry};
use oapr_service::{Gallery, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

pub const MANIFEST: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/pa100k_manifest.json");

pub fn pa100k_catalog() -> AttributeCatalog {
    let table = VerbalizationTable::parse(builtin_rules("PA-100K").unwrap()).unwrap();
    filter_and_verbalize("PA-100K", &table.raw_names(), &table).unwrap()
}

pub fn fixture_manifest() -> SplitManifest {
    serde_json::from_str(&std::fs::read_to_string(MANIFEST).unwrap()).unwrap()
}

pub struct Deployment {
    pub dir: tempfile::TempDir,
    pub config: ServiceConfig,
    pub ids: Vec<String>,
}

/// `n` noise images with independent random labels, indexed by an untrained
/// checkpoint on the tiny encoder.
pub fn deploy(n: usize, seed: u64) -> Deployment {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    let catalog = pa100k_catalog();
    let manifest = fixture_manifest();
    let encoder = DualEncoder::tiny(0);
    let cfg = TrainConfig {
        epochs: 0,
        seed,
        ..TrainConfig::default()
    };
    let ck = Checkpoint::initial(&cfg, &encoder, &catalog, &manifest).unwrap();
    let model = ck.model_with(encoder).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut feats = Vec::new();
    for i in 0..n {
        let img = image::RgbImage::from_fn(32, 32, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let id = format!("person_{i:03}");
        let uri = format!("images/{id}.png");
        img.save(dir.path().join(&uri)).unwrap();
        feats.push(model.body_features(&ImageTensor::from_rgb(&img, 32)).unwrap());
        entries.push(GalleryEntry {
            image_id: id,
            image_uri: uri,
            labels: (0..catalog.len()).map(|_| rng.random_bool(0.5)).collect(),
        });
    }
    let ids = entries.iter().map(|e| e.image_id.clone()).collect();
    let attrs = catalog.raw_names().map(String::from).collect();
    let index = build_index_from_features(entries, feats, attrs, model.encoder.fingerprint(), Some(ck.fingerprint().unwrap())).unwrap();
    let index_path = dir.path().join("gallery.idx");
    let ck_path = dir.path().join("checkpoint.json");
    index.save(&index_path).unwrap();
    ck.save(&ck_path).unwrap();
    let config = ServiceConfig {
        index: index_path,
        checkpoint: ck_path,
        manifest: Some(PathBuf::from(MANIFEST)),
        image_root: None,
        port: 0,
        cors_origin: None,
    };
    Deployment { dir, config, ids }
}

pub fn ready_router(d: &Deployment) -> Router {
    let g = Gallery::load(&d.config).unwrap();
    oapr_service::router(oapr_service::AppState::ready(g), Some("http://localhost:5173")).unwrap()
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.bytes).unwrap()
    }
}

pub async fn call(router: &Router, req: Request<Body>) -> Reply {
    let res = router.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let content_type = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, content_type, bytes }
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub fn post_json(uri: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}
