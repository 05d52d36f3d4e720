//! Python bindings: catalogs, splits, training, indexing, querying and evaluation.

use std::path::{Path, PathBuf};

use oapr_core::catalog::{
    builtin_rules, cluster_attributes, embed_phrases, filter_and_verbalize, partition_clusters, reference_cluster_count,
    AttributeCatalog, HashNgramEmbedder, NovelFraction, SplitManifest, VerbalizationTable,
};
use oapr_core::encoders::DualEncoder;
use oapr_core::harness::{self, synthetic, Checkpoint as CoreCheckpoint, EvalOptions, TrainConfig, TrainExample};
use oapr_core::model::OaprModel;
use oapr_core::retrieval::{self, read_gallery_jsonl, EvalMode, GalleryIndex, RetrievalQuery, ScoreMode};
use oapr_core::OaprError;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

create_exception!(oapr, ContextOverflowError, PyValueError);
create_exception!(oapr, FingerprintError, PyException);

fn to_py(e: OaprError) -> PyErr {
    match e {
        OaprError::Io(err) => PyIOError::new_err(err.to_string()),
        e @ OaprError::ContextOverflow { .. } => ContextOverflowError::new_err(e.to_string()),
        e @ OaprError::FingerprintMismatch { .. } => FingerprintError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Verbalized attribute catalog.
#[pyclass(module = "oapr", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Catalog {
    inner: AttributeCatalog,
}

#[pymethods]
impl Catalog {
    /// Catalog built from a shipped verbalization table (PA-100K, PETA, RAPv1, RAPv2, synthetic).
    #[staticmethod]
    fn builtin(dataset: &str) -> PyResult<Self> {
        let text = builtin_rules(dataset).ok_or_else(|| PyValueError::new_err(format!("no built-in rules for `{dataset}`")))?;
        let table = VerbalizationTable::parse(text).map_err(to_py)?;
        let inner = filter_and_verbalize(dataset, &table.raw_names(), &table).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: AttributeCatalog::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn dataset_name(&self) -> &str {
        &self.inner.dataset_name
    }

    #[getter]
    fn raw_names(&self) -> Vec<String> {
        self.inner.raw_names().map(String::from).collect()
    }

    #[getter]
    fn phrases(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.phrase.clone()).collect()
    }

    #[getter]
    fn filtered_out(&self) -> Vec<String> {
        self.inner.filtered_out.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Catalog({:?}, {} attributes)", self.inner.dataset_name, self.inner.len())
    }
}

/// Base/novel partition of a catalog.
#[pyclass(module = "oapr", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Manifest {
    inner: SplitManifest,
}

#[pymethods]
impl Manifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SplitManifest::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_canonical_json().map_err(to_py)
    }

    #[getter]
    fn base(&self) -> Vec<String> {
        self.inner.base.clone()
    }

    #[getter]
    fn novel(&self) -> Vec<String> {
        self.inner.novel.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("Manifest({} base, {} novel)", self.inner.base.len(), self.inner.novel.len())
    }
}

/// Trained prompts and selection module together with their frozen encoder.
#[pyclass(module = "oapr", frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
    model: OaprModel,
}

impl Checkpoint {
    fn wrap(inner: CoreCheckpoint) -> PyResult<Self> {
        let model = inner.model().map_err(to_py)?;
        Ok(Self { inner, model })
    }
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::wrap(CoreCheckpoint::load(path).map_err(to_py)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn fingerprint(&self) -> PyResult<String> {
        self.inner.fingerprint().map_err(to_py)
    }

    #[getter]
    fn encoder_fingerprint(&self) -> &str {
        &self.inner.encoder_fingerprint
    }

    #[getter]
    fn catalog(&self) -> Catalog {
        Catalog {
            inner: self.inner.catalog.clone(),
        }
    }

    #[getter]
    fn manifest(&self) -> Manifest {
        Manifest {
            inner: self.inner.manifest.clone(),
        }
    }

    /// `N × C` unit attribute features as nested lists; any phrase is accepted.
    fn attribute_features(&self, phrases: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.model.attribute_features(&phrases).map_err(to_py)?;
        Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// Encoded gallery.
#[pyclass(module = "oapr", frozen)]
struct Index {
    inner: GalleryIndex,
}

#[pymethods]
impl Index {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GalleryIndex::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn image_ids(&self) -> Vec<String> {
        self.inner.entries.iter().map(|e| e.image_id.clone()).collect()
    }

    #[getter]
    fn feature_checksum(&self) -> String {
        self.inner.feature_checksum()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Top-`k` `(image_id, combined_score, per_attribute_scores)` for a free-text query.
    #[pyo3(signature = (checkpoint, attributes, k, mode = "mean"))]
    fn query(
        &self,
        py: Python<'_>,
        checkpoint: &Checkpoint,
        attributes: Vec<String>,
        k: usize,
        mode: &str,
    ) -> PyResult<Vec<(String, f64, Vec<f64>)>> {
        let mode: ScoreMode = mode.parse().map_err(to_py)?;
        let query = RetrievalQuery::new(attributes, k).map_err(to_py)?;
        let ranked = py
            .detach(|| retrieval::score_query(&self.inner, &query, &checkpoint.model, mode))
            .map_err(to_py)?;
        Ok(ranked.into_iter().map(|r| (r.image_id, r.combined_score, r.per_attribute)).collect())
    }
}

/// Clusters the catalog's phrases and splits each cluster into base and novel.
#[pyfunction]
#[pyo3(signature = (catalog, seed, clusters = None, novel_fraction = "1/4"))]
fn split(catalog: &Catalog, seed: u64, clusters: Option<usize>, novel_fraction: &str) -> PyResult<Manifest> {
    let cat = &catalog.inner;
    let n = clusters
        .or_else(|| reference_cluster_count(&cat.dataset_name))
        .ok_or_else(|| PyValueError::new_err("no reference cluster count for this dataset; pass clusters="))?;
    let frac: NovelFraction = novel_fraction.parse().map_err(to_py)?;
    let emb = embed_phrases(cat, &HashNgramEmbedder::default()).map_err(to_py)?;
    let asg = cluster_attributes(&emb, n).map_err(to_py)?;
    Ok(Manifest {
        inner: partition_clusters(&asg, cat, seed, frac).map_err(to_py)?,
    })
}

/// Writes the procedural dataset under `directory` and returns its catalog.
#[pyfunction]
#[pyo3(signature = (directory, n_train = 512, n_test = 128, seed = 0))]
fn write_synthetic_dataset(directory: PathBuf, n_train: usize, n_test: usize, seed: u64) -> PyResult<Catalog> {
    Ok(Catalog {
        inner: synthetic::write_synthetic_dataset(directory, n_train, n_test, seed).map_err(to_py)?,
    })
}

/// Trains on the base attributes of `manifest` with images listed in a JSONL gallery.
#[pyfunction]
#[pyo3(signature = (catalog, manifest, gallery, seed, epochs = None, batch_size = None, config_json = None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    catalog: &Catalog,
    manifest: &Manifest,
    gallery: PathBuf,
    seed: u64,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    config_json: Option<&str>,
) -> PyResult<Checkpoint> {
    let mut cfg: TrainConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    let ck = py
        .detach(|| {
            let encoder = DualEncoder::from_spec(&cfg.encoder)?;
            let entries = read_gallery_jsonl(&gallery, &catalog.inner)?;
            let images =
                harness::load_gallery_images(&entries, &parent_dir(&gallery), encoder.vision_config().image_size)?;
            let examples: Vec<TrainExample> =
                entries.iter().zip(&images).map(|(entry, image)| TrainExample { entry, image }).collect();
            harness::run_training(&cfg, &encoder, &catalog.inner, &manifest.inner, &examples, None)
        })
        .map_err(to_py)?;
    Checkpoint::wrap(ck.checkpoint)
}

/// Encodes every image of a JSONL gallery with the checkpoint's body prompts.
#[pyfunction]
fn build_index(py: Python<'_>, checkpoint: &Checkpoint, gallery: PathBuf) -> PyResult<Index> {
    let inner = py
        .detach(|| {
            let entries = read_gallery_jsonl(&gallery, &checkpoint.inner.catalog)?;
            harness::index_gallery(&checkpoint.inner, &checkpoint.model, entries, &parent_dir(&gallery))
        })
        .map_err(to_py)?;
    Ok(Index { inner })
}

/// Base/novel/mixed retrieval report as a dict. Balanced mode when `seed` is given.
#[pyfunction]
#[pyo3(signature = (checkpoint, index, seed = None, ks = vec![1, 5], score_mode = "mean", manifest = None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: &Checkpoint,
    index: &Index,
    seed: Option<u64>,
    ks: Vec<usize>,
    score_mode: &str,
    manifest: Option<&Manifest>,
) -> PyResult<Py<PyAny>> {
    let opts = EvalOptions {
        ks,
        mode: seed.map_or(EvalMode::Full, |seed| EvalMode::Balanced { seed }),
        score_mode: score_mode.parse().map_err(to_py)?,
        ..EvalOptions::default()
    };
    let manifest = manifest.map_or(&checkpoint.inner.manifest, |m| &m.inner);
    let report = py
        .detach(|| harness::evaluate(&checkpoint.inner, &checkpoint.model, manifest, &index.inner, &opts))
        .map_err(to_py)?;
    json_to_py(py, &report)
}

/// Times `n_queries` random two-attribute queries; returns mean/median/max ms.
#[pyfunction]
#[pyo3(signature = (index, checkpoint, n_queries = 64, k = 5, seed = 0))]
fn bench_latency(
    py: Python<'_>,
    index: &Index,
    checkpoint: &Checkpoint,
    n_queries: usize,
    k: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let r = py
        .detach(|| {
            harness::bench_latency(&index.inner, &checkpoint.model, &checkpoint.inner.catalog, n_queries, k, seed)
        })
        .map_err(to_py)?;
    json_to_py(py, &r)
}

/// Mean label precision over queries. `rankings[q]` lists gallery positions.
#[pyfunction]
fn p_at_k_label(rankings: Vec<Vec<usize>>, labels: Vec<Vec<bool>>, queries: Vec<Vec<usize>>, k: usize) -> PyResult<f64> {
    retrieval::p_at_k_label(&rankings, &labels, &queries, k).map_err(to_py)
}

/// Fraction of top-`k` images that carry every attribute of their query.
#[pyfunction]
fn p_at_k_instance(rankings: Vec<Vec<usize>>, labels: Vec<Vec<bool>>, queries: Vec<Vec<usize>>, k: usize) -> PyResult<f64> {
    retrieval::p_at_k_instance(&rankings, &labels, &queries, k).map_err(to_py)
}

#[pymodule]
fn oapr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Catalog>()?;
    m.add_class::<Manifest>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Index>()?;
    m.add("ContextOverflowError", m.py().get_type::<ContextOverflowError>())?;
    m.add("FingerprintError", m.py().get_type::<FingerprintError>())?;
    for f in [
        wrap_pyfunction!(split, m)?,
        wrap_pyfunction!(write_synthetic_dataset, m)?,
        wrap_pyfunction!(train, m)?,
        wrap_pyfunction!(build_index, m)?,
        wrap_pyfunction!(evaluate, m)?,
        wrap_pyfunction!(bench_latency, m)?,
        wrap_pyfunction!(p_at_k_label, m)?,
        wrap_pyfunction!(p_at_k_instance, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
