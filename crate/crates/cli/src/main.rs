use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{concatenate, Axis};
use oapr_core::catalog::{
    builtin_rules, cluster_attributes, embed_phrases, filter_and_verbalize, partition_clusters, reference_cluster_count,
    AttributeCatalog, HashNgramEmbedder, NovelFraction, PhraseEmbedder, PrecomputedEmbedder, SplitManifest,
    VerbalizationTable,
};
use oapr_core::encoders::{DualEncoder, EncoderSpec, ImageTensor};
use oapr_core::harness::synthetic::write_synthetic_dataset;
use oapr_core::harness::{
    bench_latency, evaluate, index_gallery, load_gallery_images, run_training, Checkpoint, EvalOptions, TrainConfig,
    TrainExample,
};
use oapr_core::pseudo_body::{dump_activation_maps, patch_class_weights_with};
use oapr_core::retrieval::{read_gallery_jsonl, EvalMode, GalleryIndex, ScoreMode};
use oapr_service::{ServiceConfig, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "oapr", version, about = "Open-attribute person retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and verbalize a dataset's raw attribute names into a catalog.
    BuildCatalog(BuildCatalogArgs),
    /// Cluster a catalog's phrases and partition each cluster into base/novel.
    Split(SplitArgs),
    /// Write the procedural synthetic dataset (images, JSONL labels, catalog).
    Synth(SynthArgs),
    /// Train prompts and the selection module on the base attributes.
    Train(TrainArgs),
    /// Encode a gallery into an index file.
    Index(IndexArgs),
    /// Compute P@K-lbl and P@K-ins on base, novel and mixed queries.
    Eval(EvalArgs),
    /// Serve the retrieval HTTP API.
    Serve(ServeArgs),
    /// Time end-to-end queries against an index.
    BenchLatency(BenchArgs),
    /// Write per-body-class patch activation maps for one image.
    DumpActivation(DumpArgs),
}

#[derive(Args)]
struct BuildCatalogArgs {
    /// Dataset name, e.g. PA-100K, PETA, RAPv1, RAPv2, synthetic.
    #[arg(long)]
    dataset: String,
    /// Verbalization table (TSV); defaults to the built-in table for the dataset.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// File with one raw attribute name per line; defaults to every name in the table.
    #[arg(long)]
    raw_names: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Number of clusters; defaults to the reference count for known datasets.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value = "1/4")]
    novel_fraction: NovelFraction,
    /// JSON object phrase → vector; defaults to the hashed n-gram embedder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 128)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Training gallery (JSONL); image URIs resolve against its directory.
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    seed: u64,
    /// JSON training config; command-line values override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Frozen encoder weights in safetensors format; defaults to the tiny seeded encoder.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Where to write the JSONL training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Balanced,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Overrides the manifest stored in the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Balanced)]
    mode: Mode,
    /// Required in balanced mode.
    #[arg(long, required_if_eq("mode", "balanced"))]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    k: Vec<usize>,
    #[arg(long, default_value = "mean")]
    score_mode: ScoreMode,
    #[arg(long, default_value_t = 2)]
    query_size: usize,
    /// Write the full JSON report here; a summary is always printed.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "OAPR_INDEX")]
    index: PathBuf,
    #[arg(long, env = "OAPR_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "OAPR_MANIFEST")]
    manifest: Option<PathBuf>,
    #[arg(long, env = "OAPR_IMAGE_ROOT")]
    image_root: Option<PathBuf>,
    #[arg(long, env = "OAPR_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "OAPR_CORS_ORIGIN")]
    cors_origin: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of timed queries.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::BuildCatalog(a) => build_catalog(a),
        Command::Split(a) => split(a),
        Command::Synth(a) => {
            let catalog = write_synthetic_dataset(&a.out, a.train, a.test, a.seed)?;
            println!("wrote {} + {} images, {} attributes to {}", a.train, a.test, catalog.len(), a.out.display());
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Index(a) => index(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::BenchLatency(a) => bench(a),
        Command::DumpActivation(a) => dump(a),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn build_catalog(a: BuildCatalogArgs) -> Result<()> {
    let table = match &a.rules {
        Some(p) => VerbalizationTable::load(p)?,
        None => {
            let text = builtin_rules(&a.dataset)
                .with_context(|| format!("no built-in rules for `{}`; pass --rules", a.dataset))?;
            VerbalizationTable::parse(text)?
        }
    };
    let raw = match &a.raw_names {
        Some(p) => std::fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => table.raw_names(),
    };
    let catalog = filter_and_verbalize(&a.dataset, &raw, &table)?;
    catalog.save(&a.out)?;
    println!(
        "{}: {} attributes kept, {} filtered out -> {}",
        catalog.dataset_name,
        catalog.len(),
        catalog.filtered_out.len(),
        a.out.display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let catalog = AttributeCatalog::load(&a.catalog)?;
    let n_clusters = match a.clusters.or_else(|| reference_cluster_count(&catalog.dataset_name)) {
        Some(n) => n,
        None => bail!("no reference cluster count for `{}`; pass --clusters", catalog.dataset_name),
    };
    let embedder: Box<dyn PhraseEmbedder> = match &a.embeddings {
        Some(p) => Box::new(PrecomputedEmbedder::load(p)?),
        None => Box::new(HashNgramEmbedder::default()),
    };
    let emb = embed_phrases(&catalog, embedder.as_ref())?;
    let assignment = cluster_attributes(&emb, n_clusters)?;
    let manifest = partition_clusters(&assignment, &catalog, a.seed, a.novel_fraction)?;
    manifest.save(&a.out)?;
    println!(
        "{} clusters: {} base / {} novel -> {}",
        n_clusters,
        manifest.base.len(),
        manifest.novel.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).context("reading training config")?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = a.encoder {
        cfg.encoder = EncoderSpec::Safetensors { path: p };
    }
    let catalog = AttributeCatalog::load(&a.catalog)?;
    let manifest = SplitManifest::load(&a.manifest)?;
    let encoder = DualEncoder::from_spec(&cfg.encoder)?;
    let entries = read_gallery_jsonl(&a.gallery, &catalog)?;
    let images = load_gallery_images(&entries, &parent_dir(&a.gallery), encoder.vision_config().image_size)?;
    let examples: Vec<TrainExample> = entries.iter().zip(&images).map(|(entry, image)| TrainExample { entry, image }).collect();

    let mut log = a.log.as_ref().map(File::create).transpose()?.map(BufWriter::new);
    let out = run_training(&cfg, &encoder, &catalog, &manifest, &examples, log.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    out.checkpoint.save(&a.out)?;
    if let Some(last) = out.epochs.last() {
        println!(
            "{} epochs, final loss {:.4} (t2i {:.4}, distill {:.4}, aba {:.4})",
            out.epochs.len(),
            last.l_total,
            last.l_t2i,
            last.l_distill,
            last.l_aba
        );
    }
    println!("checkpoint {} -> {}", out.checkpoint.fingerprint()?, a.out.display());
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let entries = read_gallery_jsonl(&a.gallery, &ck.catalog)?;
    let idx = index_gallery(&ck, &model, entries, &parent_dir(&a.gallery))?;
    idx.save(&a.out)?;
    println!("{} images, features {} -> {}", idx.len(), idx.feature_checksum(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let manifest = match &a.manifest {
        Some(p) => SplitManifest::load(p)?,
        None => ck.manifest.clone(),
    };
    let index = GalleryIndex::load(&a.index)?;
    let mode = match (a.mode, a.seed) {
        (Mode::Full, _) => EvalMode::Full,
        (Mode::Balanced, Some(seed)) => EvalMode::Balanced { seed },
        (Mode::Balanced, None) => bail!("--seed is required in balanced mode"),
    };
    let opts = EvalOptions {
        ks: a.k,
        mode,
        score_mode: a.score_mode,
        query_size: a.query_size,
    };
    let report = evaluate(&ck, &model, &manifest, &index, &opts)?;
    for (split, m) in &report.splits {
        let fmt = |v: &std::collections::BTreeMap<usize, f64>| {
            v.iter().map(|(k, p)| format!("@{k} {p:.4}")).collect::<Vec<_>>().join(" ")
        };
        println!(
            "{:<6} queries {:>4} (skipped {}): P-lbl {} | P-ins {}",
            split.name(),
            m.n_queries,
            m.n_skipped,
            fmt(&m.p_at_k_label),
            fmt(&m.p_at_k_instance)
        );
    }
    if let Some(p) = a.out {
        std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
        println!("report -> {}", p.display());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        index: a.index,
        checkpoint: a.checkpoint,
        manifest: a.manifest,
        image_root: a.image_root,
        port: a.port,
        cors_origin: a.cors_origin,
    };
    tokio::runtime::Runtime::new()?.block_on(oapr_service::serve(cfg))?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let index = GalleryIndex::load(&a.index)?;
    let r = bench_latency(&index, &model, &ck.catalog, a.batch, a.k, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let cfg = &ck.config;
    let image = ImageTensor::load(&a.image, model.image_size())?;
    let out = model.encoder.encode_image(&image, &model.body_prompts)?;
    let (body, back) = model
        .encoder
        .class_features(&cfg.body_refs(), &cfg.background_refs(), &cfg.template_refs())?;
    let bb = concatenate(Axis(0), &[body.view(), back.view()])?;
    let w = patch_class_weights_with(&out.f_img, &bb, cfg.weight_normalization)?;
    let id = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let grid = model.encoder.vision_config().grid();
    for p in dump_activation_maps(&a.out, id, &w, grid, &cfg.body_refs())? {
        println!("{}", p.display());
    }
    Ok(())
}
