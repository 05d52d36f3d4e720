//! Procedurally rendered colour-block persons.
//!
//! Each 32×32 image shows a figure against a noisy grey background, one
//! garment per patch row: hat, shirt, trousers, shoes. A garment is split into
//! three vertical stripes in shuffled order; stripe `c` shows primary colour
//! `c` with probability ½ and plain dark grey otherwise. That gives twelve
//! independent attributes (`head-Red`, `upper-Blue`, …), each visible in
//! exactly one region.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{
    builtin_rules, cluster_attributes, embed_phrases, filter_and_verbalize, partition_clusters, reference_cluster_count,
    AttributeCatalog, HashNgramEmbedder, NovelFraction, SplitManifest, VerbalizationTable,
};
use crate::error::Result;
use crate::retrieval::{write_gallery_jsonl, GalleryEntry};

pub const SYNTHETIC_SIZE: u32 = 32;
pub const SYNTHETIC_COLORS: [(&str, [u8; 3]); 3] = [("Red", [220, 30, 30]), ("Green", [30, 200, 30]), ("Blue", [30, 30, 220])];
pub const SYNTHETIC_REGIONS: [&str; 4] = ["head", "upper", "lower", "feet"];
/// `(y0, y1, x0, width)` of each garment, inclusive rows.
const GARMENTS: [(u32, u32, u32, u32); 4] = [(1, 6, 12, 9), (8, 15, 8, 16), (16, 23, 10, 12), (25, 30, 9, 15)];

/// Raw attribute names in generation order (region-major).
pub fn synthetic_raw_names() -> Vec<String> {
    SYNTHETIC_REGIONS
        .iter()
        .flat_map(|r| SYNTHETIC_COLORS.iter().map(move |(c, _)| format!("{r}-{c}")))
        .collect()
}

pub fn synthetic_catalog() -> Result<AttributeCatalog> {
    let table = VerbalizationTable::parse(builtin_rules("synthetic").expect("shipped"))?;
    filter_and_verbalize("synthetic", &synthetic_raw_names(), &table)
}

/// Base/novel split of the synthetic catalog: hashed phrase embeddings,
/// three clusters, a quarter of each cluster novel.
pub fn synthetic_manifest(catalog: &AttributeCatalog, seed: u64) -> Result<SplitManifest> {
    let emb = embed_phrases(catalog, &HashNgramEmbedder::default())?;
    let assignment = cluster_attributes(&emb, reference_cluster_count("synthetic").expect("known"))?;
    partition_clusters(&assignment, catalog, seed, NovelFraction::QUARTER)
}

/// Which colours each garment `[head, upper, lower, feet]` carries.
pub type Outfit = [[bool; 3]; 4];

const PLAIN: [u8; 3] = [60, 60, 60];

pub fn random_outfit(rng: &mut impl Rng) -> Outfit {
    let mut o = [[false; 3]; 4];
    for region in &mut o {
        for c in region.iter_mut() {
            *c = rng.random_bool(0.5);
        }
    }
    o
}

pub fn render(outfit: Outfit, rng: &mut impl Rng) -> RgbImage {
    let noise = |rng: &mut dyn rand::RngCore, base: u8, amp: i32| -> u8 {
        (base as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8
    };
    // Stripe order is shuffled per garment so colour identity is not tied to position.
    let stripes: Vec<[[u8; 3]; 3]> = outfit
        .iter()
        .map(|region| {
            let mut cs = [0, 1, 2].map(|c| if region[c] { SYNTHETIC_COLORS[c].1 } else { PLAIN });
            cs.shuffle(rng);
            cs
        })
        .collect();
    let mut img = RgbImage::new(SYNTHETIC_SIZE, SYNTHETIC_SIZE);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let region = GARMENTS
            .iter()
            .position(|&(y0, y1, x0, w)| (y0..=y1).contains(&y) && (x0..x0 + w).contains(&x));
        *px = match region {
            Some(r) => {
                let (_, _, x0, w) = GARMENTS[r];
                let c = stripes[r][((x - x0) * 3 / w) as usize];
                Rgb([noise(rng, c[0], 12), noise(rng, c[1], 12), noise(rng, c[2], 12)])
            }
            None => {
                let g = noise(rng, 128, 40);
                Rgb([g, g, g])
            }
        };
    }
    img
}

/// Labels over `catalog` for an outfit.
pub fn outfit_labels(outfit: Outfit, catalog: &AttributeCatalog) -> Vec<bool> {
    let on: Vec<String> = (0..4)
        .flat_map(|r| {
            (0..3)
                .filter(move |&c| outfit[r][c])
                .map(move |c| format!("{}-{}", SYNTHETIC_REGIONS[r], SYNTHETIC_COLORS[c].0))
        })
        .collect();
    catalog.records.iter().map(|rec| on.contains(&rec.raw_name)).collect()
}

/// `n` images named `{prefix}_{i:04}` with random outfits.
pub fn generate(prefix: &str, n: usize, seed: u64, catalog: &AttributeCatalog) -> Vec<(GalleryEntry, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let outfit = random_outfit(&mut rng);
            let img = render(outfit, &mut rng);
            let id = format!("{prefix}_{i:04}");
            let entry = GalleryEntry {
                image_uri: format!("images/{id}.png"),
                image_id: id,
                labels: outfit_labels(outfit, catalog),
            };
            (entry, img)
        })
        .collect()
}

/// Writes `images/*.png`, `train.jsonl`, `test.jsonl` and `catalog.json` under `dir`.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, n_train: usize, n_test: usize, seed: u64) -> Result<AttributeCatalog> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let catalog = synthetic_catalog()?;
    for (name, n, s) in [("train", n_train, seed), ("test", n_test, seed.wrapping_add(1))] {
        let items = generate(name, n, s, &catalog);
        for (e, img) in &items {
            img.save(dir.join(&e.image_uri)).map_err(|err| crate::OaprError::ImageLoad {
                image_id: e.image_id.clone(),
                message: err.to_string(),
            })?;
        }
        let entries: Vec<GalleryEntry> = items.into_iter().map(|(e, _)| e).collect();
        write_gallery_jsonl(dir.join(format!("{name}.jsonl")), &entries, &catalog)?;
    }
    catalog.save(dir.join("catalog.json"))?;
    Ok(catalog)
}
