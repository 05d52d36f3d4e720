//! Pseudo body-part features and their distillation target.
//!
//! The body and background class texts are stacked into `f_text_bb`
//! (`(N+M) × C`, body rows first). Removing their mean leaves each class's
//! distinctive direction; scoring every patch against it and normalising over
//! patches gives a per-class activation map, and the map-weighted patch average
//! serves as the teacher for each learnable body prompt.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{OaprError, Result};
use crate::tape::{masked_softmax, Mat, Tape, Var};

/// How the per-patch class scores are turned into weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightNormalization {
    /// Row-wise softmax over patches.
    #[default]
    Softmax,
    /// Raw scores, kept for ablation.
    Raw,
}

/// `(N+M) × L` class-by-patch weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassWeights {
    pub w: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBodyFeature {
    /// `N × C`, one row per body class.
    pub f_hat_body: Mat,
}

/// Mean over the class rows.
pub fn common_feature(f_text_bb: &Mat) -> Result<Array1<f64>> {
    if f_text_bb.nrows() < 2 {
        return Err(OaprError::InvalidArgument(format!(
            "need at least two class rows, got {}",
            f_text_bb.nrows()
        )));
    }
    Ok(f_text_bb.mean_axis(Axis(0)).expect("non-empty"))
}

/// Class-minus-common scores against every patch, normalised over patches.
pub fn patch_class_weights(f_img: &Mat, f_text_bb: &Mat) -> Result<PatchClassWeights> {
    patch_class_weights_with(f_img, f_text_bb, WeightNormalization::Softmax)
}

pub fn patch_class_weights_with(
    f_img: &Mat,
    f_text_bb: &Mat,
    norm: WeightNormalization,
) -> Result<PatchClassWeights> {
    if f_img.ncols() != f_text_bb.ncols() {
        return Err(OaprError::ShapeMismatch(format!(
            "patch features have {} channels, class features {}",
            f_img.ncols(),
            f_text_bb.ncols()
        )));
    }
    let common = common_feature(f_text_bb)?;
    let diff = f_text_bb - &common.insert_axis(Axis(0));
    let scores = diff.dot(&f_img.t());
    let w = match norm {
        WeightNormalization::Softmax => masked_softmax(&scores, None),
        WeightNormalization::Raw => scores,
    };
    Ok(PatchClassWeights { w })
}

/// `f̂ = W · f_img`, keeping the rows listed in `body_rows`.
pub fn pseudo_features(weights: &PatchClassWeights, f_img: &Mat, body_rows: &[usize]) -> Result<PseudoBodyFeature> {
    let (k, l) = weights.w.dim();
    if l != f_img.nrows() {
        return Err(OaprError::ShapeMismatch(format!(
            "weights cover {l} patches, features have {}",
            f_img.nrows()
        )));
    }
    if let Some(&bad) = body_rows.iter().find(|&&r| r >= k) {
        return Err(OaprError::IndexError(format!("body row {bad} out of range for {k} classes")));
    }
    let mut seen = vec![false; k];
    for &r in body_rows {
        if std::mem::replace(&mut seen[r], true) {
            return Err(OaprError::IndexError(format!("body row {r} listed twice")));
        }
    }
    let selected = weights.w.select(Axis(0), body_rows);
    Ok(PseudoBodyFeature {
        f_hat_body: selected.dot(f_img),
    })
}

/// Mean squared difference over all elements.
pub fn distill_loss(f_img_body: &Mat, f_hat_body: &Mat) -> Result<f64> {
    check_same(f_img_body, f_hat_body)?;
    let d = f_img_body - f_hat_body;
    Ok(d.mapv(|x| x * x).mean().unwrap_or(0.0))
}

/// [`distill_loss`] on the tape; the target is detached.
pub fn distill_loss_on_tape(tape: &mut Tape, f_img_body: Var, f_hat_body: Var) -> Result<Var> {
    check_same(tape.value(f_img_body), tape.value(f_hat_body))?;
    let target = tape.detach(f_hat_body);
    let d = tape.sub(f_img_body, target);
    let sq = tape.mul(d, d);
    Ok(tape.mean(sq))
}

fn check_same(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(OaprError::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

#[derive(Serialize)]
struct ActivationSidecar<'a> {
    image_id: &'a str,
    grid: usize,
    classes: Vec<ActivationMap<'a>>,
}

#[derive(Serialize)]
struct ActivationMap<'a> {
    class: &'a str,
    file: String,
    weights: Vec<f64>,
}

/// Writes one grayscale PGM per body class (the class's weight row laid out on
/// the `grid × grid` patch grid, scaled so the row maximum is white) plus a
/// `<image_id>.activations.json` sidecar with the raw rows.
pub fn dump_activation_maps(
    dir: impl AsRef<Path>,
    image_id: &str,
    weights: &PatchClassWeights,
    grid: usize,
    body_classes: &[&str],
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if weights.w.ncols() != grid * grid {
        return Err(OaprError::ShapeMismatch(format!(
            "{} patches do not form a {grid}×{grid} grid",
            weights.w.ncols()
        )));
    }
    if body_classes.len() > weights.w.nrows() {
        return Err(OaprError::IndexError("more class names than weight rows".into()));
    }
    std::fs::create_dir_all(dir)?;
    let stem: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let mut written = Vec::new();
    let mut maps = Vec::new();
    for (k, class) in body_classes.iter().enumerate() {
        let row = weights.w.row(k);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let min = row.iter().cloned().fold(f64::MAX, f64::min).min(0.0);
        let span = (max - min).max(f64::MIN_POSITIVE);
        let file = format!("{stem}.{}.pgm", class.replace(' ', "_"));
        let path = dir.join(&file);
        let mut f = std::fs::File::create(&path)?;
        write!(f, "P5\n{grid} {grid}\n255\n")?;
        let bytes: Vec<u8> = row.iter().map(|&v| (((v - min) / span) * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
        written.push(path);
        maps.push(ActivationMap {
            class,
            file,
            weights: row.to_vec(),
        });
    }
    let sidecar = ActivationSidecar {
        image_id,
        grid,
        classes: maps,
    };
    let path = dir.join(format!("{stem}.activations.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?)?;
    written.push(path);
    Ok(written)
}
