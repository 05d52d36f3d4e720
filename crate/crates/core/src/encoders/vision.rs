use std::path::Path;

use ndarray::{s, Array3};

use super::attention::{prompt_isolation_mask, AttentionKind, BlockVars, LayerNormVars};
use super::{BodyPromptBank, DualEncoder, VisionOutput};
use crate::error::{OaprError, Result};
use crate::tape::{Mat, Tape, Var};

/// Per-channel normalisation constants of the CLIP image pipeline.
pub const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// A normalised `H × W × 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn zeros(size: usize) -> Self {
        Self {
            pixels: Array3::zeros((size, size, 3)),
        }
    }

    /// Resizes to `size × size` (bilinear) and normalises each channel.
    pub fn from_rgb(img: &image::RgbImage, size: usize) -> Self {
        let resized = if img.width() as usize == size && img.height() as usize == size {
            img.clone()
        } else {
            image::imageops::resize(img, size as u32, size as u32, image::imageops::FilterType::Triangle)
        };
        let pixels = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            let v = resized.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0;
            (v - PIXEL_MEAN[c]) / PIXEL_STD[c]
        });
        Self { pixels }
    }

    pub fn load(path: impl AsRef<Path>, size: usize) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| OaprError::ImageLoad {
            image_id: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb(&img.to_rgb8(), size))
    }
}

/// Flattens non-overlapping patches in grid row-major order; inside a patch
/// values run channel-major, then row, then column.
fn patchify(pixels: &Array3<f64>, patch: usize) -> Mat {
    let grid = pixels.dim().0 / patch;
    let dim = 3 * patch * patch;
    let mut out = Mat::zeros((grid * grid, dim));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let block = pixels.slice(s![gy * patch..(gy + 1) * patch, gx * patch..(gx + 1) * patch, ..]);
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[[row, c * patch * patch + dy * patch + dx]] = block[[dy, dx, c]];
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct VisionVars {
    pub cls: Var,
    pub img: Var,
    pub body: Var,
}

impl DualEncoder {
    /// Runs the vision tower over `[cls, patches…, prompts…]` on `tape`.
    ///
    /// Every block uses the prompt-isolation mask (when enabled); the last
    /// `vv_layers` blocks take value-value attention. Token states after each
    /// block are appended to `hooks` when given.
    pub(crate) fn vision_on_tape(
        &self,
        tape: &mut Tape,
        image: &ImageTensor,
        prompts: Var,
        mut hooks: Option<&mut Vec<Mat>>,
    ) -> Result<VisionVars> {
        let w = &self.weights.vision;
        let cfg = w.config;
        let expected = (cfg.image_size, cfg.image_size, 3);
        if image.pixels.dim() != expected {
            return Err(OaprError::ShapeMismatch(format!(
                "image is {:?}, encoder expects {expected:?}",
                image.pixels.dim()
            )));
        }
        let n_prompts = tape.value(prompts).nrows();
        if tape.value(prompts).ncols() != cfg.width {
            return Err(OaprError::ShapeMismatch(format!(
                "body prompts have width {}, encoder width is {}",
                tape.value(prompts).ncols(),
                cfg.width
            )));
        }
        let l = cfg.n_patches();
        let n_pre = l + 1;

        let patches = tape.constant(patchify(&image.pixels, cfg.patch_size));
        let embed = tape.constant(w.patch_embed.clone());
        let tokens = tape.matmul(patches, embed);
        let cls = tape.constant(w.class_embedding.clone());
        let pre = tape.concat_rows(&[cls, tokens]);
        let pos = tape.constant(w.pos_embedding.clone());
        let pre = tape.add(pre, pos);
        let seq = tape.concat_rows(&[pre, prompts]);
        let ln_pre = LayerNormVars::constants(tape, &w.ln_pre);
        let mut x = ln_pre.apply(tape, seq);

        let mask = self.mask_prompts.then(|| prompt_isolation_mask(n_pre, n_prompts));
        let first_vv = cfg.layers - cfg.vv_layers;
        for (i, block) in w.blocks.iter().enumerate() {
            let vars = BlockVars::constants(tape, block);
            let kind = if i >= first_vv {
                AttentionKind::ValueValue
            } else {
                AttentionKind::QueryKey
            };
            x = vars.forward(tape, x, kind, mask.as_ref());
            if let Some(h) = hooks.as_deref_mut() {
                h.push(tape.value(x).clone());
            }
        }

        let ln_post = LayerNormVars::constants(tape, &w.ln_post);
        let normed = ln_post.apply(tape, x);
        let proj = tape.constant(w.proj.clone());
        let out = tape.matmul(normed, proj);
        let cls = tape.rows(out, 0, 1);
        let img = tape.rows(out, 1, n_pre);
        let body = tape.rows(out, n_pre, n_pre + n_prompts);
        Ok(VisionVars { cls, img, body })
    }

    pub fn encode_image(&self, image: &ImageTensor, prompts: &BodyPromptBank) -> Result<VisionOutput> {
        self.encode_image_inner(image, prompts, None)
    }

    /// Like [`encode_image`](Self::encode_image), also returning the token
    /// states after every transformer block (`[cls, patches…, prompts…]` rows).
    pub fn encode_image_with_hooks(
        &self,
        image: &ImageTensor,
        prompts: &BodyPromptBank,
    ) -> Result<(VisionOutput, Vec<Mat>)> {
        let mut hooks = Vec::new();
        let out = self.encode_image_inner(image, prompts, Some(&mut hooks))?;
        Ok((out, hooks))
    }

    fn encode_image_inner(
        &self,
        image: &ImageTensor,
        prompts: &BodyPromptBank,
        hooks: Option<&mut Vec<Mat>>,
    ) -> Result<VisionOutput> {
        let mut tape = Tape::new();
        let z = tape.constant(prompts.z.clone());
        let vars = self.vision_on_tape(&mut tape, image, z, hooks)?;
        let out = VisionOutput {
            f_cls: tape.value(vars.cls).row(0).to_owned(),
            f_img: tape.value(vars.img).clone(),
            f_img_body: tape.value(vars.body).clone(),
        };
        out.check_finite()?;
        Ok(out)
    }
}

impl VisionOutput {
    pub fn check_finite(&self) -> Result<()> {
        let finite = |m: &Mat| m.iter().all(|v| v.is_finite());
        if !self.f_cls.iter().all(|v| v.is_finite()) || !finite(&self.f_img) || !finite(&self.f_img_body) {
            return Err(OaprError::NonFiniteOutput("vision encoder output".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order_is_channel_row_column() {
        let mut px = Array3::zeros((4, 4, 3));
        px[[2, 3, 1]] = 7.0;
        let p = patchify(&px, 2);
        // Grid cell (1, 1) is row 3; channel 1, dy 0, dx 1 → 4 + 0 + 1.
        assert_eq!(p[[3, 5]], 7.0);
        assert_eq!(p.sum(), 7.0);
    }

    #[test]
    fn rgb_conversion_normalises() {
        let img = image::RgbImage::from_pixel(32, 32, image::Rgb([255, 0, 128]));
        let t = ImageTensor::from_rgb(&img, 32);
        assert!((t.pixels[[0, 0, 0]] - (1.0 - PIXEL_MEAN[0]) / PIXEL_STD[0]).abs() < 1e-12);
        let small = ImageTensor::from_rgb(&img, 16);
        assert_eq!(small.pixels.dim(), (16, 16, 3));
    }
}
