//! Frozen transformer weights for the dual encoders.
//!
//! Matrices are stored `in × out`, row-major, channels last, so a token row
//! `x` maps to `x · W`. The same layout is used by the safetensors adapter:
//! pre-trained checkpoints must be exported with their projection matrices
//! transposed into this orientation.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OaprError, Result};
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of trailing blocks whose attention uses value-value similarity.
    pub vv_layers: usize,
    pub output_dim: usize,
}

impl VisionConfig {
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            width: 32,
            layers: 2,
            heads: 2,
            vv_layers: 1,
            output_dim: 32,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
            || self.heads == 0
            || !self.width.is_multiple_of(self.heads)
            || self.vv_layers > self.layers
        {
            return Err(OaprError::InvalidArgument(format!("invalid vision config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_limit: usize,
    pub output_dim: usize,
}

impl TextConfig {
    pub fn tiny() -> Self {
        Self {
            vocab_size: 4096,
            width: 32,
            layers: 2,
            heads: 2,
            context_limit: 77,
            output_dim: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(OaprError::InvalidArgument(format!("invalid text config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Mat,
    pub beta: Mat,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Mat::ones((1, width)),
            beta: Mat::zeros((1, width)),
        }
    }
}

/// Projections of one multi-head attention layer, all `width × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub b_q: Mat,
    pub w_k: Mat,
    pub b_k: Mat,
    pub w_v: Mat,
    pub b_v: Mat,
    pub w_o: Mat,
    pub b_o: Mat,
    pub n_heads: usize,
}

impl AttentionParams {
    /// Identity projections with zero bias.
    pub fn identity(width: usize, n_heads: usize) -> Self {
        let eye = Mat::eye(width);
        let zero = Mat::zeros((1, width));
        Self {
            w_q: eye.clone(),
            b_q: zero.clone(),
            w_k: eye.clone(),
            b_k: zero.clone(),
            w_v: eye.clone(),
            b_v: zero.clone(),
            w_o: eye,
            b_o: zero,
            n_heads,
        }
    }

    pub fn width(&self) -> usize {
        self.w_v.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln_1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_2: LayerNormParams,
    pub w_fc: Mat,
    pub b_fc: Mat,
    pub w_proj: Mat,
    pub b_proj: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights {
    pub config: VisionConfig,
    pub patch_embed: Mat,
    pub class_embedding: Mat,
    pub pos_embedding: Mat,
    pub ln_pre: LayerNormParams,
    pub blocks: Vec<BlockParams>,
    pub ln_post: LayerNormParams,
    pub proj: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextWeights {
    pub config: TextConfig,
    pub token_embedding: Mat,
    pub pos_embedding: Mat,
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    pub proj: Mat,
}

/// Both towers of a frozen dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderWeights {
    pub vision: VisionWeights,
    pub text: TextWeights,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        Mat::from_shape_simple_fn((rows, cols), || {
            let z: f64 = self.rng.sample(StandardNormal);
            z * std
        })
    }

    /// A per-channel mean filter shared by every pixel of the patch plus a
    /// smaller pixel-specific random part, so colour is readable from a token
    /// wherever in the patch it sits (a stand-in for learned colour-blob filters).
    fn patch_embed(&mut self, patch: usize, width: usize) -> Mat {
        let area = patch * patch;
        let colour = self.normal(3, width, 1.0 / area as f64);
        let mut w = self.normal(3 * area, width, 0.5 / ((3 * area) as f64).sqrt());
        for (r, mut row) in w.rows_mut().into_iter().enumerate() {
            row += &colour.row(r / area);
        }
        w
    }

    fn attention(&mut self, width: usize, heads: usize) -> AttentionParams {
        let s = 1.0 / (width as f64).sqrt();
        let zero = Mat::zeros((1, width));
        AttentionParams {
            w_q: self.normal(width, width, s),
            b_q: zero.clone(),
            w_k: self.normal(width, width, s),
            b_k: zero.clone(),
            w_v: self.normal(width, width, s),
            b_v: zero.clone(),
            w_o: self.normal(width, width, 0.5 * s),
            b_o: zero,
            n_heads: heads,
        }
    }

    fn block(&mut self, width: usize, heads: usize) -> BlockParams {
        let hidden = 4 * width;
        BlockParams {
            ln_1: LayerNormParams::identity(width),
            attn: self.attention(width, heads),
            ln_2: LayerNormParams::identity(width),
            w_fc: self.normal(width, hidden, 1.0 / (width as f64).sqrt()),
            b_fc: Mat::zeros((1, hidden)),
            w_proj: self.normal(hidden, width, 0.5 / (hidden as f64).sqrt()),
            b_proj: Mat::zeros((1, width)),
        }
    }
}

impl DualEncoderWeights {
    /// Seeded reference weights for the tiny encoder; no download required.
    pub fn random(vision: VisionConfig, text: TextConfig, seed: u64) -> Result<Self> {
        vision.validate()?;
        text.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let vw = vision.width;
        let vision_weights = VisionWeights {
            config: vision,
            patch_embed: init.patch_embed(vision.patch_size, vw),
            class_embedding: init.normal(1, vw, 1.0),
            pos_embedding: init.normal(vision.n_patches() + 1, vw, 1.0),
            ln_pre: LayerNormParams::identity(vw),
            blocks: (0..vision.layers).map(|_| init.block(vw, vision.heads)).collect(),
            ln_post: LayerNormParams::identity(vw),
            proj: init.normal(vw, vision.output_dim, 1.0 / (vw as f64).sqrt()),
        };
        let tw = text.width;
        let text_weights = TextWeights {
            config: text,
            token_embedding: init.normal(text.vocab_size, tw, 1.0),
            pos_embedding: init.normal(text.context_limit, tw, 0.5),
            blocks: (0..text.layers).map(|_| init.block(tw, text.heads)).collect(),
            ln_final: LayerNormParams::identity(tw),
            proj: init.normal(tw, text.output_dim, 1.0 / (tw as f64).sqrt()),
        };
        Ok(Self {
            vision: vision_weights,
            text: text_weights,
        })
    }

    pub fn tiny(seed: u64) -> Self {
        Self::random(VisionConfig::tiny(), TextConfig::tiny(), seed).expect("tiny config is valid")
    }

    /// Named tensors in canonical order.
    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = Vec::new();
        let v = &self.vision;
        out.push(("visual.patch_embed".into(), &v.patch_embed));
        out.push(("visual.class_embedding".into(), &v.class_embedding));
        out.push(("visual.pos_embedding".into(), &v.pos_embedding));
        push_ln(&mut out, "visual.ln_pre", &v.ln_pre);
        for (i, b) in v.blocks.iter().enumerate() {
            push_block(&mut out, &format!("visual.blocks.{i}"), b);
        }
        push_ln(&mut out, "visual.ln_post", &v.ln_post);
        out.push(("visual.proj".into(), &v.proj));
        let t = &self.text;
        out.push(("text.token_embedding".into(), &t.token_embedding));
        out.push(("text.pos_embedding".into(), &t.pos_embedding));
        for (i, b) in t.blocks.iter().enumerate() {
            push_block(&mut out, &format!("text.blocks.{i}"), b);
        }
        push_ln(&mut out, "text.ln_final", &t.ln_final);
        out.push(("text.proj".into(), &t.proj));
        out
    }

    /// `sha256:<hex>` over tensor names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(self.vision.config, self.text.config)).expect("configs serialize"));
        for (name, m) in self.named() {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        format!("sha256:{}", hex::encode(h.finalize()))
    }

    /// Writes a safetensors file (F64 tensors, configs and head counts in metadata).
    pub fn save_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.named();
        let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = named
            .iter()
            .map(|(n, m)| {
                let bytes = m.iter().flat_map(|x| x.to_le_bytes()).collect();
                (n.clone(), bytes, vec![m.nrows(), m.ncols()])
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(n, b, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| OaprError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("vision_config".to_string(), serde_json::to_string(&self.vision.config)?);
        meta.insert("text_config".to_string(), serde_json::to_string(&self.text.config)?);
        safetensors::serialize_to_file(views, Some(meta), path.as_ref())
            .map_err(|e| OaprError::Format(e.to_string()))
    }

    /// Loads weights exported in the documented layout (F32 or F64 tensors).
    pub fn load_safetensors(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| OaprError::Format(e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| OaprError::Format("safetensors file lacks encoder metadata".into()))?;
        let get_meta = |k: &str| {
            meta.get(k)
                .ok_or_else(|| OaprError::Format(format!("missing metadata `{k}`")))
        };
        let vision: VisionConfig = serde_json::from_str(get_meta("vision_config")?)?;
        let text: TextConfig = serde_json::from_str(get_meta("text_config")?)?;
        vision.validate()?;
        text.validate()?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| OaprError::Format(e.to_string()))?;
        let load = |name: &str, rows: usize, cols: usize| -> Result<Mat> {
            let t = st
                .tensor(name)
                .map_err(|e| OaprError::Format(format!("{name}: {e}")))?;
            let shape = t.shape();
            if shape != [rows, cols] {
                return Err(OaprError::ShapeMismatch(format!(
                    "{name}: expected [{rows}, {cols}], found {shape:?}"
                )));
            }
            let data: Vec<f64> = match t.dtype() {
                Dtype::F64 => t
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => t
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => {
                    return Err(OaprError::Format(format!("{name}: unsupported dtype {other:?}")))
                }
            };
            Mat::from_shape_vec((rows, cols), data).map_err(|e| OaprError::Format(e.to_string()))
        };
        let ln = |prefix: &str, w: usize| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: load(&format!("{prefix}.weight"), 1, w)?,
                beta: load(&format!("{prefix}.bias"), 1, w)?,
            })
        };
        let block = |prefix: &str, w: usize, heads: usize| -> Result<BlockParams> {
            let a = |n: &str, r: usize| load(&format!("{prefix}.attn.{n}"), r, w);
            Ok(BlockParams {
                ln_1: ln(&format!("{prefix}.ln_1"), w)?,
                attn: AttentionParams {
                    w_q: a("q_proj.weight", w)?,
                    b_q: a("q_proj.bias", 1)?,
                    w_k: a("k_proj.weight", w)?,
                    b_k: a("k_proj.bias", 1)?,
                    w_v: a("v_proj.weight", w)?,
                    b_v: a("v_proj.bias", 1)?,
                    w_o: a("out_proj.weight", w)?,
                    b_o: a("out_proj.bias", 1)?,
                    n_heads: heads,
                },
                ln_2: ln(&format!("{prefix}.ln_2"), w)?,
                w_fc: load(&format!("{prefix}.mlp.c_fc.weight"), w, 4 * w)?,
                b_fc: load(&format!("{prefix}.mlp.c_fc.bias"), 1, 4 * w)?,
                w_proj: load(&format!("{prefix}.mlp.c_proj.weight"), 4 * w, w)?,
                b_proj: load(&format!("{prefix}.mlp.c_proj.bias"), 1, w)?,
            })
        };
        let vw = vision.width;
        let vision_weights = VisionWeights {
            config: vision,
            patch_embed: load("visual.patch_embed", vision.patch_dim(), vw)?,
            class_embedding: load("visual.class_embedding", 1, vw)?,
            pos_embedding: load("visual.pos_embedding", vision.n_patches() + 1, vw)?,
            ln_pre: ln("visual.ln_pre", vw)?,
            blocks: (0..vision.layers)
                .map(|i| block(&format!("visual.blocks.{i}"), vw, vision.heads))
                .collect::<Result<_>>()?,
            ln_post: ln("visual.ln_post", vw)?,
            proj: load("visual.proj", vw, vision.output_dim)?,
        };
        let tw = text.width;
        let text_weights = TextWeights {
            config: text,
            token_embedding: load("text.token_embedding", text.vocab_size, tw)?,
            pos_embedding: load("text.pos_embedding", text.context_limit, tw)?,
            blocks: (0..text.layers)
                .map(|i| block(&format!("text.blocks.{i}"), tw, text.heads))
                .collect::<Result<_>>()?,
            ln_final: ln("text.ln_final", tw)?,
            proj: load("text.proj", tw, text.output_dim)?,
        };
        Ok(Self {
            vision: vision_weights,
            text: text_weights,
        })
    }
}

fn push_ln<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: &str, ln: &'a LayerNormParams) {
    out.push((format!("{prefix}.weight"), &ln.gamma));
    out.push((format!("{prefix}.bias"), &ln.beta));
}

fn push_block<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: &str, b: &'a BlockParams) {
    push_ln(out, &format!("{prefix}.ln_1"), &b.ln_1);
    let a = &b.attn;
    for (n, m) in [
        ("q_proj.weight", &a.w_q),
        ("q_proj.bias", &a.b_q),
        ("k_proj.weight", &a.w_k),
        ("k_proj.bias", &a.b_k),
        ("v_proj.weight", &a.w_v),
        ("v_proj.bias", &a.b_v),
        ("out_proj.weight", &a.w_o),
        ("out_proj.bias", &a.b_o),
    ] {
        out.push((format!("{prefix}.attn.{n}"), m));
    }
    push_ln(out, &format!("{prefix}.ln_2"), &b.ln_2);
    out.push((format!("{prefix}.mlp.c_fc.weight"), &b.w_fc));
    out.push((format!("{prefix}.mlp.c_fc.bias"), &b.b_fc));
    out.push((format!("{prefix}.mlp.c_proj.weight"), &b.w_proj));
    out.push((format!("{prefix}.mlp.c_proj.bias"), &b.b_proj));
}

/// Gaussian matrix with the given standard deviation, drawn from `rng`.
pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}
