//! Frozen vision and text towers with learnable prompt slots.

mod attention;
mod text;
mod vision;
mod weights;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{prompt_isolation_mask, qk_attention_block, vv_attention_block, AttentionKind, AttentionOutput};
pub use text::{
    prompt_ensemble_text, HashTokenizer, TextEmbedding, Tokenizer, BACKGROUND_CLASSES, BODY_CLASSES,
    PROMPT_TEMPLATES,
};
pub use vision::{ImageTensor, PIXEL_MEAN, PIXEL_STD};
pub use weights::{
    gaussian, AttentionParams, BlockParams, DualEncoderWeights, LayerNormParams, TextConfig, TextWeights,
    VisionConfig, VisionWeights,
};

use crate::error::Result;
use crate::tape::Mat;

const PROMPT_INIT_STD: f64 = 0.02;

/// Learnable body-part prompt tokens `Z`, one row per body part, in the
/// vision tower's token width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyPromptBank {
    #[serde(with = "crate::matrix_serde")]
    pub z: Mat,
}

impl BodyPromptBank {
    pub fn init(n_parts: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            z: gaussian(&mut rng, n_parts, width, PROMPT_INIT_STD),
        }
    }

    pub fn n_parts(&self) -> usize {
        self.z.nrows()
    }
}

/// Learnable context tokens prepended to every attribute phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeContextPrompt {
    #[serde(with = "crate::matrix_serde")]
    pub tokens: Mat,
}

impl AttributeContextPrompt {
    pub fn init(length: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            tokens: gaussian(&mut rng, length, width, PROMPT_INIT_STD),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Projected outputs of one image pass.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionOutput {
    /// Global `[CLS]` feature.
    pub f_cls: Array1<f64>,
    /// One row per patch, `L × D`.
    pub f_img: Mat,
    /// One row per body prompt, `N × D`.
    pub f_img_body: Mat,
}

/// Text-side features used during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeaturePack {
    /// `N × D` ensemble features of the body-part classes.
    pub f_text_body: Mat,
    /// `M × D` ensemble features of the background classes.
    pub f_text_back: Mat,
    /// `A × D` context-prompted attribute features.
    pub f_text_att: Mat,
}

/// Where the frozen weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderSpec {
    /// Seeded reference weights with the tiny configuration.
    Tiny { seed: u64 },
    /// Weights exported to safetensors with the tensor names of this crate.
    Safetensors { path: PathBuf },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Tiny { seed: 0 }
    }
}

/// A frozen dual encoder. Weights never change after construction.
#[derive(Clone)]
pub struct DualEncoder {
    pub weights: DualEncoderWeights,
    pub tokenizer: Arc<dyn Tokenizer>,
    /// Keep pre-trained tokens blind to prompt tokens in the vision tower.
    pub mask_prompts: bool,
}

impl std::fmt::Debug for DualEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualEncoder")
            .field("vision", &self.weights.vision.config)
            .field("text", &self.weights.text.config)
            .field("mask_prompts", &self.mask_prompts)
            .finish_non_exhaustive()
    }
}

impl DualEncoder {
    pub fn new(weights: DualEncoderWeights) -> Self {
        let vocab_size = weights.text.config.vocab_size;
        Self {
            weights,
            tokenizer: Arc::new(HashTokenizer { vocab_size }),
            mask_prompts: true,
        }
    }

    pub fn tiny(seed: u64) -> Self {
        Self::new(DualEncoderWeights::tiny(seed))
    }

    pub fn from_spec(spec: &EncoderSpec) -> Result<Self> {
        match spec {
            EncoderSpec::Tiny { seed } => Ok(Self::tiny(*seed)),
            EncoderSpec::Safetensors { path } => Ok(Self::new(DualEncoderWeights::load_safetensors(path)?)),
        }
    }

    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint()
    }

    pub fn vision_config(&self) -> VisionConfig {
        self.weights.vision.config
    }

    pub fn text_config(&self) -> TextConfig {
        self.weights.text.config
    }

    /// Shared embedding dimension `D` of both towers.
    pub fn embed_dim(&self) -> usize {
        self.weights.vision.config.output_dim
    }

    /// Ensemble text features for `(body classes, background classes)`.
    pub fn class_features(&self, body: &[&str], background: &[&str], templates: &[&str]) -> Result<(Mat, Mat)> {
        Ok((
            prompt_ensemble_text(body, templates, self)?,
            prompt_ensemble_text(background, templates, self)?,
        ))
    }

    pub fn text_features(
        &self,
        context: &AttributeContextPrompt,
        phrases: &[String],
        body: &[&str],
        background: &[&str],
        templates: &[&str],
    ) -> Result<TextFeaturePack> {
        let (f_text_body, f_text_back) = self.class_features(body, background, templates)?;
        Ok(TextFeaturePack {
            f_text_body,
            f_text_back,
            f_text_att: self.encode_attributes(context, phrases)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::OaprError;

    #[test]
    fn shapes_of_the_tiny_encoder() {
        let enc = DualEncoder::tiny(0);
        let bank = BodyPromptBank::init(4, 32, 1);
        let out = enc.encode_image(&ImageTensor::zeros(32), &bank).unwrap();
        assert_eq!(out.f_cls.len(), 32);
        assert_eq!(out.f_img.dim(), (16, 32));
        assert_eq!(out.f_img_body.dim(), (4, 32));
        let ctx = AttributeContextPrompt::init(66, 32, 2);
        let att = enc
            .encode_attributes(&ctx, &["Wearing a hat".into(), "Carrying a backpack".into()])
            .unwrap();
        assert_eq!(att.dim(), (2, 32));
        for r in att.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn long_phrase_overflows_the_context() {
        let enc = DualEncoder::tiny(0);
        let ctx = AttributeContextPrompt::init(74, 32, 2);
        let err = enc
            .encode_attributes(&ctx, &["one two three four".into()])
            .unwrap_err();
        assert!(matches!(err, OaprError::ContextOverflow { needed: 4, budget: 3, .. }));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = EncoderSpec::Safetensors { path: "w.safetensors".into() };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"kind":"safetensors","path":"w.safetensors"}"#);
        assert_eq!(serde_json::from_str::<EncoderSpec>(&j).unwrap(), s);
    }
}
