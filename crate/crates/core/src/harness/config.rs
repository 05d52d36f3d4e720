use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderSpec, BACKGROUND_CLASSES, BODY_CLASSES, PROMPT_TEMPLATES};
use crate::error::{OaprError, Result};
use crate::losses::LossWeights;
use crate::pseudo_body::WeightNormalization;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate of the body prompts and the attribute context prompt.
    pub lr_prompts: f64,
    /// Learning rate of the selection projections.
    pub lr_selection: f64,
    /// Cosine schedule end value, as a fraction of each group's rate.
    pub lr_floor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub body_classes: Vec<String>,
    pub background_classes: Vec<String>,
    pub templates: Vec<String>,
    /// Length of the shared attribute context prompt.
    pub context_len: usize,
    pub selection_heads: usize,
    pub weight_normalization: WeightNormalization,
    /// Keep pre-trained vision tokens blind to the body prompts.
    pub mask_prompts: bool,
    pub encoder: EncoderSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_prompts: 0.005,
            lr_selection: 0.001,
            lr_floor: 0.0,
            batch_size: 32,
            seed: 0,
            loss: LossWeights::default(),
            body_classes: BODY_CLASSES.iter().map(|s| s.to_string()).collect(),
            background_classes: BACKGROUND_CLASSES.iter().map(|s| s.to_string()).collect(),
            templates: PROMPT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            context_len: 66,
            selection_heads: 4,
            weight_normalization: WeightNormalization::Softmax,
            mask_prompts: true,
            encoder: EncoderSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn n_body_parts(&self) -> usize {
        self.body_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OaprError::InvalidArgument(m));
        if !(self.lr_prompts > 0.0 && self.lr_prompts.is_finite()) {
            return bad(format!("lr_prompts must be positive, got {}", self.lr_prompts));
        }
        if !(self.lr_selection > 0.0 && self.lr_selection.is_finite()) {
            return bad(format!("lr_selection must be positive, got {}", self.lr_selection));
        }
        if !(0.0..1.0).contains(&self.lr_floor) {
            return bad(format!("lr_floor must be in [0, 1), got {}", self.lr_floor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.body_classes.is_empty() {
            return bad("at least one body class is required".into());
        }
        if self.body_classes.len() + self.background_classes.len() < 2 {
            return bad("need at least two body/background classes".into());
        }
        if self.context_len == 0 {
            return bad("context_len must be positive".into());
        }
        self.loss.validate()
    }

    pub fn body_refs(&self) -> Vec<&str> {
        self.body_classes.iter().map(String::as_str).collect()
    }

    pub fn background_refs(&self) -> Vec<&str> {
        self.background_classes.iter().map(String::as_str).collect()
    }

    pub fn template_refs(&self) -> Vec<&str> {
        self.templates.iter().map(String::as_str).collect()
    }
}

/// Independent seeds for the separately initialised pieces of a run.
pub(crate) fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
