use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{sub_seed, TrainConfig};
use crate::attr_select::SelectionParams;
use crate::catalog::{AttributeCatalog, SplitManifest};
use crate::encoders::{AttributeContextPrompt, BodyPromptBank, DualEncoder};
use crate::error::{OaprError, Result};
use crate::model::OaprModel;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Learned parameters plus everything needed to rebuild and audit the model.
///
/// The JSON form is canonical: loading and saving reproduces the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub body_prompts: BodyPromptBank,
    pub context: AttributeContextPrompt,
    pub selection: SelectionParams,
    pub config: TrainConfig,
    pub catalog: AttributeCatalog,
    pub manifest: SplitManifest,
    pub encoder_fingerprint: String,
    /// `sha256:<hex>` of the JSONL training log, empty string when untrained.
    pub training_log_digest: String,
}

impl Checkpoint {
    /// Freshly initialised parameters for `encoder`, derived from the config seed.
    pub fn initial(
        config: &TrainConfig,
        encoder: &DualEncoder,
        catalog: &AttributeCatalog,
        manifest: &SplitManifest,
    ) -> Result<Self> {
        config.validate()?;
        let v = encoder.vision_config();
        let t = encoder.text_config();
        if config.context_len >= t.context_limit {
            return Err(OaprError::InvalidArgument(format!(
                "context prompt of {} tokens leaves no room in a {}-token text context",
                config.context_len, t.context_limit
            )));
        }
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            body_prompts: BodyPromptBank::init(config.n_body_parts(), v.width, sub_seed(config.seed, 1)),
            context: AttributeContextPrompt::init(config.context_len, t.width, sub_seed(config.seed, 2)),
            selection: SelectionParams::init(
                encoder.embed_dim(),
                encoder.embed_dim(),
                config.selection_heads,
                sub_seed(config.seed, 3),
            )?,
            config: config.clone(),
            catalog: catalog.clone(),
            manifest: manifest.clone(),
            encoder_fingerprint: encoder.fingerprint(),
            training_log_digest: String::new(),
        })
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `sha256:<hex>` of the canonical bytes.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(format!(
            "sha256:{}",
            hex::encode(Sha256::digest(self.to_canonical_json()?.as_bytes()))
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(OaprError::Format(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        ck.selection.validate()?;
        Ok(ck)
    }

    /// Builds the encoder named in the config and checks it is the one the
    /// parameters were trained against.
    pub fn load_encoder(&self) -> Result<DualEncoder> {
        let enc = DualEncoder::from_spec(&self.config.encoder)?;
        let found = enc.fingerprint();
        if found != self.encoder_fingerprint {
            return Err(OaprError::FingerprintMismatch {
                expected: self.encoder_fingerprint.clone(),
                found,
            });
        }
        Ok(enc)
    }

    pub fn model(&self) -> Result<OaprModel> {
        self.model_with(self.load_encoder()?)
    }

    /// Pairs the learned parameters with an already-built encoder.
    pub fn model_with(&self, mut encoder: DualEncoder) -> Result<OaprModel> {
        let found = encoder.fingerprint();
        if found != self.encoder_fingerprint {
            return Err(OaprError::FingerprintMismatch {
                expected: self.encoder_fingerprint.clone(),
                found,
            });
        }
        encoder.mask_prompts = self.config.mask_prompts;
        Ok(OaprModel {
            encoder,
            body_prompts: self.body_prompts.clone(),
            context: self.context.clone(),
            selection: self.selection.clone(),
        })
    }
}
