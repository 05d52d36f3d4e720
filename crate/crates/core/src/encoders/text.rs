use ndarray::{Array1, Array2};

use super::attention::{AttentionKind, BlockVars, LayerNormVars};
use super::{AttributeContextPrompt, DualEncoder};
use crate::catalog::fnv1a;
use crate::error::{OaprError, Result};
use crate::tape::{Mat, Tape, Var};

/// Turns text into token ids. A byte-pair tokenizer for pre-trained text
/// towers plugs in here.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<usize>;
}

/// Lower-cased words hashed into `vocab_size` buckets.
#[derive(Debug, Clone, Copy)]
pub struct HashTokenizer {
    pub vocab_size: usize,
}

impl Tokenizer for HashTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| (fnv1a(w.as_bytes()) % self.vocab_size as u64) as usize)
            .collect()
    }
}

/// Text that a frozen encoder can embed into one unit vector.
pub trait TextEmbedding {
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;
}

impl DualEncoder {
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenizer.encode(text)
    }

    /// Tokens available to a phrase once `context_len` prompt tokens are prepended.
    pub fn phrase_budget(&self, context_len: usize) -> usize {
        self.weights.text.config.context_limit.saturating_sub(context_len)
    }

    /// Encodes `[context…, phrase tokens…]` and returns a `1 × D` unit row.
    ///
    /// The output is the layer-normed mean of the phrase positions, projected
    /// and L2-normalised.
    pub(crate) fn text_on_tape(&self, tape: &mut Tape, context: Option<Var>, phrase: &str) -> Result<Var> {
        let w = &self.weights.text;
        let cfg = w.config;
        let ids = self.tokenize(phrase);
        let ctx_len = context.map_or(0, |c| tape.value(c).nrows());
        let budget = self.phrase_budget(ctx_len);
        if ids.len() > budget {
            return Err(OaprError::ContextOverflow {
                phrase: phrase.to_string(),
                needed: ids.len(),
                budget,
            });
        }
        if ids.is_empty() {
            return Err(OaprError::InvalidArgument(format!("phrase `{phrase}` has no tokens")));
        }
        if let Some(c) = context {
            if tape.value(c).ncols() != cfg.width {
                return Err(OaprError::ShapeMismatch(format!(
                    "context prompt width {} differs from text width {}",
                    tape.value(c).ncols(),
                    cfg.width
                )));
            }
        }
        let mut emb = Mat::zeros((ids.len(), cfg.width));
        for (row, &id) in ids.iter().enumerate() {
            emb.row_mut(row).assign(&w.token_embedding.row(id));
        }
        let phrase_rows = tape.constant(emb);
        let seq = match context {
            Some(c) => tape.concat_rows(&[c, phrase_rows]),
            None => phrase_rows,
        };
        let total = ctx_len + ids.len();
        let pos = tape.constant(w.pos_embedding.slice(ndarray::s![0..total, ..]).to_owned());
        let mut x = tape.add(seq, pos);
        for block in &w.blocks {
            let vars = BlockVars::constants(tape, block);
            x = vars.forward(tape, x, AttentionKind::QueryKey, None);
        }
        let phrase_out = tape.rows(x, ctx_len, total);
        let pooled = tape.col_mean(phrase_out);
        let ln = LayerNormVars::constants(tape, &w.ln_final);
        let pooled = ln.apply(tape, pooled);
        let proj = tape.constant(w.proj.clone());
        let out = tape.matmul(pooled, proj);
        Ok(tape.l2_normalize_rows(out))
    }

    /// Stacks the context-prompted encodings of `phrases` into an `A × D` var.
    pub(crate) fn attributes_on_tape(&self, tape: &mut Tape, context: Var, phrases: &[String]) -> Result<Var> {
        let rows = phrases
            .iter()
            .map(|p| self.text_on_tape(tape, Some(context), p))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(tape.constant(Mat::zeros((0, self.weights.text.config.output_dim))));
        }
        Ok(tape.concat_rows(&rows))
    }

    /// Attribute text features `[context ++ phrase]`, one unit row per phrase.
    /// Phrases never seen during training go through the same path.
    pub fn encode_attributes(&self, context: &AttributeContextPrompt, phrases: &[String]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let ctx = tape.constant(context.tokens.clone());
        let out = self.attributes_on_tape(&mut tape, ctx, phrases)?;
        Ok(tape.value(out).clone())
    }
}

impl TextEmbedding for DualEncoder {
    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let v = self.text_on_tape(&mut tape, None, text)?;
        Ok(tape.value(v).row(0).to_owned())
    }
}

/// Context templates for the body and background class prompts.
pub const PROMPT_TEMPLATES: [&str; 7] = [
    "a photo of a {}.",
    "a low resolution photo of a {}.",
    "a cropped photo of a {}.",
    "a bright photo of a {}.",
    "a blurry photo of a {}.",
    "a close-up photo of a {}.",
    "a photo of the {}.",
];

pub const BODY_CLASSES: [&str; 4] = ["person", "head", "upper body", "lower body"];

pub const BACKGROUND_CLASSES: [&str; 8] = [
    "background",
    "bicycle",
    "bench",
    "road",
    "building",
    "tree",
    "car",
    "wall",
];

/// For each class: embed every filled template, normalise, average, and
/// normalise again.
pub fn prompt_ensemble_text(
    class_names: &[&str],
    templates: &[&str],
    encoder: &dyn TextEmbedding,
) -> Result<Array2<f64>> {
    if templates.is_empty() {
        return Err(OaprError::TemplateError(String::new()));
    }
    if let Some(bad) = templates.iter().find(|t| t.matches("{}").count() != 1) {
        return Err(OaprError::TemplateError(bad.to_string()));
    }
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(class_names.len());
    for class in class_names {
        let mut acc: Option<Array1<f64>> = None;
        for t in templates {
            let mut e = encoder.embed_text(&t.replacen("{}", class, 1))?;
            let n = e.dot(&e).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(OaprError::NonFiniteOutput(format!("text embedding of `{class}`")));
            }
            e /= n;
            acc = Some(match acc {
                Some(a) => a + e,
                None => e,
            });
        }
        let mean = acc.expect("templates non-empty") / templates.len() as f64;
        let n = mean.dot(&mean).sqrt();
        if n < 1e-6 {
            return Err(OaprError::DegenerateEnsemble(class.to_string()));
        }
        rows.push(mean / n);
    }
    let dim = rows.first().map_or(0, Array1::len);
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    Ok(out)
}
