use std::io::Write;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::{sub_seed, TrainConfig};
use super::optim::{cosine_lr, Adam};
use crate::attr_select::{cross_attend_on_tape, SelectionVars};
use crate::catalog::{AttributeCatalog, AttributeSplit, SplitManifest};
use crate::encoders::{DualEncoder, ImageTensor};
use crate::error::{OaprError, Result};
use crate::losses::{aba_loss_on_tape, aba_targets, t2i_loss_on_tape, total_loss, total_loss_on_tape, BatchAttributeLabels};
use crate::pseudo_body::{distill_loss_on_tape, patch_class_weights_with, pseudo_features};
use crate::retrieval::GalleryEntry;
use crate::tape::{Mat, Tape};

/// Loss values of one step or one epoch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_t2i: f64,
    pub l_distill: f64,
    pub l_aba: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogLine {
    Step {
        epoch: usize,
        step: usize,
        lr_prompts: f64,
        lr_selection: f64,
        #[serde(flatten)]
        losses: LossRecord,
    },
    Epoch {
        epoch: usize,
        #[serde(flatten)]
        losses: LossRecord,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean losses per epoch.
    pub epochs: Vec<LossRecord>,
    /// The JSONL training log.
    pub log: String,
}

/// One training example: a preprocessed image and its labels over the catalog.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub entry: &'a GalleryEntry,
    pub image: &'a ImageTensor,
}

/// Trains body prompts, context prompt and selection projections on the
/// manifest's base attributes. The encoder is never modified.
///
/// Batches are drawn from a seeded shuffle per epoch; with the same inputs two
/// runs produce bit-identical checkpoints. `log` receives the JSONL lines as
/// they are produced.
pub fn run_training(
    config: &TrainConfig,
    encoder: &DualEncoder,
    catalog: &AttributeCatalog,
    manifest: &SplitManifest,
    examples: &[TrainExample<'_>],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut ck = Checkpoint::initial(config, encoder, catalog, manifest)?;
    let mut encoder = encoder.clone();
    encoder.mask_prompts = config.mask_prompts;

    let base: Vec<usize> = catalog
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| manifest.split_of(&r.raw_name) == Some(AttributeSplit::Base))
        .map(|(i, _)| i)
        .collect();
    if base.len() != manifest.base.len() {
        let missing: Vec<&String> = manifest.base.iter().filter(|b| catalog.get(b).is_none()).collect();
        return Err(OaprError::InvalidArgument(format!("base attributes missing from the catalog: {missing:?}")));
    }
    catalog.check_body_parts(config.n_body_parts())?;
    let phrases: Vec<String> = base.iter().map(|&i| catalog.records[i].phrase.clone()).collect();
    let parts: Vec<_> = base.iter().map(|&i| &catalog.records[i].body_parts).collect();
    let targets = aba_targets(&parts, config.n_body_parts())?;
    for ex in examples {
        if ex.entry.labels.len() != catalog.len() {
            return Err(OaprError::ShapeMismatch(format!(
                "`{}` has {} labels, catalog has {}",
                ex.entry.image_id,
                ex.entry.labels.len(),
                catalog.len()
            )));
        }
    }

    let (f_body_cls, f_back_cls) =
        encoder.class_features(&config.body_refs(), &config.background_refs(), &config.template_refs())?;
    let f_text_bb = concatenate(Axis(0), &[f_body_cls.view(), f_back_cls.view()]).expect("same width");
    let body_rows: Vec<usize> = (0..config.n_body_parts()).collect();

    let n = examples.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 4));
    let shapes = [
        ck.body_prompts.z.dim(),
        ck.context.tokens.dim(),
        ck.selection.w_q.dim(),
        ck.selection.w_k.dim(),
        ck.selection.w_v.dim(),
        ck.selection.w_o.dim(),
    ];
    let mut adam = Adam::new(&shapes);
    let mut log_text = String::new();
    let mut emit = |line: &LogLine, log: &mut Option<&mut dyn Write>| -> Result<()> {
        let s = serde_json::to_string(line)?;
        log_text.push_str(&s);
        log_text.push('\n');
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{s}")?;
        }
        Ok(())
    };
    let mut epoch_means = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sum = LossRecord::default();
        for batch in order.chunks(config.batch_size) {
            let lr_p = cosine_lr(config.lr_prompts, config.lr_floor, step, total_steps);
            let lr_s = cosine_lr(config.lr_selection, config.lr_floor, step, total_steps);
            let mut tape = Tape::new();
            let z = tape.param(ck.body_prompts.z.clone());
            let ctx = tape.param(ck.context.tokens.clone());
            let sel = SelectionVars::params(&mut tape, &ck.selection);
            let f_text_att = encoder.attributes_on_tape(&mut tape, ctx, &phrases)?;

            let mut att_feats = Vec::with_capacity(batch.len());
            let mut distills = Vec::with_capacity(batch.len());
            let mut abas = Vec::with_capacity(batch.len());
            let mut y = Array2::from_elem((batch.len(), base.len()), false);
            for (row, &i) in batch.iter().enumerate() {
                let ex = &examples[i];
                for (col, &a) in base.iter().enumerate() {
                    y[[row, col]] = ex.entry.labels[a];
                }
                let vis = encoder.vision_on_tape(&mut tape, ex.image, z, None)?;
                let f_img = tape.value(vis.img).clone();
                let w = patch_class_weights_with(&f_img, &f_text_bb, config.weight_normalization)?;
                let f_hat = pseudo_features(&w, &f_img, &body_rows)?.f_hat_body;
                let f_hat = tape.constant(f_hat);
                distills.push(distill_loss_on_tape(&mut tape, vis.body, f_hat)?);
                let (f_att, p) = cross_attend_on_tape(&mut tape, f_text_att, vis.body, &sel)?;
                abas.push(aba_loss_on_tape(&mut tape, p, &targets)?);
                att_feats.push(f_att);
            }
            let labels = BatchAttributeLabels { y };
            let l_t2i = t2i_loss_on_tape(&mut tape, &att_feats, f_text_att, &labels, &config.loss).map_err(|e| match e {
                OaprError::DegenerateBatch(m) => OaprError::DegenerateBatch(format!(
                    "{m}; step {step}, batch {:?}",
                    batch.iter().map(|&i| examples[i].entry.image_id.as_str()).collect::<Vec<_>>()
                )),
                other => other,
            })?;
            let inv_b = 1.0 / batch.len() as f64;
            let d_sum = tape.concat_rows(&distills);
            let d_sum = tape.sum(d_sum);
            let l_distill = tape.scale(d_sum, inv_b);
            let a_sum = tape.concat_rows(&abas);
            let a_sum = tape.sum(a_sum);
            let l_aba = tape.scale(a_sum, inv_b);
            let l_total = total_loss_on_tape(&mut tape, l_t2i, l_distill, l_aba, &config.loss);

            let rec = LossRecord {
                l_t2i: tape.scalar(l_t2i),
                l_distill: tape.scalar(l_distill),
                l_aba: tape.scalar(l_aba),
                l_total: tape.scalar(l_total),
            };
            emit(
                &LogLine::Step {
                    epoch,
                    step,
                    lr_prompts: lr_p,
                    lr_selection: lr_s,
                    losses: rec,
                },
                &mut log,
            )?;
            total_loss(rec.l_t2i, rec.l_distill, rec.l_aba, &config.loss)
                .map_err(|e| OaprError::NonFiniteLoss(format!("step {step}: {e}")))?;

            let grads = tape.backward(l_total);
            let g: Vec<Mat> = [z, ctx, sel.w_q, sel.w_k, sel.w_v, sel.w_o]
                .iter()
                .zip(&shapes)
                .map(|(&v, &s)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(s)))
                .collect();
            let sp = &mut ck.selection;
            adam.step(
                &mut [
                    &mut ck.body_prompts.z,
                    &mut ck.context.tokens,
                    &mut sp.w_q,
                    &mut sp.w_k,
                    &mut sp.w_v,
                    &mut sp.w_o,
                ],
                &g,
                &[lr_p, lr_p, lr_s, lr_s, lr_s, lr_s],
            );
            sum.l_t2i += rec.l_t2i;
            sum.l_distill += rec.l_distill;
            sum.l_aba += rec.l_aba;
            sum.l_total += rec.l_total;
            step += 1;
        }
        let k = steps_per_epoch.max(1) as f64;
        let mean = LossRecord {
            l_t2i: sum.l_t2i / k,
            l_distill: sum.l_distill / k,
            l_aba: sum.l_aba / k,
            l_total: sum.l_total / k,
        };
        emit(&LogLine::Epoch { epoch, losses: mean }, &mut log)?;
        epoch_means.push(mean);
    }
    if config.epochs > 0 {
        ck.training_log_digest = format!("sha256:{}", hex::encode(Sha256::digest(log_text.as_bytes())));
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        epochs: epoch_means,
        log: log_text,
    })
}
