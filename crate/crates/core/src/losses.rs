//! Training objectives: attribute–body association, weighted text-to-image
//! contrast, and their combination with the distillation term.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{OaprError, Result};
use crate::tape::{Mat, Tape, Var};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_distill: f64,
    pub lambda_aba: f64,
    pub tau: f64,
    pub w_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_distill: 0.4,
            lambda_aba: 0.1,
            tau: 0.07,
            w_neg: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_distill, self.lambda_aba, self.tau, self.w_neg];
        if all.iter().any(|v| !v.is_finite()) || self.lambda_distill < 0.0 || self.lambda_aba < 0.0 {
            return Err(OaprError::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        if self.tau <= 0.0 || self.w_neg <= 0.0 {
            return Err(OaprError::InvalidArgument("tau and w_neg must be positive".into()));
        }
        Ok(())
    }
}

/// `B × A` indicator of which batch image carries which attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAttributeLabels {
    pub y: Array2<bool>,
}

impl BatchAttributeLabels {
    pub fn batch_size(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_attributes(&self) -> usize {
        self.y.ncols()
    }

    /// Attributes with at least one positive image in the batch.
    pub fn active(&self) -> Vec<usize> {
        (0..self.y.ncols()).filter(|&i| self.y.column(i).iter().any(|&b| b)).collect()
    }
}

/// Normalised multi-hot rows: an attribute linked to `k` body parts puts `1/k`
/// on each of them.
pub fn aba_targets(body_parts: &[&BTreeSet<usize>], n_parts: usize) -> Result<Mat> {
    let mut t = Mat::zeros((body_parts.len(), n_parts));
    for (i, parts) in body_parts.iter().enumerate() {
        if parts.is_empty() {
            return Err(OaprError::InvalidArgument(format!("attribute {i} has no body part")));
        }
        if let Some(&bad) = parts.iter().find(|&&j| j >= n_parts) {
            return Err(OaprError::IndexError(format!("body part {bad} of attribute {i}, only {n_parts} parts")));
        }
        let w = 1.0 / parts.len() as f64;
        for &j in *parts {
            t[[i, j]] = w;
        }
    }
    Ok(t)
}

/// `(1/A) Σᵢ Σⱼ −targets[i][j]·log p[i][j]`, log clamped at `1e-12`.
pub fn aba_loss_on_tape(tape: &mut Tape, p: Var, targets: &Mat) -> Result<Var> {
    if tape.value(p).dim() != targets.dim() {
        return Err(OaprError::ShapeMismatch(format!(
            "attention is {:?}, targets {:?}",
            tape.value(p).dim(),
            targets.dim()
        )));
    }
    let a = targets.nrows().max(1);
    let logp = tape.log(p, LOG_FLOOR);
    let t = tape.constant(targets.clone());
    let prod = tape.mul(logp, t);
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / a as f64))
}

pub fn aba_loss(p: &Mat, targets: &Mat) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = aba_loss_on_tape(&mut tape, pv, targets)?;
    Ok(tape.scalar(l))
}

/// Weighted text-to-image contrast.
///
/// For every attribute `i` with a batch positive, with cosine similarities
/// `sim(b, i)` between image `b`'s attribute-`i` feature and the attribute text:
/// `−log(S⁺ / (S⁺ + w_neg·S⁻))`, where `S±` sum `exp(sim/τ)` over positive /
/// negative images. Contributions are summed.
pub fn t2i_loss_on_tape(
    tape: &mut Tape,
    f_att_img_batch: &[Var],
    f_text_att: Var,
    labels: &BatchAttributeLabels,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let (a, c) = tape.value(f_text_att).dim();
    let b = f_att_img_batch.len();
    if b == 0 || labels.y.dim() != (b, a) {
        return Err(OaprError::ShapeMismatch(format!(
            "{b} batch features, {a} attributes, labels {:?}",
            labels.y.dim()
        )));
    }
    for &f in f_att_img_batch {
        if tape.value(f).dim() != (a, c) {
            return Err(OaprError::ShapeMismatch(format!(
                "attribute image features {:?}, expected {:?}",
                tape.value(f).dim(),
                (a, c)
            )));
        }
    }
    let active = labels.active();
    if active.is_empty() {
        return Err(OaprError::DegenerateBatch(format!(
            "none of the {a} attributes has a positive among {b} images"
        )));
    }
    let text = tape.l2_normalize_rows(f_text_att);
    let cols: Vec<Var> = f_att_img_batch
        .iter()
        .map(|&f| {
            let img = tape.l2_normalize_rows(f);
            tape.row_dot(img, text)
        })
        .collect();
    let sims = tape.concat_cols(&cols);
    let scaled = tape.scale(sims, 1.0 / w.tau);
    let e = tape.exp(scaled);
    let pos = Mat::from_shape_fn((a, b), |(i, j)| if labels.y[[j, i]] { 1.0 } else { 0.0 });
    let neg = pos.mapv(|v| (1.0 - v) * w.w_neg);
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let ep = tape.mul(e, pos);
    let s_pos = tape.row_sum(ep);
    let en = tape.mul(e, neg);
    let s_neg = tape.row_sum(en);
    let mut select = Mat::zeros((active.len(), a));
    for (r, &i) in active.iter().enumerate() {
        select[[r, i]] = 1.0;
    }
    let select = tape.constant(select);
    let s_pos = tape.matmul(select, s_pos);
    let s_neg = tape.matmul(select, s_neg);
    let denom = tape.add(s_pos, s_neg);
    let log_d = tape.log(denom, LOG_FLOOR);
    let log_p = tape.log(s_pos, LOG_FLOOR);
    let per = tape.sub(log_d, log_p);
    Ok(tape.sum(per))
}

pub fn t2i_contrastive_loss(
    f_att_img_batch: &[Mat],
    f_text_att: &Mat,
    labels: &BatchAttributeLabels,
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let batch: Vec<Var> = f_att_img_batch.iter().map(|m| tape.constant(m.clone())).collect();
    let t = tape.constant(f_text_att.clone());
    let l = t2i_loss_on_tape(&mut tape, &batch, t, labels, w)?;
    Ok(tape.scalar(l))
}

/// `l_t2i + λ_distill·l_distill + λ_aba·l_aba`.
pub fn total_loss(l_t2i: f64, l_distill: f64, l_aba: f64, w: &LossWeights) -> Result<f64> {
    let total = l_t2i + w.lambda_distill * l_distill + w.lambda_aba * l_aba;
    if !total.is_finite() || ![l_t2i, l_distill, l_aba].iter().all(|v| v.is_finite()) {
        return Err(OaprError::NonFiniteLoss(format!(
            "t2i {l_t2i}, distill {l_distill}, aba {l_aba}"
        )));
    }
    Ok(total)
}

pub fn total_loss_on_tape(tape: &mut Tape, l_t2i: Var, l_distill: Var, l_aba: Var, w: &LossWeights) -> Var {
    let d = tape.scale(l_distill, w.lambda_distill);
    let a = tape.scale(l_aba, w.lambda_aba);
    let s = tape.add(l_t2i, d);
    tape.add(s, a)
}
