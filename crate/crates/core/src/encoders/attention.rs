use ndarray::Array2;

use super::weights::{AttentionParams, BlockParams, LayerNormParams};
use crate::error::{OaprError, Result};
use crate::tape::{Mat, Tape, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Source of the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// `softmax(Q·Kᵀ/√d)`, the pre-trained form.
    QueryKey,
    /// `softmax(V·Vᵀ/√d)`, which favours diagonal attention and keeps local detail.
    ValueValue,
}

pub(crate) struct AttentionVars {
    w_q: Var,
    b_q: Var,
    w_k: Var,
    b_k: Var,
    w_v: Var,
    b_v: Var,
    w_o: Var,
    b_o: Var,
    n_heads: usize,
}

impl AttentionVars {
    pub(crate) fn constants(tape: &mut Tape, p: &AttentionParams) -> Self {
        Self {
            w_q: tape.constant(p.w_q.clone()),
            b_q: tape.constant(p.b_q.clone()),
            w_k: tape.constant(p.w_k.clone()),
            b_k: tape.constant(p.b_k.clone()),
            w_v: tape.constant(p.w_v.clone()),
            b_v: tape.constant(p.b_v.clone()),
            w_o: tape.constant(p.w_o.clone()),
            b_o: tape.constant(p.b_o.clone()),
            n_heads: p.n_heads,
        }
    }
}

pub(crate) struct LayerNormVars {
    gamma: Var,
    beta: Var,
}

impl LayerNormVars {
    pub(crate) fn constants(tape: &mut Tape, p: &LayerNormParams) -> Self {
        Self {
            gamma: tape.constant(p.gamma.clone()),
            beta: tape.constant(p.beta.clone()),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.mul_row(n, self.gamma);
        tape.add_row(g, self.beta)
    }
}

pub(crate) struct BlockVars {
    ln_1: LayerNormVars,
    attn: AttentionVars,
    ln_2: LayerNormVars,
    w_fc: Var,
    b_fc: Var,
    w_proj: Var,
    b_proj: Var,
}

impl BlockVars {
    pub(crate) fn constants(tape: &mut Tape, b: &BlockParams) -> Self {
        Self {
            ln_1: LayerNormVars::constants(tape, &b.ln_1),
            attn: AttentionVars::constants(tape, &b.attn),
            ln_2: LayerNormVars::constants(tape, &b.ln_2),
            w_fc: tape.constant(b.w_fc.clone()),
            b_fc: tape.constant(b.b_fc.clone()),
            w_proj: tape.constant(b.w_proj.clone()),
            b_proj: tape.constant(b.b_proj.clone()),
        }
    }

    /// Pre-norm residual block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        kind: AttentionKind,
        mask: Option<&Array2<bool>>,
    ) -> Var {
        let h = self.ln_1.apply(tape, x);
        let a = attend(tape, h, &self.attn, kind, mask, None);
        let x1 = tape.add(x, a);
        let h2 = self.ln_2.apply(tape, x1);
        let fc = tape.matmul(h2, self.w_fc);
        let fc = tape.add_row(fc, self.b_fc);
        let act = tape.quick_gelu(fc);
        let pr = tape.matmul(act, self.w_proj);
        let pr = tape.add_row(pr, self.b_proj);
        tape.add(x1, pr)
    }
}

/// Multi-head self-attention on the tape. Per-head attention maps are pushed
/// into `weights` when requested.
pub(crate) fn attend(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    kind: AttentionKind,
    mask: Option<&Array2<bool>>,
    mut weights: Option<&mut Vec<Mat>>,
) -> Var {
    let width = tape.value(x).ncols();
    let dh = width / p.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let v = tape.matmul(x, p.w_v);
    let v = tape.add_row(v, p.b_v);
    let (q, k) = match kind {
        AttentionKind::ValueValue => (v, v),
        AttentionKind::QueryKey => {
            let q = tape.matmul(x, p.w_q);
            let q = tape.add_row(q, p.b_q);
            let k = tape.matmul(x, p.w_k);
            let k = tape.add_row(k, p.b_k);
            (q, k)
        }
    };
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.cols(q, lo, hi);
        let kh = if k == q { qh } else { tape.cols(k, lo, hi) };
        let vh = if v == q { qh } else { tape.cols(v, lo, hi) };
        let logits = tape.matmul_t(qh, kh);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits, mask);
        if let Some(w) = weights.as_deref_mut() {
            w.push(tape.value(attn).clone());
        }
        heads.push(tape.matmul(attn, vh));
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    let out = tape.matmul(cat, p.w_o);
    tape.add_row(out, p.b_o)
}

/// Result of a stand-alone attention layer.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Mat,
    /// One `T × T` map per head.
    pub weights: Vec<Mat>,
}

fn check_attention(tokens: &Mat, mask: Option<&Array2<bool>>, params: &AttentionParams) -> Result<()> {
    let (t, c) = tokens.dim();
    if params.n_heads == 0 || c % params.n_heads != 0 {
        return Err(OaprError::ShapeMismatch(format!(
            "width {c} is not divisible by {} heads",
            params.n_heads
        )));
    }
    for (name, m, rows) in [
        ("w_q", &params.w_q, c),
        ("w_k", &params.w_k, c),
        ("w_v", &params.w_v, c),
        ("w_o", &params.w_o, c),
        ("b_q", &params.b_q, 1),
        ("b_k", &params.b_k, 1),
        ("b_v", &params.b_v, 1),
        ("b_o", &params.b_o, 1),
    ] {
        if m.dim() != (rows, c) {
            return Err(OaprError::ShapeMismatch(format!(
                "{name} is {:?}, expected ({rows}, {c})",
                m.dim()
            )));
        }
    }
    if let Some(mask) = mask {
        if mask.dim() != (t, t) {
            return Err(OaprError::ShapeMismatch(format!(
                "mask is {:?} for {t} tokens",
                mask.dim()
            )));
        }
        if (0..t).any(|i| !mask[[i, i]]) {
            return Err(OaprError::InvalidArgument("mask must allow every token to see itself".into()));
        }
    }
    Ok(())
}

/// Value-value self-attention layer over `T × C` tokens.
///
/// Row `i` attends with weights `softmax_j(v_i·v_j/√d)` restricted to
/// `mask[i][j]`; the mixed values are projected by `W_O`.
pub fn vv_attention_block(tokens: &Mat, mask: &Array2<bool>, params: &AttentionParams) -> Result<AttentionOutput> {
    check_attention(tokens, Some(mask), params)?;
    run_attention(tokens, Some(mask), params, AttentionKind::ValueValue)
}

/// Standard query-key self-attention layer.
pub fn qk_attention_block(tokens: &Mat, mask: Option<&Array2<bool>>, params: &AttentionParams) -> Result<AttentionOutput> {
    check_attention(tokens, mask, params)?;
    run_attention(tokens, mask, params, AttentionKind::QueryKey)
}

fn run_attention(
    tokens: &Mat,
    mask: Option<&Array2<bool>>,
    params: &AttentionParams,
    kind: AttentionKind,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let vars = AttentionVars::constants(&mut tape, params);
    let mut weights = Vec::new();
    let out = attend(&mut tape, x, &vars, kind, mask, Some(&mut weights));
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        weights,
    })
}

/// Mask for `[pre-trained tokens…, prompts…]`: pre-trained tokens never see
/// prompt tokens, prompt tokens see everything.
pub fn prompt_isolation_mask(n_pretrained: usize, n_prompts: usize) -> Array2<bool> {
    let t = n_pretrained + n_prompts;
    Array2::from_shape_fn((t, t), |(i, j)| i >= n_pretrained || j < n_pretrained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_token_passes_through_identity_projections() {
        let x = array![[0.3, -1.0, 2.0, 0.5]];
        let out = vv_attention_block(&x, &array![[true]], &AttentionParams::identity(4, 1)).unwrap();
        assert_eq!(out.output, x);
        assert_eq!(out.weights[0][[0, 0]], 1.0);
    }

    #[test]
    fn unit_value_rows_put_the_maximum_on_the_diagonal() {
        let mut x: Mat = array![[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.0, 0.0, 1.0]];
        for mut r in x.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        let mask = Array2::from_elem((4, 4), true);
        let out = vv_attention_block(&x, &mask, &AttentionParams::identity(3, 1)).unwrap();
        let w = &out.weights[0];
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(w[[i, i]] > w[[i, j]]);
                }
            }
            assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolation_mask_shape() {
        let m = prompt_isolation_mask(2, 1);
        assert_eq!(m, array![[true, true, false], [true, true, false], [true, true, true]]);
    }

    #[test]
    fn mask_without_diagonal_is_rejected() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let mask = array![[false, true], [true, true]];
        assert!(vv_attention_block(&x, &mask, &AttentionParams::identity(2, 1)).is_err());
    }
}
