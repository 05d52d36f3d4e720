//! Attribute-conditioned pooling over body-part features.
//!
//! Each attribute's text feature queries the `N` body features of an image;
//! the attended mixture becomes the image's feature for that attribute and the
//! head-averaged attention distribution `p` says which body part it looked at.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::gaussian;
use crate::error::{OaprError, Result};
use crate::tape::{Mat, Tape, Var};

/// Bias-free multi-head cross-attention projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    #[serde(with = "crate::matrix_serde")]
    pub w_q: Mat,
    #[serde(with = "crate::matrix_serde")]
    pub w_k: Mat,
    #[serde(with = "crate::matrix_serde")]
    pub w_v: Mat,
    #[serde(with = "crate::matrix_serde")]
    pub w_o: Mat,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutput {
    /// `A × C` attribute-conditioned image features.
    pub f_att_img: Mat,
    /// `A × N` head-averaged attention over body parts.
    pub p: Mat,
}

impl SelectionParams {
    /// Orthogonal initialisation (Gram–Schmidt of a seeded Gaussian matrix).
    pub fn init(c: usize, d_model: usize, n_heads: usize, seed: u64) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(OaprError::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_q = orthogonal(&mut rng, c, d_model);
        let w_k = orthogonal(&mut rng, c, d_model);
        let w_v = orthogonal(&mut rng, c, d_model);
        let w_o = orthogonal(&mut rng, d_model, c);
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
        })
    }

    /// Identity projections, for checks and ablations.
    pub fn identity(c: usize, n_heads: usize) -> Self {
        let eye = Mat::eye(c);
        Self {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            n_heads,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = self.w_q.dim();
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(OaprError::ShapeMismatch(format!(
                "d_model {d} is not divisible by {} heads",
                self.n_heads
            )));
        }
        for (name, m, want) in [
            ("w_k", &self.w_k, (c, d)),
            ("w_v", &self.w_v, (c, d)),
            ("w_o", &self.w_o, (d, c)),
        ] {
            if m.dim() != want {
                return Err(OaprError::ShapeMismatch(format!("{name} is {:?}, expected {want:?}", m.dim())));
            }
        }
        if [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
            .iter()
            .any(|m| m.iter().any(|v| !v.is_finite()))
        {
            return Err(OaprError::InvalidArgument("selection parameters are not finite".into()));
        }
        Ok(())
    }
}

/// `rows × cols` matrix with orthonormal columns (or rows, when wide).
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let mut m = gaussian(rng, r, c, 1.0);
    for j in 0..c {
        for k in 0..j {
            let dot = m.column(j).dot(&m.column(k));
            let prev = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-dot, &prev);
        }
        let n = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / n);
    }
    if tall {
        m
    } else {
        m.reversed_axes()
    }
}

/// Tape handles for the four projections.
#[derive(Debug, Clone, Copy)]
pub struct SelectionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub n_heads: usize,
}

impl SelectionVars {
    pub fn params(tape: &mut Tape, p: &SelectionParams) -> Self {
        Self {
            w_q: tape.param(p.w_q.clone()),
            w_k: tape.param(p.w_k.clone()),
            w_v: tape.param(p.w_v.clone()),
            w_o: tape.param(p.w_o.clone()),
            n_heads: p.n_heads,
        }
    }

    pub fn constants(tape: &mut Tape, p: &SelectionParams) -> Self {
        Self {
            w_q: tape.constant(p.w_q.clone()),
            w_k: tape.constant(p.w_k.clone()),
            w_v: tape.constant(p.w_v.clone()),
            w_o: tape.constant(p.w_o.clone()),
            n_heads: p.n_heads,
        }
    }
}

/// Returns `(f_att_img, p)` vars.
pub fn cross_attend_on_tape(tape: &mut Tape, f_text_att: Var, f_img_body: Var, vars: &SelectionVars) -> Result<(Var, Var)> {
    let c = tape.value(vars.w_q).nrows();
    for (what, v) in [("attribute features", f_text_att), ("body features", f_img_body)] {
        if tape.value(v).ncols() != c {
            return Err(OaprError::ShapeMismatch(format!(
                "{what} have {} channels, projections expect {c}",
                tape.value(v).ncols()
            )));
        }
    }
    if tape.value(f_img_body).nrows() == 0 {
        return Err(OaprError::ShapeMismatch("no body features to attend over".into()));
    }
    let d = tape.value(vars.w_q).ncols();
    let h = vars.n_heads;
    let dk = d / h;
    let q = tape.matmul(f_text_att, vars.w_q);
    let k = tape.matmul(f_img_body, vars.w_k);
    let v = tape.matmul(f_img_body, vars.w_v);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(h);
    let mut p_sum: Option<Var> = None;
    for head in 0..h {
        let (lo, hi) = (head * dk, (head + 1) * dk);
        let qh = tape.cols(q, lo, hi);
        let kh = tape.cols(k, lo, hi);
        let vh = tape.cols(v, lo, hi);
        let logits = tape.matmul_t(qh, kh);
        let logits = tape.scale(logits, scale);
        let ph = tape.softmax_rows(logits, None);
        outs.push(tape.matmul(ph, vh));
        p_sum = Some(match p_sum {
            Some(acc) => tape.add(acc, ph),
            None => ph,
        });
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let out = tape.matmul(cat, vars.w_o);
    let p = tape.scale(p_sum.expect("at least one head"), 1.0 / h as f64);
    Ok((out, p))
}

pub fn cross_attend(f_text_att: &Mat, f_img_body: &Mat, params: &SelectionParams) -> Result<SelectionOutput> {
    params.validate()?;
    let mut tape = Tape::new();
    let t = tape.constant(f_text_att.clone());
    let b = tape.constant(f_img_body.clone());
    let vars = SelectionVars::constants(&mut tape, params);
    let (out, p) = cross_attend_on_tape(&mut tape, t, b, &vars)?;
    Ok(SelectionOutput {
        f_att_img: tape.value(out).clone(),
        p: tape.value(p).clone(),
    })
}
