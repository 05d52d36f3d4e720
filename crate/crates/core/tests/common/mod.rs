//! Independent loop-level and brute-force reference implementations shared by
//! the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::Array2;
use num_rational::Ratio;
use oapr_core::encoders::AttentionParams;
use oapr_core::tape::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-scale, scale]`.
pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..=scale))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- metrics

/// `Σ_q hits_q / (|q|·k)`, divided by the query count, in exact arithmetic.
pub fn brute_p_at_k_label(rankings: &[Vec<usize>], labels: &[Vec<bool>], queries: &[Vec<usize>], k: usize) -> Ratio<u64> {
    let mut total = Ratio::from_integer(0u64);
    for (q, query) in queries.iter().enumerate() {
        let mut hits = 0u64;
        for pos in 0..k {
            let e = rankings[q][pos];
            for &a in query {
                if labels[e][a] {
                    hits += 1;
                }
            }
        }
        total += Ratio::new(hits, (query.len() * k) as u64);
    }
    total / Ratio::from_integer(queries.len() as u64)
}

pub fn brute_p_at_k_instance(rankings: &[Vec<usize>], labels: &[Vec<bool>], queries: &[Vec<usize>], k: usize) -> Ratio<u64> {
    let mut hits = 0u64;
    for (q, query) in queries.iter().enumerate() {
        let mut found = false;
        for pos in 0..k {
            let e = rankings[q][pos];
            let mut all = true;
            for &a in query {
                all &= labels[e][a];
            }
            found |= all;
        }
        if found {
            hits += 1;
        }
    }
    Ratio::new(hits, queries.len() as u64)
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

// ---------------------------------------------------------------- tensor ops

pub fn loop_common(f: &Mat) -> Vec<f64> {
    let (r, c) = f.dim();
    let mut out = vec![0.0; c];
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..r {
            s += f[[i, j]];
        }
        out[j] = s / r as f64;
    }
    out
}

/// Three loops: class, patch, channel; then a per-row softmax.
pub fn loop_patch_weights(f_img: &Mat, f_text_bb: &Mat) -> Mat {
    let common = loop_common(f_text_bb);
    let (k, c) = f_text_bb.dim();
    let l = f_img.nrows();
    let mut w = Mat::zeros((k, l));
    for i in 0..k {
        let mut logits = vec![0.0; l];
        for p in 0..l {
            let mut s = 0.0;
            for ch in 0..c {
                s += (f_text_bb[[i, ch]] - common[ch]) * f_img[[p, ch]];
            }
            logits[p] = s;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        for p in 0..l {
            w[[i, p]] = (logits[p] - m).exp() / z;
        }
    }
    w
}

pub fn loop_pseudo(w: &Mat, f_img: &Mat, rows: &[usize]) -> Mat {
    let (l, c) = f_img.dim();
    let mut out = Mat::zeros((rows.len(), c));
    for (r, &i) in rows.iter().enumerate() {
        for ch in 0..c {
            let mut s = 0.0;
            for p in 0..l {
                s += w[[i, p]] * f_img[[p, ch]];
            }
            out[[r, ch]] = s;
        }
    }
    out
}

pub fn loop_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m) = a.dim();
    let p = b.ncols();
    let mut out = Mat::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..m {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn loop_softmax(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(v, &ok)| if ok { (v - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Value-value multi-head self-attention, one token pair at a time.
/// Returns the output and one map per head.
pub fn loop_vv_attention(x: &Mat, mask: &Array2<bool>, p: &AttentionParams) -> (Mat, Vec<Mat>) {
    let (t, c) = x.dim();
    let mut v = loop_matmul(x, &p.w_v);
    for i in 0..t {
        for j in 0..c {
            v[[i, j]] += p.b_v[[0, j]];
        }
    }
    let dh = c / p.n_heads;
    let mut cat = Mat::zeros((t, c));
    let mut maps = Vec::new();
    for h in 0..p.n_heads {
        let mut a = Mat::zeros((t, t));
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for (j, lg) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for d in h * dh..(h + 1) * dh {
                    s += v[[i, d]] * v[[j, d]];
                }
                *lg = s / (dh as f64).sqrt();
            }
            let row = loop_softmax(&logits, &mask.row(i).to_vec());
            for j in 0..t {
                a[[i, j]] = row[j];
            }
            for d in h * dh..(h + 1) * dh {
                let mut s = 0.0;
                for j in 0..t {
                    s += row[j] * v[[j, d]];
                }
                cat[[i, d]] = s;
            }
        }
        maps.push(a);
    }
    let mut out = loop_matmul(&cat, &p.w_o);
    for i in 0..t {
        for j in 0..c {
            out[[i, j]] += p.b_o[[0, j]];
        }
    }
    (out, maps)
}

/// Bias-free multi-head cross-attention with text queries over body keys.
/// Returns `(f_att_img, head-averaged p)`.
pub fn loop_cross_attend(text: &Mat, body: &Mat, w_q: &Mat, w_k: &Mat, w_v: &Mat, w_o: &Mat, heads: usize) -> (Mat, Mat) {
    let q = loop_matmul(text, w_q);
    let k = loop_matmul(body, w_k);
    let v = loop_matmul(body, w_v);
    let (a, d) = q.dim();
    let n = body.nrows();
    let dk = d / heads;
    let mut cat = Mat::zeros((a, d));
    let mut p = Mat::zeros((a, n));
    for h in 0..heads {
        for i in 0..a {
            let mut logits = vec![0.0; n];
            for (j, lg) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for t in h * dk..(h + 1) * dk {
                    s += q[[i, t]] * k[[j, t]];
                }
                *lg = s / (dk as f64).sqrt();
            }
            let row = loop_softmax(&logits, &vec![true; n]);
            for j in 0..n {
                p[[i, j]] += row[j] / heads as f64;
            }
            for t in h * dk..(h + 1) * dk {
                let mut s = 0.0;
                for j in 0..n {
                    s += row[j] * v[[j, t]];
                }
                cat[[i, t]] = s;
            }
        }
    }
    (loop_matmul(&cat, w_o), p)
}

// ---------------------------------------------------------------- losses

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Explicit exp/sum form of the weighted text-to-image loss.
pub fn loop_t2i(batch: &[Mat], text: &Mat, y: &Array2<bool>, tau: f64, w_neg: f64) -> f64 {
    let a = text.nrows();
    let mut total = 0.0;
    for i in 0..a {
        let (mut s_pos, mut s_neg) = (0.0, 0.0);
        for (b, f) in batch.iter().enumerate() {
            let e = (cosine(&f.row(i).to_vec(), &text.row(i).to_vec()) / tau).exp();
            if y[[b, i]] {
                s_pos += e;
            } else {
                s_neg += e;
            }
        }
        if s_pos > 0.0 {
            total += -(s_pos / (s_pos + w_neg * s_neg)).ln();
        }
    }
    total
}

// ---------------------------------------------------------------- gradients

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &Mat, b: &Mat) -> f64 {
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}
