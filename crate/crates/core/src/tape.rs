//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1 × 1`. Leaves are
//! either tracked parameters or constants, and only nodes reachable from a
//! tracked leaf take part in the backward sweep. Frozen encoder weights enter
//! as constants, so gradients never reach them.

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log { x: Var, floor: f64 },
    QuickGelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    RowSlice { x: Var, start: usize },
    ColSlice { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    RowDot(Var, Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies the value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(value, Op::Log { x: a, floor }, &[a])
    }

    /// `x · σ(1.702 x)`
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(1.702 * x));
        self.push(value, Op::QuickGelu(a), &[a])
    }

    /// Row-wise softmax. Where `mask[i][j]` is false the output is exactly zero
    /// and the masked logit never enters the arithmetic of row `i`.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Var {
        let value = masked_softmax(self.value(a), mask);
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x: a, norms }, &[a])
    }

    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::RowSlice { x: a, start }, &[a])
    }

    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::ColSlice { x: a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Mat::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// `r × c → r × 1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a), &[a])
    }

    /// `r × c → 1 × c`
    pub fn col_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = (x.sum_axis(Axis(0)) / x.nrows() as f64).insert_axis(Axis(0));
        self.push(value, Op::ColMean(a), &[a])
    }

    /// Row-wise dot products of two equally shaped matrices, `r × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let value = (self.value(a) * self.value(b))
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(value, Op::RowDot(a, b), &[a, b])
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.raw_dim()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.is_tracked(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.is_tracked(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.is_tracked(*a) {
                        let ga = g.dot(self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.is_tracked(*b) {
                        let gb = g.t().dot(self.value(*a));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || -&g);
                }
                Op::Mul(a, b) => {
                    self.acc_if(&mut grads, *a, || &g * self.value(*b));
                    self.acc_if(&mut grads, *b, || &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(a, row) => {
                    self.acc_if(&mut grads, *a, || &g * self.value(*row));
                    self.acc_if(&mut grads, *row, || {
                        (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0))
                    });
                }
                Op::Scale(a, f) => self.acc_if(&mut grads, *a, || &g * *f),
                Op::Exp(a) => self.acc_if(&mut grads, *a, || &g * y),
                Op::Log { x, floor } => self.acc_if(&mut grads, *x, || {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        *gv = if xv > *floor { *gv / xv } else { 0.0 }
                    });
                    gx
                }),
                Op::QuickGelu(a) => self.acc_if(&mut grads, *a, || {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(*a), |gv, &x| {
                        let sg = sigmoid(1.702 * x);
                        *gv *= sg + 1.702 * x * sg * (1.0 - sg);
                    });
                    gx
                }),
                Op::Softmax(a) => self.acc_if(&mut grads, *a, || {
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |v, &yv| *v -= yv * dot);
                    }
                    gx
                }),
                Op::LayerNorm { x, inv_std } => self.acc_if(&mut grads, *x, || {
                    let cols = y.ncols() as f64;
                    let mut gx = g.clone();
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(i);
                        let mean_g = row.sum() / cols;
                        let mean_gy = row.dot(&yrow) / cols;
                        row.zip_mut_with(&yrow, |gv, &yv| {
                            *gv = inv_std[i] * (*gv - mean_g - yv * mean_gy)
                        });
                    }
                    gx
                }),
                Op::L2Normalize { x, norms } => self.acc_if(&mut grads, *x, || {
                    let mut gx = g.clone();
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(i);
                        let dot = row.dot(&yrow);
                        row.zip_mut_with(&yrow, |gv, &yv| *gv = (*gv - yv * dot) / norms[i]);
                    }
                    gx
                }),
                Op::RowSlice { x, start } => self.acc_if(&mut grads, *x, || {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    gx
                }),
                Op::ColSlice { x, start } => self.acc_if(&mut grads, *x, || {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    gx
                }),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        let gp = g.slice(s![offset..offset + n, ..]).to_owned();
                        self.acc_if(&mut grads, *p, || gp);
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        let gp = g.slice(s![.., offset..offset + n]).to_owned();
                        self.acc_if(&mut grads, *p, || gp);
                        offset += n;
                    }
                }
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    self.acc_if(&mut grads, *a, || Mat::from_elem(self.value(*a).raw_dim(), gv));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g[[0, 0]] / x.len() as f64;
                    self.acc_if(&mut grads, *a, || Mat::from_elem(x.raw_dim(), gv));
                }
                Op::RowSum(a) => self.acc_if(&mut grads, *a, || {
                    let x = self.value(*a);
                    let mut gx = Mat::zeros(x.raw_dim());
                    for (mut row, gv) in gx.rows_mut().into_iter().zip(g.column(0)) {
                        row.fill(*gv);
                    }
                    gx
                }),
                Op::ColMean(a) => self.acc_if(&mut grads, *a, || {
                    let x = self.value(*a);
                    let scaled = &g / x.nrows() as f64;
                    let mut gx = Mat::zeros(x.raw_dim());
                    for mut row in gx.rows_mut() {
                        row.assign(&scaled.row(0));
                    }
                    gx
                }),
                Op::RowDot(a, b) => {
                    let col = g.column(0).to_owned().insert_axis(Axis(1));
                    self.acc_if(&mut grads, *a, || self.value(*b) * &col);
                    self.acc_if(&mut grads, *b, || self.value(*a) * &col);
                }
            }
        }
        Gradients { grads }
    }

    fn acc_if(&self, grads: &mut [Option<Mat>], v: Var, g: impl FnOnce() -> Mat) {
        if self.is_tracked(v) {
            acc(grads, v, g());
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax restricted to unmasked entries.
pub fn masked_softmax(x: &Mat, mask: Option<&Array2<bool>>) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                total += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / total);
    }
    out
}
