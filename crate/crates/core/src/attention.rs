//! Entity-aware self-attention with relative-position labels.
//!
//! For a query token `i` and key token `j`, the query projection is picked by
//! the (type of `i`, type of `j`) block, and the score is
//!
//! ```text
//! s_ij = (q_i · k_j + q_i · R[label(i, j)]) / sqrt(H)
//! ```
//!
//! Blocks running without the relative term drop `q_i · R[..]`. `R` has one
//! row per label id and is shared by all heads of a layer.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{GesaError, Result};
use crate::labels::{AblationSet, Block, LabelMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Query projections indexed by [`Block`], each `L × (heads·H)`.
    pub w_q: [Array2<f64>; 4],
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// `(heads·H) × L`.
    pub w_o: Array2<f64>,
    /// `V × H` label embeddings.
    pub r: Array2<f64>,
}

impl AttentionParams {
    pub fn zeros(hidden: usize, heads: usize, head_size: usize, labels: usize) -> Self {
        let inner = heads * head_size;
        Self {
            w_q: std::array::from_fn(|_| Array2::zeros((hidden, inner))),
            w_k: Array2::zeros((hidden, inner)),
            w_v: Array2::zeros((hidden, inner)),
            w_o: Array2::zeros((inner, hidden)),
            r: Array2::zeros((labels, head_size)),
        }
    }

    pub fn head_size(&self) -> usize {
        self.r.ncols()
    }

    pub fn heads(&self) -> usize {
        self.w_k.ncols() / self.head_size().max(1)
    }

    pub fn hidden(&self) -> usize {
        self.w_k.nrows()
    }

    pub fn w_q(&self, block: Block) -> &Array2<f64> {
        &self.w_q[block as usize]
    }

    fn check(&self, x: &Array2<f64>, labels: &LabelMatrix) -> Result<()> {
        let h = self.head_size();
        if h == 0 {
            return Err(GesaError::Shape("head size must be positive".into()));
        }
        let inner = self.w_k.ncols();
        if !inner.is_multiple_of(h) {
            return Err(GesaError::Shape(format!("inner width {inner} is not a multiple of head size {h}")));
        }
        let hidden = self.hidden();
        for w in self.w_q.iter().chain([&self.w_k, &self.w_v]) {
            if w.dim() != (hidden, inner) {
                return Err(GesaError::Shape(format!("projection {:?}, expected {:?}", w.dim(), (hidden, inner))));
            }
        }
        if self.w_o.dim() != (inner, hidden) {
            return Err(GesaError::Shape(format!("output projection {:?}", self.w_o.dim())));
        }
        if x.dim() != (labels.size(), hidden) {
            return Err(GesaError::Shape(format!(
                "input {:?} vs {} labelled positions of width {hidden}",
                x.dim(),
                labels.size()
            )));
        }
        Ok(())
    }
}

/// Which blocks include the relative-position term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreMode {
    pub relative: [bool; 4],
}

impl ScoreMode {
    /// Relative term in every block.
    pub fn eq1() -> Self {
        Self { relative: [true; 4] }
    }

    /// Content-only scores in every block.
    pub fn eq3() -> Self {
        Self { relative: [false; 4] }
    }

    pub fn from_ablations(ablations: &AblationSet) -> Self {
        Self {
            relative: Block::ALL.map(|b| ablations.uses_relative(b)),
        }
    }

    pub fn uses_relative(&self, block: Block) -> bool {
        self.relative[block as usize]
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `P × L`, after the output projection.
    pub y: Array2<f64>,
    /// Per-head `P × P` attention weights.
    pub weights: Vec<Array2<f64>>,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: [Array2<f64>; 4],
    k: Array2<f64>,
    v: Array2<f64>,
    concat: Array2<f64>,
    weights: Vec<Array2<f64>>,
}

fn row_range(block: Block, words: usize, total: usize) -> Range<usize> {
    match block {
        Block::W2w | Block::W2e => 0..words,
        Block::E2w | Block::E2e => words..total,
    }
}

fn col_range(block: Block, words: usize, total: usize) -> Range<usize> {
    match block {
        Block::W2w | Block::E2w => 0..words,
        Block::W2e | Block::E2e => words..total,
    }
}

fn project_queries(x: &Array2<f64>, params: &AttentionParams, words: usize) -> [Array2<f64>; 4] {
    let total = x.nrows();
    Block::ALL.map(|b| {
        let rows = row_range(b, words, total);
        x.slice(s![rows, ..]).dot(params.w_q(b))
    })
}

/// Scaled scores of one head with masked cells at `-inf`.
fn head_scores(
    q: &[Array2<f64>; 4],
    k: &Array2<f64>,
    r: &Array2<f64>,
    labels: &LabelMatrix,
    head: usize,
    mode: ScoreMode,
) -> Array2<f64> {
    let p = labels.size();
    let words = labels.word_count();
    let h = r.ncols();
    let cols = head * h..(head + 1) * h;
    let mut scores = Array2::<f64>::zeros((p, p));
    for b in Block::ALL {
        let rows = row_range(b, words, p);
        let keys = col_range(b, words, p);
        if rows.is_empty() || keys.is_empty() {
            continue;
        }
        let qb = q[b as usize].slice(s![.., cols.clone()]);
        let kb = k.slice(s![keys.clone(), cols.clone()]);
        let mut block = scores.slice_mut(s![rows.clone(), keys.clone()]);
        general_mat_mul(1.0, &qb, &kb.t(), 0.0, &mut block);
        if mode.uses_relative(b) {
            let qr = qb.dot(&r.t());
            for (bi, i) in rows.clone().enumerate() {
                let row_labels = &labels.row_labels(i)[keys.clone()];
                let qr_row = qr.row(bi);
                for (cell, &l) in block.row_mut(bi).iter_mut().zip(row_labels) {
                    *cell += qr_row[l as usize];
                }
            }
        }
    }
    let scale = 1.0 / (h as f64).sqrt();
    for i in 0..p {
        let mask = labels.row_mask(i);
        for (cell, &m) in scores.row_mut(i).iter_mut().zip(mask) {
            *cell = if m { *cell * scale } else { f64::NEG_INFINITY };
        }
    }
    scores
}

/// Row softmax with max subtraction; `-inf` entries get weight exactly zero.
///
/// A non-finite score in an unmasked cell is reported as `NonFinite` with layer 0;
/// callers that know the layer index replace it.
fn softmax_rows(scores: &mut Array2<f64>, labels: &LabelMatrix) -> Result<()> {
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let mask = labels.row_mask(i);
        if !mask.iter().any(|&m| m) {
            return Err(GesaError::Labels(format!("attention row {i} is fully masked")));
        }
        if row.iter().zip(mask).any(|(v, &m)| m && !v.is_finite()) {
            return Err(GesaError::NonFinite { layer: 0 });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(())
}

/// Pre-softmax scores of one head (scaled by `1/sqrt(H)`, masked cells `-inf`).
pub fn attention_scores(
    x: &Array2<f64>,
    params: &AttentionParams,
    labels: &LabelMatrix,
    head: usize,
    mode: ScoreMode,
) -> Result<Array2<f64>> {
    params.check(x, labels)?;
    if head >= params.heads() {
        return Err(GesaError::Shape(format!("head {head} out of range")));
    }
    let q = project_queries(x, params, labels.word_count());
    let k = x.dot(&params.w_k);
    Ok(head_scores(&q, &k, &params.r, labels, head, mode))
}

pub fn attention_forward(
    x: &Array2<f64>,
    params: &AttentionParams,
    labels: &LabelMatrix,
    mode: ScoreMode,
) -> Result<AttentionOutput> {
    attention_forward_cached(x, params, labels, mode).map(|(out, _)| out)
}

pub fn attention_forward_cached(
    x: &Array2<f64>,
    params: &AttentionParams,
    labels: &LabelMatrix,
    mode: ScoreMode,
) -> Result<(AttentionOutput, AttentionCache)> {
    params.check(x, labels)?;
    let h = params.head_size();
    let q = project_queries(x, params, labels.word_count());
    let k = x.dot(&params.w_k);
    let v = x.dot(&params.w_v);
    let mut concat = Array2::<f64>::zeros((x.nrows(), params.w_k.ncols()));
    let mut weights = Vec::with_capacity(params.heads());
    for head in 0..params.heads() {
        let cols = head * h..(head + 1) * h;
        let mut a = head_scores(&q, &k, &params.r, labels, head, mode);
        softmax_rows(&mut a, labels)?;
        let mut out = concat.slice_mut(s![.., cols.clone()]);
        general_mat_mul(1.0, &a, &v.slice(s![.., cols]), 0.0, &mut out);
        weights.push(a);
    }
    let y = concat.dot(&params.w_o);
    let cache = AttentionCache {
        x: x.clone(),
        q,
        k,
        v,
        concat,
        weights: weights.clone(),
    };
    Ok((AttentionOutput { y, weights }, cache))
}

fn add_mat_mul(c: &mut ArrayViewMut2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(1.0, a, b, 1.0, c);
}

/// Backpropagates `dy` through one attention layer. Parameter gradients are
/// added into `grads`; the gradient with respect to the input is returned.
pub fn attention_backward(
    cache: &AttentionCache,
    params: &AttentionParams,
    labels: &LabelMatrix,
    mode: ScoreMode,
    dy: &Array2<f64>,
    grads: &mut AttentionParams,
) -> Array2<f64> {
    let p = labels.size();
    let words = labels.word_count();
    let h = params.head_size();
    let scale = 1.0 / (h as f64).sqrt();

    add_mat_mul(&mut grads.w_o.view_mut(), &cache.concat.t(), &dy.view());
    let dconcat = dy.dot(&params.w_o.t());

    let mut dq: [Array2<f64>; 4] = std::array::from_fn(|b| Array2::zeros(cache.q[b].dim()));
    let mut dk = Array2::<f64>::zeros(cache.k.dim());
    let mut dv = Array2::<f64>::zeros(cache.v.dim());
    let n_labels = params.r.nrows();

    for (head, a) in cache.weights.iter().enumerate() {
        let cols = head * h..(head + 1) * h;
        let dout = dconcat.slice(s![.., cols.clone()]);
        let vm = cache.v.slice(s![.., cols.clone()]);
        let mut ds = dout.dot(&vm.t());
        add_mat_mul(&mut dv.slice_mut(s![.., cols.clone()]), &a.t(), &dout);

        // softmax backward, folded with the 1/sqrt(H) scale
        for (mut ds_row, a_row) in ds.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
            let dot: f64 = ds_row.iter().zip(a_row.iter()).map(|(d, w)| d * w).sum();
            for (d, &w) in ds_row.iter_mut().zip(a_row.iter()) {
                *d = w * (*d - dot) * scale;
            }
        }

        for b in Block::ALL {
            let rows = row_range(b, words, p);
            let keys = col_range(b, words, p);
            if rows.is_empty() || keys.is_empty() {
                continue;
            }
            let ds_b = ds.slice(s![rows.clone(), keys.clone()]);
            let qb = cache.q[b as usize].slice(s![.., cols.clone()]);
            add_mat_mul(
                &mut dq[b as usize].slice_mut(s![.., cols.clone()]),
                &ds_b,
                &cache.k.slice(s![keys.clone(), cols.clone()]),
            );
            add_mat_mul(&mut dk.slice_mut(s![keys.clone(), cols.clone()]), &ds_b.t(), &qb);
            if mode.uses_relative(b) {
                let mut dqr = Array2::<f64>::zeros((rows.len(), n_labels));
                for (bi, i) in rows.clone().enumerate() {
                    let row_labels = &labels.row_labels(i)[keys.clone()];
                    let mut out = dqr.row_mut(bi);
                    for (&g, &l) in ds_b.row(bi).iter().zip(row_labels) {
                        out[l as usize] += g;
                    }
                }
                add_mat_mul(&mut dq[b as usize].slice_mut(s![.., cols.clone()]), &dqr.view(), &params.r.view());
                add_mat_mul(&mut grads.r.view_mut(), &dqr.t(), &qb);
            }
        }
    }

    let x = &cache.x;
    let mut dx = Array2::<f64>::zeros(x.dim());
    for b in Block::ALL {
        let rows = row_range(b, words, p);
        if rows.is_empty() {
            continue;
        }
        let xb = x.slice(s![rows.clone(), ..]);
        add_mat_mul(&mut grads.w_q[b as usize].view_mut(), &xb.t(), &dq[b as usize].view());
        add_mat_mul(&mut dx.slice_mut(s![rows, ..]), &dq[b as usize].view(), &params.w_q(b).t());
    }
    add_mat_mul(&mut grads.w_k.view_mut(), &x.t(), &dk.view());
    add_mat_mul(&mut dx.view_mut(), &dk.view(), &params.w_k.t());
    add_mat_mul(&mut grads.w_v.view_mut(), &x.t(), &dv.view());
    add_mat_mul(&mut dx.view_mut(), &dv.view(), &params.w_v.t());
    dx
}
