//! Candidate scoring: `sigmoid(w · [y_plc ; y_e] + b)` for every candidate entity.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{s, Array2};

use crate::error::{GesaError, Result};
use crate::sequence::TokenSequence;

/// Clamp applied to scores before taking logarithms.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderParams {
    /// `1 × 2L`: the first half weighs the placeholder entity, the second the candidate.
    pub w: Array2<f64>,
    /// `1 × 1`.
    pub b: Array2<f64>,
}

impl ReaderParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w: Array2::zeros((1, 2 * hidden)),
            b: Array2::zeros((1, 1)),
        }
    }

    pub fn bias(&self) -> f64 {
        self.b[[0, 0]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// One score in (0, 1) per candidate slot.
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
    pub best_index: usize,
    pub best_surface: String,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn score_candidates(hidden: &Array2<f64>, seq: &TokenSequence, params: &ReaderParams) -> Result<Prediction> {
    if seq.candidates.is_empty() {
        return Err(GesaError::Sequence("no candidates to score".into()));
    }
    let l = hidden.ncols();
    if params.w.ncols() != 2 * l || hidden.nrows() != seq.len() {
        return Err(GesaError::Shape(format!(
            "reader weight of width {} vs hidden states {:?}",
            params.w.ncols(),
            hidden.dim()
        )));
    }
    let w = params.w.row(0);
    let (w_plc, w_cand) = (w.slice(s![..l]), w.slice(s![l..]));
    let plc = hidden.row(seq.entity_position(0));
    let base = w_plc.dot(&plc) + params.bias();
    let logits: Vec<f64> = seq
        .candidates
        .iter()
        .map(|c| base + w_cand.dot(&hidden.row(seq.entity_position(c.entity))))
        .collect();
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let best_index = argmax(&scores).expect("non-empty");
    Ok(Prediction {
        best_surface: seq.candidates[best_index].surface.clone(),
        scores,
        logits,
        best_index,
    })
}

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_clamp(what: f64) {
    if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("score {what} clamped to [{BCE_EPS}, 1 - {BCE_EPS}] in the loss (reported once)");
    }
}

fn check_lengths(scores: &[f64], targets: &[f64]) -> Result<()> {
    if scores.len() != targets.len() {
        return Err(GesaError::Shape(format!("{} scores vs {} targets", scores.len(), targets.len())));
    }
    if scores.is_empty() {
        return Err(GesaError::InvalidArgument("empty score list".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy over candidates. Scores are clamped to `[ε, 1 − ε]`.
pub fn bce_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(scores, targets)?;
    let mut total = 0.0;
    for (&s, &t) in scores.iter().zip(targets) {
        let clamped = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
        if clamped != s {
            warn_clamp(s);
        }
        total -= t * clamped.ln() + (1.0 - t) * (1.0 - clamped).ln();
    }
    Ok(total / scores.len() as f64)
}

/// `ln(1 + e^z)` without overflow or cancellation.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// [`bce_loss`] of `sigmoid(logits)`, evaluated from the logits.
///
/// `−ln σ(z) = softplus(−z)` and `−ln(1 − σ(z)) = softplus(z)`, so saturated
/// scores keep full precision; each term is capped at `−ln ε`, which is what the
/// score clamp amounts to.
pub fn bce_loss_from_logits(logits: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(logits, targets)?;
    let cap = -BCE_EPS.ln();
    let mut total = 0.0;
    for (&z, &t) in logits.iter().zip(targets) {
        let (pos, neg) = (softplus(-z), softplus(z));
        if pos > cap || neg > cap {
            warn_clamp(sigmoid(z));
        }
        total += t * pos.min(cap) + (1.0 - t) * neg.min(cap);
    }
    Ok(total / logits.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to each logit: `(s − t) / n`.
pub fn bce_logit_grad(scores: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    scores.iter().zip(targets).map(|(s, t)| (s - t) / n).collect()
}

/// Adds reader-head gradients and writes the gradient with respect to the hidden states.
pub fn reader_backward(
    hidden: &Array2<f64>,
    seq: &TokenSequence,
    params: &ReaderParams,
    dlogits: &[f64],
    grads: &mut ReaderParams,
    dhidden: &mut Array2<f64>,
) {
    let l = hidden.ncols();
    let plc_pos = seq.entity_position(0);
    let plc = hidden.row(plc_pos).to_owned();
    let w = params.w.row(0);
    let mut dplc_total = 0.0;
    for (c, &g) in seq.candidates.iter().zip(dlogits) {
        let pos = seq.entity_position(c.entity);
        {
            let mut gw = grads.w.row_mut(0);
            gw.slice_mut(s![..l]).scaled_add(g, &plc);
            gw.slice_mut(s![l..]).scaled_add(g, &hidden.row(pos));
        }
        dhidden.row_mut(pos).scaled_add(g, &w.slice(s![l..]));
        dplc_total += g;
    }
    grads.b[[0, 0]] += dplc_total;
    dhidden.row_mut(plc_pos).scaled_add(dplc_total, &w.slice(s![..l]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{CandidateSlot, EntityToken, WordRole, WordToken};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn seq_with(n_cands: usize) -> TokenSequence {
        TokenSequence {
            word_tokens: vec![WordToken { id: 0, role: WordRole::Cls }],
            entity_tokens: std::iter::once(EntityToken::placeholder())
                .chain((0..n_cands).map(|i| EntityToken::candidate(i, 0..1)))
                .collect(),
            candidates: (0..n_cands)
                .map(|i| CandidateSlot { entity: i + 1, surface: format!("c{i}") })
                .collect(),
            dropped_mentions: 0,
        }
    }

    #[test]
    fn zero_head_scores_one_half() {
        let seq = seq_with(3);
        let hidden = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64);
        let pred = score_candidates(&hidden, &seq, &ReaderParams::zeros(2)).unwrap();
        assert_eq!(pred.scores, vec![0.5; 3]);
        assert_eq!(pred.best_index, 0);
        assert_eq!(pred.best_surface, "c0");
    }

    #[test]
    fn hand_sigmoid() {
        let seq = seq_with(1);
        let hidden = array![[9.0], [0.3], [0.5]];
        let params = ReaderParams { w: array![[1.0, 1.0]], b: array![[0.0]] };
        let pred = score_candidates(&hidden, &seq, &params).unwrap();
        assert_abs_diff_eq!(pred.scores[0], 0.689_974_481_127_612_8, epsilon = 1e-12);
    }

    #[test]
    fn positive_scaling_keeps_argmax() {
        let seq = seq_with(3);
        let hidden = array![[0.0], [1.0], [-2.0], [3.0], [0.5]];
        let params = ReaderParams { w: array![[0.4, -0.7]], b: array![[0.1]] };
        let best = score_candidates(&hidden, &seq, &params).unwrap().best_index;
        for factor in [0.01, 0.5, 3.0, 100.0] {
            let scaled = ReaderParams { w: &params.w * factor, b: &params.b * factor };
            assert_eq!(score_candidates(&hidden, &seq, &scaled).unwrap().best_index, best);
        }
    }

    #[test]
    fn no_candidates() {
        let seq = seq_with(0);
        let hidden = Array2::zeros((2, 1));
        assert!(score_candidates(&hidden, &seq, &ReaderParams::zeros(1)).is_err());
    }

    #[test]
    fn bce_values() {
        assert_abs_diff_eq!(
            bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap(),
            -(0.9f64.ln() + 0.9f64.ln()) / 2.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 0.105_360_515_657_826_3, epsilon = 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-11);
        assert_abs_diff_eq!(bce_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bce_is_permutation_invariant() {
        for (z, t) in [(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-1.5, 1.0)] {
            let direct = bce_loss(&[sigmoid(z)], &[t]).unwrap();
            assert_abs_diff_eq!(bce_loss_from_logits(&[z], &[t]).unwrap(), direct, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(bce_loss_from_logits(&[200.0], &[0.0]).unwrap(), -BCE_EPS.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bce_loss_from_logits(&[12.0], &[0.0]).unwrap(), 12.0 + (-12.0f64).exp().ln_1p(), epsilon = 1e-14);
        let a = bce_loss(&[0.2, 0.7, 0.4], &[0.0, 1.0, 0.0]).unwrap();
        let b = bce_loss(&[0.4, 0.2, 0.7], &[0.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
