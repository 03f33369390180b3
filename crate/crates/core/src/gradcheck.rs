//! Central finite differences against the analytic gradient.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GesaError, Result};
use crate::model::{param_family, ModelConfig, ModelParams};
use crate::synth::gen_synthetic;
use crate::train::{example_loss, example_loss_and_grad, prepare, Example};
use crate::vocab::build_vocab;

/// Relative-error denominators are floored at this value.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Minimum number of coordinates to check. Every tensor gets at least one.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter family (layer index stripped).
    pub per_family: BTreeMap<String, f64>,
    pub checked: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Coordinate> {
        self.checked.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Picks coordinates to check. Embedding rows come from ids present in the
/// sequence and `R` rows from labels present in the matrix, so that sampled
/// coordinates actually influence the loss.
fn sample_coordinates(params: &ModelParams, ex: &Example, samples: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let tensors = params.tensors();
    let per_tensor = samples.div_ceil(tensors.len()).max(1);
    let word_ids: BTreeSet<usize> = ex.seq.word_tokens.iter().map(|w| w.id).collect();
    let p = ex.labels.size();
    let label_ids: BTreeSet<usize> =
        (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).filter(|&(i, j)| ex.labels.attends(i, j)).map(|(i, j)| ex.labels.label(i, j)).collect();

    let mut out = Vec::new();
    for (t, (name, arr)) in tensors.iter().enumerate() {
        let (rows, cols) = arr.dim();
        let row_pool: Vec<usize> = match param_family(name) {
            "word_embeddings" => word_ids.iter().copied().collect(),
            "attn.r" => label_ids.iter().copied().filter(|&l| l < rows).collect(),
            _ => (0..rows).collect(),
        };
        let row_pool = if row_pool.is_empty() { (0..rows).collect() } else { row_pool };
        let mut chosen = BTreeSet::new();
        let capacity = row_pool.len() * cols;
        while chosen.len() < per_tensor.min(capacity) {
            let r = *row_pool.iter().choose(rng).expect("non-empty pool");
            chosen.insert((r, rng.random_range(0..cols)));
        }
        out.extend(chosen.into_iter().map(|(r, c)| (t, r, c)));
    }
    out
}

/// Compares `analytic` with central differences of the example loss.
pub fn compare_gradients(
    params: &ModelParams,
    ex: &Example,
    config: &ModelConfig,
    analytic: &ModelParams,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(GesaError::InvalidArgument(format!("eps must be positive, got {}", opts.eps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let coords = sample_coordinates(params, ex, opts.samples, &mut rng);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic_tensors = analytic.tensors();
    let mut probe = params.clone();
    let mut checked = Vec::with_capacity(coords.len());
    for (t, r, c) in coords {
        let original = params.tensors()[t].1[[r, c]];
        probe.tensors_mut()[t][[r, c]] = original + opts.eps;
        let plus = example_loss(ex, &probe, config)?;
        probe.tensors_mut()[t][[r, c]] = original - opts.eps;
        let minus = example_loss(ex, &probe, config)?;
        probe.tensors_mut()[t][[r, c]] = original;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic_tensors[t].1[[r, c]];
        checked.push(Coordinate {
            tensor: names[t].clone(),
            row: r,
            col: c,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let mut per_family: BTreeMap<String, f64> = BTreeMap::new();
    for c in &checked {
        let e = per_family.entry(param_family(&c.tensor).to_string()).or_insert(0.0);
        *e = e.max(c.rel_error);
    }
    let max_rel_error = checked.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_family, checked })
}

/// Gradient check of the full model on one example.
pub fn grad_check(params: &ModelParams, ex: &Example, config: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut grads = params.zeros_like();
    example_loss_and_grad(ex, params, config, &mut grads)?;
    compare_gradients(params, ex, config, &grads, opts)
}

/// Small two-layer model used for gradient checks: `L = 16`, `P ≤ 24`.
///
/// The larger init scale keeps gradients well away from the denominator floor.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        max_len: 24,
        hidden: 16,
        head_size: 4,
        heads: 2,
        layers: 2,
        window: 2,
        entity_embed_dim: 8,
        max_q_len: 8,
        init_std: 0.3,
        ..ModelConfig::desk()
    }
}

/// A synthetic instance with freshly initialized parameters under [`check_config`].
pub fn synthetic_case(seed: u64) -> Result<(ModelConfig, Example, ModelParams)> {
    let config = check_config();
    let inst = gen_synthetic(2, 2, 1, seed)?;
    let vocab = build_vocab(std::slice::from_ref(&inst));
    let ex = prepare(&inst, &vocab, &config)?;
    let params = ModelParams::init(&config, vocab.len(), seed);
    Ok((config, ex, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
