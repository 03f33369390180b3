//! Embedding layer and the stack of pre-norm transformer layers.
//!
//! Word rows are `word_embeddings[id] + type_embeddings[0]`; entity rows are
//! the shared `[MASK]` entity embedding projected to the hidden size plus
//! `type_embeddings[1]`. There is no absolute position term: positions only
//! reach the model through the label matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attention_backward, attention_forward_cached, AttentionCache, AttentionParams, ScoreMode};
use crate::error::{GesaError, Result};
use crate::graph::HeterogeneousGraph;
use crate::labels::{build_label_matrix, AblationSet, LabelMatrix, LabelVocabulary, PatternConfig, W2wMode};
use crate::reader::ReaderParams;
use crate::sequence::TokenSequence;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Maximum sequence length `P`.
    pub max_len: usize,
    /// Hidden size `L`.
    pub hidden: usize,
    /// Attention head size `H`.
    pub head_size: usize,
    pub heads: usize,
    pub layers: usize,
    /// Window radius `k`.
    pub window: usize,
    pub entity_embed_dim: usize,
    /// Question length limit, counting `[CLS]` and the first `[SEP]`.
    pub max_q_len: usize,
    pub w2w_mode: W2wMode,
    pub ablations: AblationSet,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            max_len: 128,
            hidden: 64,
            head_size: 16,
            heads: 4,
            layers: 2,
            window: 4,
            entity_embed_dim: 16,
            max_q_len: 32,
            w2w_mode: W2wMode::ClippedDense,
            ablations: AblationSet::none(),
            ffn_mult: 4,
            init_std: 0.02,
        }
    }

    /// Dimensions of the large pretrained-scale model.
    pub fn full_scale() -> Self {
        Self {
            max_len: 512,
            hidden: 1024,
            head_size: 64,
            heads: 16,
            layers: 24,
            window: 150,
            entity_embed_dim: 256,
            max_q_len: 90,
            ..Self::desk()
        }
    }

    pub fn pattern(&self) -> PatternConfig {
        PatternConfig {
            k: self.window,
            w2w_mode: self.w2w_mode,
            ablations: self.ablations.clone(),
        }
    }

    pub fn label_vocab(&self) -> LabelVocabulary {
        LabelVocabulary::new(self.window, &self.ablations)
    }

    pub fn score_mode(&self) -> ScoreMode {
        ScoreMode::from_ablations(&self.ablations)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GesaError::Config(m.to_string()));
        if self.hidden == 0 || self.head_size == 0 || self.heads == 0 {
            return bad("hidden, head_size and heads must be positive");
        }
        if self.entity_embed_dim == 0 || self.ffn_mult == 0 {
            return bad("entity_embed_dim and ffn_mult must be positive");
        }
        if self.max_q_len == 0 || self.max_len <= self.max_q_len {
            return bad("max_len must exceed max_q_len > 0");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub ffn_in: Array2<f64>,
    pub ffn_in_bias: Array2<f64>,
    pub ffn_out: Array2<f64>,
    pub ffn_out_bias: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
}

impl LayerParams {
    pub fn zeros(config: &ModelConfig, labels: usize) -> Self {
        let l = config.hidden;
        let f = l * config.ffn_mult;
        Self {
            attn: AttentionParams::zeros(l, config.heads, config.head_size, labels),
            ln1_gain: Array2::zeros((1, l)),
            ln1_bias: Array2::zeros((1, l)),
            ffn_in: Array2::zeros((l, f)),
            ffn_in_bias: Array2::zeros((1, f)),
            ffn_out: Array2::zeros((f, l)),
            ffn_out_bias: Array2::zeros((1, l)),
            ln2_gain: Array2::zeros((1, l)),
            ln2_bias: Array2::zeros((1, l)),
        }
    }

    fn tensors(&self, prefix: &str) -> Vec<(String, &Array2<f64>)> {
        let a = &self.attn;
        vec![
            (format!("{prefix}.ln1.gain"), &self.ln1_gain),
            (format!("{prefix}.ln1.bias"), &self.ln1_bias),
            (format!("{prefix}.attn.w_q_w2w"), &a.w_q[0]),
            (format!("{prefix}.attn.w_q_w2e"), &a.w_q[1]),
            (format!("{prefix}.attn.w_q_e2w"), &a.w_q[2]),
            (format!("{prefix}.attn.w_q_e2e"), &a.w_q[3]),
            (format!("{prefix}.attn.w_k"), &a.w_k),
            (format!("{prefix}.attn.w_v"), &a.w_v),
            (format!("{prefix}.attn.w_o"), &a.w_o),
            (format!("{prefix}.attn.r"), &a.r),
            (format!("{prefix}.ln2.gain"), &self.ln2_gain),
            (format!("{prefix}.ln2.bias"), &self.ln2_bias),
            (format!("{prefix}.ffn.w_in"), &self.ffn_in),
            (format!("{prefix}.ffn.b_in"), &self.ffn_in_bias),
            (format!("{prefix}.ffn.w_out"), &self.ffn_out),
            (format!("{prefix}.ffn.b_out"), &self.ffn_out_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let [q0, q1, q2, q3] = &mut self.attn.w_q;
        vec![
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            q0,
            q1,
            q2,
            q3,
            &mut self.attn.w_k,
            &mut self.attn.w_v,
            &mut self.attn.w_o,
            &mut self.attn.r,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
        ]
    }
}

/// Every learnable array of the model. Also used as a gradient and optimizer-state container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub word_embeddings: Array2<f64>,
    /// `1 × entity_embed_dim`, shared by every entity token.
    pub mask_entity_embedding: Array2<f64>,
    /// `entity_embed_dim × L`.
    pub entity_projection: Array2<f64>,
    /// Row 0: word, row 1: entity.
    pub type_embeddings: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub reader: ReaderParams,
}

/// Kind of initialization applied to a named tensor.
fn init_kind(name: &str) -> Init {
    if name.ends_with(".gain") {
        Init::Ones
    } else if name.ends_with(".bias") || name.ends_with(".b_in") || name.ends_with(".b_out") || name == "reader.b" {
        Init::Zeros
    } else {
        Init::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig, vocab_size: usize) -> Self {
        let labels = config.label_vocab().size();
        Self {
            word_embeddings: Array2::zeros((vocab_size, config.hidden)),
            mask_entity_embedding: Array2::zeros((1, config.entity_embed_dim)),
            entity_projection: Array2::zeros((config.entity_embed_dim, config.hidden)),
            type_embeddings: Array2::zeros((2, config.hidden)),
            layers: (0..config.layers).map(|_| LayerParams::zeros(config, labels)).collect(),
            reader: ReaderParams::zeros(config.hidden),
        }
    }

    /// Seeded initialization: normal(0, init_std) weights, zero biases, unit gains.
    /// The four query projections of a layer start out identical.
    pub fn init(config: &ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut params = Self::zeros(config, vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("validated init_std");
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            match init_kind(name) {
                Init::Ones => t.fill(1.0),
                Init::Zeros => t.fill(0.0),
                Init::Normal => {
                    if name.contains(".w_q_") && !name.ends_with("w_q_w2w") {
                        continue;
                    }
                    t.mapv_inplace(|_| normal.sample(&mut rng));
                }
            }
        }
        for layer in &mut params.layers {
            let base = layer.attn.w_q[0].clone();
            for q in layer.attn.w_q.iter_mut().skip(1) {
                q.assign(&base);
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    pub fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.fill(v);
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("word_embeddings".to_string(), &self.word_embeddings),
            ("mask_entity_embedding".to_string(), &self.mask_entity_embedding),
            ("entity_projection".to_string(), &self.entity_projection),
            ("type_embeddings".to_string(), &self.type_embeddings),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors(&format!("layers.{i}")));
        }
        out.push(("reader.w".to_string(), &self.reader.w));
        out.push(("reader.b".to_string(), &self.reader.b));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![
            &mut self.word_embeddings,
            &mut self.mask_entity_embedding,
            &mut self.entity_projection,
            &mut self.type_embeddings,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.reader.w);
        out.push(&mut self.reader.b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let theirs: Vec<&Array2<f64>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(theirs) {
            *mine += theirs;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config, self.word_embeddings.nrows());
        for ((name, mine), (_, want)) in self.tensors().into_iter().zip(expected.tensors()) {
            if mine.dim() != want.dim() {
                return Err(GesaError::Shape(format!("{name}: {:?}, expected {:?}", mine.dim(), want.dim())));
            }
        }
        if self.layers.len() != config.layers {
            return Err(GesaError::Shape(format!("{} layers, expected {}", self.layers.len(), config.layers)));
        }
        Ok(())
    }
}

/// Parameter family of a tensor name: the name without its layer prefix.
pub fn param_family(name: &str) -> &str {
    match name.strip_prefix("layers.") {
        Some(rest) => rest.split_once('.').map_or(rest, |(_, tail)| tail),
        None => name,
    }
}

pub fn embed(seq: &TokenSequence, params: &ModelParams) -> Result<Array2<f64>> {
    let vocab = params.word_embeddings.nrows();
    let l = params.word_embeddings.ncols();
    let mut x = Array2::<f64>::zeros((seq.len(), l));
    let word_type = params.type_embeddings.row(0);
    for (i, w) in seq.word_tokens.iter().enumerate() {
        if w.id >= vocab {
            return Err(GesaError::Shape(format!("word id {} outside vocabulary of {vocab}", w.id)));
        }
        let mut row = x.row_mut(i);
        row.assign(&params.word_embeddings.row(w.id));
        row += &word_type;
    }
    let entity_row = params.mask_entity_embedding.dot(&params.entity_projection);
    let entity_row = &entity_row.row(0) + &params.type_embeddings.row(1);
    for e in 0..seq.entity_count() {
        x.row_mut(seq.entity_position(e)).assign(&entity_row);
    }
    Ok(x)
}

fn embed_backward(seq: &TokenSequence, params: &ModelParams, dx: &Array2<f64>, grads: &mut ModelParams) {
    let words = seq.word_count();
    for (i, w) in seq.word_tokens.iter().enumerate() {
        let mut g = grads.word_embeddings.row_mut(w.id);
        g += &dx.row(i);
    }
    let dword: Array1<f64> = dx.slice(s![..words, ..]).sum_axis(Axis(0));
    let dent: Array1<f64> = dx.slice(s![words.., ..]).sum_axis(Axis(0));
    {
        let mut t = grads.type_embeddings.row_mut(0);
        t += &dword;
    }
    {
        let mut t = grads.type_embeddings.row_mut(1);
        t += &dent;
    }
    let dent = dent.insert_axis(Axis(0));
    general_mat_mul(1.0, &params.mask_entity_embedding.t(), &dent, 1.0, &mut grads.entity_projection);
    general_mat_mul(1.0, &dent, &params.entity_projection.t(), 1.0, &mut grads.mask_entity_embedding);
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let l = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::<f64>::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / l;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / l;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * &gain.row(0) + bias.row(0);
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array2<f64>,
    dgain: &mut Array2<f64>,
    dbias: &mut Array2<f64>,
) -> Array2<f64> {
    let l = dy.ncols() as f64;
    {
        let mut g = dgain.row_mut(0);
        g += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut b = dbias.row_mut(0);
        b += &dy.sum_axis(Axis(0));
    }
    let mut dx = dy * &gain.row(0);
    for ((mut row, xhat), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / l;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(d, x)| d * x).sum::<f64>() / l;
        Zip::from(&mut row).and(&xhat).for_each(|d, &x| {
            *d = inv * (*d - mean_d - x * mean_dx);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Intermediates of one layer for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    norm1: NormCache,
    attn: AttentionCache,
    norm2: NormCache,
    ffn_input: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

fn layer_forward_cached(
    x: &Array2<f64>,
    layer: &LayerParams,
    labels: &LabelMatrix,
    mode: ScoreMode,
    index: usize,
) -> Result<(Array2<f64>, LayerCache)> {
    let (h1, norm1) = layer_norm(x, &layer.ln1_gain, &layer.ln1_bias);
    let (attn_out, attn) = attention_forward_cached(&h1, &layer.attn, labels, mode).map_err(|e| match e {
        GesaError::NonFinite { .. } => GesaError::NonFinite { layer: index },
        e => e,
    })?;
    let x1 = x + &attn_out.y;
    let (h2, norm2) = layer_norm(&x1, &layer.ln2_gain, &layer.ln2_bias);
    let ffn_pre = h2.dot(&layer.ffn_in) + layer.ffn_in_bias.row(0);
    let ffn_act = ffn_pre.mapv(gelu);
    let out = &x1 + &(ffn_act.dot(&layer.ffn_out) + layer.ffn_out_bias.row(0));
    if !out.iter().all(|v| v.is_finite()) {
        return Err(GesaError::NonFinite { layer: index });
    }
    Ok((
        out,
        LayerCache {
            norm1,
            attn,
            norm2,
            ffn_input: h2,
            ffn_pre,
            ffn_act,
        },
    ))
}

/// `x + Attn(Norm(x))`, then `+ FFN(Norm(·))`. `index` only labels errors.
pub fn layer_forward(
    x: &Array2<f64>,
    layer: &LayerParams,
    labels: &LabelMatrix,
    mode: ScoreMode,
    index: usize,
) -> Result<Array2<f64>> {
    layer_forward_cached(x, layer, labels, mode, index).map(|(out, _)| out)
}

fn layer_backward(
    cache: &LayerCache,
    layer: &LayerParams,
    labels: &LabelMatrix,
    mode: ScoreMode,
    dout: &Array2<f64>,
    grads: &mut LayerParams,
) -> Array2<f64> {
    // feed-forward branch
    general_mat_mul(1.0, &cache.ffn_act.t(), dout, 1.0, &mut grads.ffn_out);
    {
        let mut b = grads.ffn_out_bias.row_mut(0);
        b += &dout.sum_axis(Axis(0));
    }
    let mut dpre = dout.dot(&layer.ffn_out.t());
    Zip::from(&mut dpre).and(&cache.ffn_pre).for_each(|d, &u| *d *= gelu_grad(u));
    general_mat_mul(1.0, &cache.ffn_input.t(), &dpre, 1.0, &mut grads.ffn_in);
    {
        let mut b = grads.ffn_in_bias.row_mut(0);
        b += &dpre.sum_axis(Axis(0));
    }
    let dh2 = dpre.dot(&layer.ffn_in.t());
    let mut dx1 = dout.clone();
    dx1 += &layer_norm_backward(&dh2, &cache.norm2, &layer.ln2_gain, &mut grads.ln2_gain, &mut grads.ln2_bias);

    // attention branch
    let dh1 = attention_backward(&cache.attn, &layer.attn, labels, mode, &dx1, &mut grads.attn);
    let mut dx = dx1;
    dx += &layer_norm_backward(&dh1, &cache.norm1, &layer.ln1_gain, &mut grads.ln1_gain, &mut grads.ln1_bias);
    dx
}

/// Everything needed to backpropagate through one instance.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub hidden: Array2<f64>,
    caches: Vec<LayerCache>,
}

/// Final `P × L` representations. Builds the label matrix once and reuses it in every layer.
pub fn model_forward(
    seq: &TokenSequence,
    graph: &HeterogeneousGraph,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Array2<f64>> {
    let labels = build_label_matrix(seq, graph, &config.pattern())?;
    forward_with_labels(seq, &labels, params, config)
}

pub fn forward_with_labels(
    seq: &TokenSequence,
    labels: &LabelMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Array2<f64>> {
    let mode = config.score_mode();
    let mut x = embed(seq, params)?;
    for (i, layer) in params.layers.iter().enumerate() {
        x = layer_forward(&x, layer, labels, mode, i)?;
    }
    Ok(x)
}

pub fn forward_cached(
    seq: &TokenSequence,
    labels: &LabelMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardPass> {
    if labels.size() != seq.len() || labels.word_count() != seq.word_count() {
        return Err(GesaError::Shape(format!(
            "label matrix {}x{} ({} words) vs sequence of {} ({} words)",
            labels.size(),
            labels.size(),
            labels.word_count(),
            seq.len(),
            seq.word_count()
        )));
    }
    let mode = config.score_mode();
    let mut x = embed(seq, params)?;
    let mut caches = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let (out, cache) = layer_forward_cached(&x, layer, labels, mode, i)?;
        caches.push(cache);
        x = out;
    }
    Ok(ForwardPass { hidden: x, caches })
}

/// Adds the gradients of all model parameters (reader head excluded) given `dhidden`.
pub fn model_backward(
    pass: &ForwardPass,
    seq: &TokenSequence,
    labels: &LabelMatrix,
    params: &ModelParams,
    config: &ModelConfig,
    dhidden: Array2<f64>,
    grads: &mut ModelParams,
) {
    let mode = config.score_mode();
    let mut d = dhidden;
    for i in (0..params.layers.len()).rev() {
        d = layer_backward(&pass.caches[i], &params.layers[i], labels, mode, &d, &mut grads.layers[i]);
    }
    embed_backward(seq, params, &d, grads);
}
