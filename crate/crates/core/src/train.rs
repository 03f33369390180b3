//! Training loop, per-instance objective and evaluation.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ClozeInstance;
use crate::error::{GesaError, Result};
use crate::graph::{build_graph, HeterogeneousGraph};
use crate::labels::{build_label_matrix, LabelMatrix};
use crate::metrics::{summarize, MetricSummary};
use crate::model::{forward_cached, forward_with_labels, model_backward, ModelConfig, ModelParams};
use crate::reader::{bce_logit_grad, bce_loss_from_logits, reader_backward, score_candidates, Prediction};
use crate::sequence::{build_sequence, TokenSequence};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for per-instance gradients and evaluation. Results do not depend on it.
    pub threads: usize,
    /// Stop after the first epoch whose dev accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            warmup_ratio: 0.06,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            threads: 1,
            target_dev_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self { epochs: 2, batch_size: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GesaError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive");
        }
        Ok(())
    }
}

/// An instance with everything the model needs precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub seq: TokenSequence,
    pub graph: HeterogeneousGraph,
    pub labels: LabelMatrix,
    pub targets: Vec<f64>,
    pub golds: Vec<String>,
}

pub fn prepare(instance: &ClozeInstance, vocab: &Vocabulary, config: &ModelConfig) -> Result<Example> {
    let seq = build_sequence(instance, vocab, config.max_len, config.max_q_len)?;
    let graph = build_graph(&seq.entity_tokens, &instance.mentions)?;
    let labels = build_label_matrix(&seq, &graph, &config.pattern())?;
    Ok(Example {
        id: instance.id.clone(),
        targets: seq.targets(instance),
        seq,
        graph,
        labels,
        golds: instance.gold_answers.clone(),
    })
}

pub fn prepare_all(instances: &[ClozeInstance], vocab: &Vocabulary, config: &ModelConfig) -> Result<Vec<Example>> {
    instances.iter().map(|i| prepare(i, vocab, config)).collect()
}

pub fn predict(ex: &Example, params: &ModelParams, config: &ModelConfig) -> Result<Prediction> {
    let hidden = forward_with_labels(&ex.seq, &ex.labels, params, config)?;
    score_candidates(&hidden, &ex.seq, &params.reader)
}

/// Mean BCE of one example.
pub fn example_loss(ex: &Example, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let pred = predict(ex, params, config)?;
    bce_loss_from_logits(&pred.logits, &ex.targets)
}

/// Loss of one example; its parameter gradient is added into `grads`.
pub fn example_loss_and_grad(
    ex: &Example,
    params: &ModelParams,
    config: &ModelConfig,
    grads: &mut ModelParams,
) -> Result<(f64, Prediction)> {
    let pass = forward_cached(&ex.seq, &ex.labels, params, config)?;
    let pred = score_candidates(&pass.hidden, &ex.seq, &params.reader)?;
    let loss = bce_loss_from_logits(&pred.logits, &ex.targets)?;
    let dlogits = bce_logit_grad(&pred.scores, &ex.targets);
    let mut dhidden = Array2::zeros(pass.hidden.dim());
    reader_backward(&pass.hidden, &ex.seq, &params.reader, &dlogits, &mut grads.reader, &mut dhidden);
    model_backward(&pass, &ex.seq, &ex.labels, params, config, dhidden, grads);
    Ok((loss, pred))
}

/// Runs `f` over `items` on up to `threads` workers and returns results in item order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Batch gradient (mean over the batch) and per-instance losses/predictions.
///
/// Each instance's gradient is computed into its own buffer and the buffers are
/// summed in batch order, so the result does not depend on the thread count.
pub fn batch_gradient(
    batch: &[&Example],
    params: &ModelParams,
    config: &ModelConfig,
    threads: usize,
    total: &mut ModelParams,
) -> Result<Vec<(f64, Prediction)>> {
    total.fill(0.0);
    let mut out = Vec::with_capacity(batch.len());
    if threads <= 1 {
        let mut scratch = params.zeros_like();
        for ex in batch {
            scratch.fill(0.0);
            out.push(example_loss_and_grad(ex, params, config, &mut scratch)?);
            total.add_assign(&scratch);
        }
    } else {
        let results = par_map(batch, threads, |ex| {
            let mut g = params.zeros_like();
            example_loss_and_grad(ex, params, config, &mut g).map(|r| (r, g))
        });
        for r in results {
            let (r, g) = r?;
            total.add_assign(&g);
            out.push(r);
        }
    }
    total.scale(1.0 / batch.len() as f64);
    Ok(out)
}

/// Learning rate at 1-based `step`: linear warmup, then linear decay to zero.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warmup = (config.warmup_ratio * total_steps as f64).ceil() as usize;
    let peak = config.learning_rate;
    if warmup > 0 && step <= warmup {
        peak * step as f64 / warmup as f64
    } else if total_steps > warmup {
        peak * total_steps.saturating_sub(step) as f64 / (total_steps - warmup) as f64
    } else {
        peak
    }
}

/// Adam with decoupled weight decay. Gains and biases are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: ModelParams,
    v: ModelParams,
    decay: Vec<bool>,
    step: i32,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        let decay = params
            .tensors()
            .iter()
            .map(|(name, _)| !(name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with(".b_in") || name.ends_with(".b_out") || name == "reader.b"))
            .collect();
        Self { m: params.zeros_like(), v: params.zeros_like(), decay, step: 0 }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, config: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let wd = config.weight_decay;
        let eps = config.adam_eps;
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, (_, g)), m), v), &decay) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs).zip(&self.decay) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                let decayed = if decay { wd * *p } else { 0.0 };
                *p -= lr * (update + decayed);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev: Option<MetricSummary>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Trains `params` in place of a fresh copy and returns the result with its log.
///
/// `on_epoch` sees every finished epoch, e.g. to write a checkpoint.
pub fn train(
    params: ModelParams,
    train_set: &[Example],
    dev_set: &[Example],
    model: &ModelConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(GesaError::InvalidArgument("empty training set".into()));
    }
    config.validate()?;
    let mut params = params;
    let mut opt = AdamW::new(&params);
    let mut grads = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let results = match batch_gradient(&batch, &params, model, config.threads, &mut grads) {
                Err(GesaError::NonFinite { .. }) => return Err(GesaError::Diverged { step, loss: f64::NAN }),
                r => r?,
            };
            let batch_loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>();
            if !batch_loss.is_finite() {
                return Err(GesaError::Diverged { step, loss: batch_loss });
            }
            loss_sum += batch_loss;
            for ((_, pred), ex) in results.iter().zip(&batch) {
                correct += ex.targets[pred.best_index];
            }
            opt.update(&mut params, &grads, lr_at(step, total_steps, config), config);
            if !params.all_finite() {
                return Err(GesaError::Diverged { step, loss: f64::NAN });
            }
        }
        let dev = if dev_set.is_empty() { None } else { Some(evaluate(&params, dev_set, model, config.threads)?.0) };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct / train_set.len() as f64,
            dev,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train acc {:.4}{} ({:.1}s)",
            entry.train_loss,
            entry.train_accuracy,
            entry.dev.map(|d| format!(" dev acc {:.4}", d.accuracy())).unwrap_or_default(),
            entry.seconds
        );
        on_epoch(&entry, &params)?;
        let reached = matches!((config.target_dev_accuracy, entry.dev), (Some(t), Some(d)) if d.accuracy() >= t);
        log.push(entry);
        if reached {
            break;
        }
    }
    Ok(TrainOutcome { params, log, steps: step })
}

/// Predictions for every example, in order, plus the metric summary.
pub fn evaluate(
    params: &ModelParams,
    examples: &[Example],
    model: &ModelConfig,
    threads: usize,
) -> Result<(MetricSummary, Vec<Prediction>)> {
    let preds: Vec<Prediction> = par_map(examples, threads, |ex| predict(ex, params, model)).into_iter().collect::<Result<_>>()?;
    let summary = summarize(preds.iter().zip(examples).map(|(p, ex)| (p.best_surface.as_str(), ex.golds.as_slice())));
    Ok((summary, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_dataset;
    use crate::vocab::build_vocab;

    fn tiny() -> (ModelConfig, Vec<Example>, ModelParams) {
        let model = ModelConfig { hidden: 16, head_size: 4, heads: 2, layers: 1, entity_embed_dim: 4, ..ModelConfig::desk() };
        let data = gen_dataset(6, 2, 3, 1, 5).unwrap();
        let vocab = build_vocab(&data);
        let ex = prepare_all(&data, &vocab, &model).unwrap();
        let params = ModelParams::init(&model, vocab.len(), 1);
        (model, ex, params)
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig { learning_rate: 1.0, warmup_ratio: 0.1, ..TrainConfig::default() };
        assert_eq!(lr_at(1, 100, &c), 0.1);
        assert_eq!(lr_at(10, 100, &c), 1.0);
        assert_eq!(lr_at(55, 100, &c), 0.5);
        assert_eq!(lr_at(100, 100, &c), 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, ex, params) = tiny();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, batch_size: 4, ..TrainConfig::default() };
        let out = train(params.clone(), &ex, &[], &model, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn same_seed_same_curve_any_thread_count() {
        let (model, ex, params) = tiny();
        let cfg = TrainConfig { learning_rate: 1e-2, epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let a = train(params.clone(), &ex, &ex, &model, &cfg, &mut |_, _| Ok(())).unwrap();
        let b = train(params.clone(), &ex, &ex, &model, &TrainConfig { threads: 3, ..cfg.clone() }, &mut |_, _| Ok(()))
            .unwrap();
        let curve = |o: &TrainOutcome| o.log.iter().map(|e| (e.train_loss, e.dev)).collect::<Vec<_>>();
        assert_eq!(curve(&a), curve(&b));
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, params);
    }

    #[test]
    fn empty_training_set() {
        let (model, _, params) = tiny();
        let err = train(params, &[], &[], &model, &TrainConfig::default(), &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, GesaError::InvalidArgument(_)));
    }

    #[test]
    fn huge_learning_rate_diverges_or_survives_with_finite_params() {
        let (model, ex, params) = tiny();
        let cfg = TrainConfig { learning_rate: 1e300, epochs: 1, batch_size: 2, warmup_ratio: 0.0, ..TrainConfig::default() };
        match train(params, &ex, &[], &model, &cfg, &mut |_, _| Ok(())) {
            Err(GesaError::Diverged { step, .. }) => assert!(step >= 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(out) => assert!(out.params.all_finite()),
        }
    }
}
