//! Retrains the model under attention-pattern ablations and tabulates the differences.

use std::fmt;

use crate::corpus::ClozeInstance;
use crate::error::Result;
use crate::labels::AblationSet;
use crate::metrics::MetricSummary;
use crate::model::ModelParams;
use crate::config::RunConfig;
use crate::train::{evaluate, prepare_all, train};
use crate::vocab::build_vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// `FULL` for the unablated model, otherwise the ablation set.
    pub name: String,
    pub ablations: AblationSet,
    /// Dev metrics per seed, in seed order.
    pub per_seed: Vec<MetricSummary>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&MetricSummary) -> f64) -> f64 {
        if self.per_seed.is_empty() {
            return 0.0;
        }
        self.per_seed.iter().map(f).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.mean(|m| m.accuracy())
    }

    pub fn f1(&self) -> f64 {
        self.mean(|m| m.f1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// First row is always the full model.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn full(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn row(&self, ablations: &AblationSet) -> Option<&AblationRow> {
        self.rows.iter().find(|r| &r.ablations == ablations)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<40} {:>9} {:>9} {:>9} {:>9}", "spec", "accuracy", "delta", "f1", "delta")?;
        let base = self.full();
        for r in &self.rows {
            writeln!(
                f,
                "{:<40} {:>9.4} {:>+9.4} {:>9.4} {:>+9.4}",
                r.name,
                r.accuracy(),
                r.accuracy() - base.accuracy(),
                r.f1(),
                r.f1() - base.f1()
            )?;
        }
        Ok(())
    }
}

/// Trains the full model and every spec in `specs` once per seed and reports dev metrics.
///
/// Each run starts from `ModelParams::init` with the same seed; the training
/// seed is the same too, so runs differ only in the attention pattern.
pub fn run_ablation(
    specs: &[AblationSet],
    base: &RunConfig,
    train_set: &[ClozeInstance],
    dev_set: &[ClozeInstance],
    seeds: &[u64],
) -> Result<AblationTable> {
    let vocab = build_vocab(train_set);
    let mut all = vec![AblationSet::none()];
    all.extend(specs.iter().filter(|s| !s.is_empty()).cloned());
    let mut rows = Vec::with_capacity(all.len());
    for ablations in all {
        let mut model = base.model.clone();
        model.ablations = ablations.clone();
        model.validate()?;
        let train_ex = prepare_all(train_set, &vocab, &model)?;
        let dev_ex = prepare_all(dev_set, &vocab, &model)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut tc = base.train.clone();
            tc.seed = seed;
            let params = ModelParams::init(&model, vocab.len(), seed);
            let out = train(params, &train_ex, &dev_ex, &model, &tc, &mut |_, _| Ok(()))?;
            let (summary, _) = evaluate(&out.params, &dev_ex, &model, tc.threads)?;
            log::info!("ablation {ablations} seed {seed}: dev accuracy {:.4}", summary.accuracy());
            per_seed.push(summary);
        }
        let name = if ablations.is_empty() { "FULL".to_string() } else { ablations.to_string() };
        rows.push(AblationRow { name, ablations, per_seed });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}
