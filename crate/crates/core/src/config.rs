//! Flat `key=value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! hidden=64
//! ablations=LOCAL_E2E,DROP_E2E_PLC
//! target_dev_accuracy=none
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{GesaError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every accepted key, in the order [`RunConfig::render`] writes them.
pub const KEYS: [&str; 23] = [
    "max_len",
    "hidden",
    "head_size",
    "heads",
    "layers",
    "window",
    "entity_embed_dim",
    "max_q_len",
    "w2w_mode",
    "ablations",
    "ffn_mult",
    "init_std",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "warmup_ratio",
    "epochs",
    "batch_size",
    "seed",
    "threads",
    "target_dev_accuracy",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| GesaError::Config(format!("bad value {value:?} for {key}: {e}")))
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn full_scale() -> Self {
        Self { model: ModelConfig::full_scale(), train: TrainConfig::full_scale() }
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        let value = value.trim();
        match key.trim() {
            "max_len" => m.max_len = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "head_size" => m.head_size = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "window" => m.window = parse(key, value)?,
            "entity_embed_dim" => m.entity_embed_dim = parse(key, value)?,
            "max_q_len" => m.max_q_len = parse(key, value)?,
            "w2w_mode" => m.w2w_mode = parse(key, value)?,
            "ablations" => m.ablations = parse(key, value)?,
            "ffn_mult" => m.ffn_mult = parse(key, value)?,
            "init_std" => m.init_std = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "adam_beta1" => t.beta1 = parse(key, value)?,
            "adam_beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "warmup_ratio" => t.warmup_ratio = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "threads" => t.threads = parse(key, value)?,
            "target_dev_accuracy" => {
                t.target_dev_accuracy = if value.eq_ignore_ascii_case("none") { None } else { Some(parse(key, value)?) }
            }
            other => return Err(GesaError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GesaError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides such as command-line `--set` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| GesaError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    fn value_of(&self, key: &str) -> String {
        let (m, t) = (&self.model, &self.train);
        match key {
            "max_len" => m.max_len.to_string(),
            "hidden" => m.hidden.to_string(),
            "head_size" => m.head_size.to_string(),
            "heads" => m.heads.to_string(),
            "layers" => m.layers.to_string(),
            "window" => m.window.to_string(),
            "entity_embed_dim" => m.entity_embed_dim.to_string(),
            "max_q_len" => m.max_q_len.to_string(),
            "w2w_mode" => m.w2w_mode.to_string(),
            "ablations" => m.ablations.to_string(),
            "ffn_mult" => m.ffn_mult.to_string(),
            "init_std" => m.init_std.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "adam_beta1" => t.beta1.to_string(),
            "adam_beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "warmup_ratio" => t.warmup_ratio.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "threads" => t.threads.to_string(),
            "target_dev_accuracy" => t.target_dev_accuracy.map_or("none".into(), |v| v.to_string()),
            _ => unreachable!("key list and renderer out of sync"),
        }
    }

    /// One `key=value` line per key, in [`KEYS`] order. Parses back to `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            writeln!(s, "{k}={}", self.value_of(k)).expect("writing to a String");
        }
        s
    }

    /// Short hash of the rendered configuration, excluding `threads`, which never changes results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.render().lines().filter(|l| !l.starts_with("threads=")) {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// The rendered config as `#`-prefixed lines, for artifact headers.
    pub fn header(&self) -> String {
        let mut s = format!("config_hash={}\n", self.hash());
        s.push_str(&self.render());
        s.lines().map(|l| format!("# {l}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Ablation, W2wMode};

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("hidden=32\nablations=LOCAL_E2E,drop_e2e_plc\nw2w_mode=masked_window\ntarget_dev_accuracy=0.9\n").unwrap();
        assert_eq!(c.model.hidden, 32);
        assert!(c.model.ablations.has(Ablation::LocalE2e));
        assert_eq!(c.model.w2w_mode, W2wMode::MaskedWindow);
        let mut back = RunConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply_text("hiddne=3").unwrap_err();
        assert!(err.to_string().contains("hiddne"));
        assert!(c.apply_text("hidden").is_err());
        assert!(c.apply_text("hidden=abc").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let mut c = RunConfig::default();
        c.apply_text("# a comment\n\n  layers = 3 \n").unwrap();
        assert_eq!(c.model.layers, 3);
    }

    #[test]
    fn hash_ignores_threads_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.threads = 8;
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn keys_cover_renderer() {
        let text = RunConfig::default().render();
        assert_eq!(text.lines().count(), KEYS.len());
    }
}
