//! Exact match, token F1 and accuracy over predicted answers.

use std::collections::HashMap;

use crate::corpus::normalize_answer;

/// 1.0 when the normalized prediction equals any normalized gold answer.
pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_pair(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1, maximized over the gold answers.
pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_pair(prediction, g)).fold(0.0, f64::max)
}

/// Averages over a set of predictions. EM and F1 are in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub exact_match: f64,
    pub f1: f64,
}

impl MetricSummary {
    /// For single-answer multiple choice, accuracy and exact match coincide.
    pub fn accuracy(&self) -> f64 {
        self.exact_match
    }
}

pub fn summarize<'a, I>(pairs: I) -> MetricSummary
where
    I: IntoIterator<Item = (&'a str, &'a [String])>,
{
    let mut s = MetricSummary::default();
    for (pred, golds) in pairs {
        s.count += 1;
        s.exact_match += exact_match(pred, golds);
        s.f1 += token_f1(pred, golds);
    }
    if s.count > 0 {
        s.exact_match /= s.count as f64;
        s.f1 /= s.count as f64;
    }
    s
}
