//! Shared helpers for the integration tests: random instances and naive
//! re-implementations of the graph and label rules.

#![allow(dead_code)]

use std::collections::BTreeSet;

use gesa::labels::PatternConfig;
use gesa::sequence::{EntityKind, WordRole};
use gesa::{normalize_answer, Ablation, AblationSet, ClozeInstance, EdgeType, HeterogeneousGraph, Label, Mention, TokenSequence, W2wMode, PLACEHOLDER};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 6] = ["Ann", "Bo", "labour", "Labour", "Ed", "VAT"];
const WORDS: [&str; 8] = ["the", "plan", "said", "of", "and", "new", "tax", "."];

/// A valid instance with up to four sentences, multi-token mentions, case-variant
/// surfaces (so MATCH edges appear) and a random candidate subset.
pub fn random_instance(seed: u64) -> ClozeInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sent = rng.random_range(1..=4);
    let mut sentences = Vec::new();
    let mut mentions = Vec::new();
    for s in 0..n_sent {
        let mut toks: Vec<String> = Vec::new();
        let len = rng.random_range(1..=7);
        while toks.len() < len {
            if rng.random_bool(0.4) {
                let n = rng.random_range(1..=2);
                let start = toks.len();
                for _ in 0..n {
                    toks.push(NAMES.choose(&mut rng).unwrap().to_string());
                }
                mentions.push(Mention { surface: toks[start..].join(" "), sentence_index: s, token_start: start, token_end: toks.len() });
            } else {
                toks.push(WORDS.choose(&mut rng).unwrap().to_string());
            }
        }
        sentences.push(toks);
    }
    if mentions.is_empty() {
        sentences[0].push("Ed".into());
        let end = sentences[0].len();
        mentions.push(Mention { surface: "Ed".into(), sentence_index: 0, token_start: end - 1, token_end: end });
    }
    let mut candidates: Vec<usize> = (0..mentions.len()).filter(|_| rng.random_bool(0.7)).collect();
    if candidates.is_empty() {
        candidates.push(rng.random_range(0..mentions.len()));
    }
    let q_len = rng.random_range(0..=3);
    let mut question: Vec<String> = (0..q_len).map(|_| WORDS.choose(&mut rng).unwrap().to_string()).collect();
    question.insert(rng.random_range(0..=q_len), PLACEHOLDER.to_string());
    let gold = mentions[*candidates.choose(&mut rng).unwrap()].surface.clone();
    let inst = ClozeInstance {
        id: format!("rand-{seed}"),
        question_tokens: question,
        sentences,
        mentions,
        candidates,
        gold_answers: vec![gold],
    };
    inst.validate().expect("generator emits valid instances");
    inst
}

pub fn random_ablations(rng: &mut ChaCha8Rng) -> AblationSet {
    Ablation::ALL.into_iter().filter(|_| rng.random_bool(0.25)).collect()
}

/// Edge rules re-read by hand: same sentence → SENT_BASED, different sentence and
/// equal normalized surface → MATCH, placeholder to everyone → PLC.
pub fn naive_edges(seq: &TokenSequence, mentions: &[Mention]) -> BTreeSet<(usize, usize, EdgeType)> {
    let mut out = BTreeSet::new();
    let n = seq.entity_count();
    for b in 1..n {
        out.insert((0, b, EdgeType::Plc));
    }
    for a in 1..n {
        for b in a + 1..n {
            let ma = &mentions[seq.entity_tokens[a].mention_ref.unwrap()];
            let mb = &mentions[seq.entity_tokens[b].mention_ref.unwrap()];
            if ma.sentence_index == mb.sentence_index {
                out.insert((a, b, EdgeType::SentBased));
            } else if normalize_answer(&ma.surface) == normalize_answer(&mb.surface) {
                out.insert((a, b, EdgeType::Match));
            }
        }
    }
    out
}

pub fn edge_set(graph: &HeterogeneousGraph) -> BTreeSet<(usize, usize, EdgeType)> {
    graph.edges().iter().map(|&(a, b, t)| (a.min(b), a.max(b), t)).collect()
}

fn is_q(r: WordRole) -> bool {
    matches!(r, WordRole::Question | WordRole::PlcWord)
}

fn clip(d: i64, k: usize) -> Label {
    Label::Window(d.clamp(-(k as i64), k as i64) as i32)
}

/// Label kind of one cell, or `None` when masked, straight from the rules.
pub fn naive_cell(seq: &TokenSequence, graph: &HeterogeneousGraph, cfg: &PatternConfig, i: usize, j: usize) -> Option<Label> {
    let nw = seq.word_count();
    let abl = &cfg.ablations;
    let k = cfg.k;
    match (i < nw, j < nw) {
        (true, true) => {
            let (ri, rj) = (seq.word_tokens[i].role, seq.word_tokens[j].role);
            let global = !abl.has(Ablation::NoGlobalW2w);
            if global && !abl.has(Ablation::DropGlobCls) && (ri == WordRole::Cls || rj == WordRole::Cls) {
                return Some(Label::GlobCls);
            }
            if global && !abl.has(Ablation::DropGlobQ) && (is_q(ri) || is_q(rj)) {
                return Some(Label::GlobQ);
            }
            let d = j as i64 - i as i64;
            if cfg.w2w_mode == W2wMode::MaskedWindow && d.unsigned_abs() as usize > k {
                return None;
            }
            Some(clip(d, k))
        }
        (true, false) | (false, true) => {
            let (w, e) = if i < nw { (i, j - nw) } else { (j, i - nw) };
            let ent = &seq.entity_tokens[e];
            let role = seq.word_tokens[w].role;
            let mention = match ent.kind {
                EntityKind::Placeholder => role == WordRole::PlcWord,
                EntityKind::Candidate => ent.mention_word_span.clone().unwrap().contains(&w),
            };
            Some(if mention {
                Label::W2eMention
            } else if ent.kind == EntityKind::Placeholder && is_q(role) {
                Label::W2ePlcq
            } else {
                Label::W2eNone
            })
        }
        (false, false) => {
            let (a, b) = (i - nw, j - nw);
            if abl.has(Ablation::LocalE2e) {
                return Some(clip(b as i64 - a as i64, k));
            }
            if a == b {
                return Some(Label::E2eSelf);
            }
            let kind = graph.edges().iter().find(|&&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a)).map(|e| e.2);
            Some(match kind {
                Some(EdgeType::Plc) => Label::E2ePlc,
                Some(EdgeType::SentBased) => Label::E2eSent,
                Some(EdgeType::Match) => Label::E2eMatch,
                None => Label::E2eNoEdge,
            })
        }
    }
}

/// What a label kind becomes once DROP_* and ONE_LABEL_ALL_EDGES are applied.
fn merged(l: Label, abl: &AblationSet) -> Label {
    let dropped = |l: Label| match l {
        Label::E2ePlc => abl.has(Ablation::DropE2ePlc),
        Label::E2eSent => abl.has(Ablation::DropE2eSent),
        Label::E2eMatch => abl.has(Ablation::DropE2eMatch),
        _ => false,
    };
    match l {
        Label::W2eMention if abl.has(Ablation::DropW2eMention) => Label::W2eNone,
        Label::W2ePlcq if abl.has(Ablation::DropW2ePlcq) => Label::W2eNone,
        Label::E2ePlc | Label::E2eSent | Label::E2eMatch if dropped(l) => Label::E2eNoEdge,
        Label::E2ePlc | Label::E2eSent | Label::E2eMatch if abl.has(Ablation::OneLabelAllEdges) => {
            [Label::E2ePlc, Label::E2eSent, Label::E2eMatch].into_iter().find(|&x| !dropped(x)).unwrap()
        }
        other => other,
    }
}

/// Fixed label kinds that keep an id of their own, in id order.
fn survivors(cfg: &PatternConfig) -> Vec<Label> {
    let abl = &cfg.ablations;
    let global = !abl.has(Ablation::NoGlobalW2w);
    let produced = |x: Label| match x {
        Label::GlobCls => global && !abl.has(Ablation::DropGlobCls),
        Label::GlobQ => global && !abl.has(Ablation::DropGlobQ),
        Label::W2eMention | Label::W2eNone | Label::W2ePlcq => true,
        _ => !abl.has(Ablation::LocalE2e),
    };
    Label::FIXED.into_iter().filter(|&x| produced(x) && merged(x, abl) == x).collect()
}

/// Dense id of a label kind: windows first, then every surviving fixed kind in order.
pub fn naive_id(l: Label, cfg: &PatternConfig) -> usize {
    let k = cfg.k;
    if let Label::Window(d) = l {
        return (d + k as i32) as usize;
    }
    let target = merged(l, &cfg.ablations);
    2 * k + 1 + survivors(cfg).iter().position(|&x| x == target).expect("label survives")
}

pub fn naive_vocab_size(cfg: &PatternConfig) -> usize {
    2 * cfg.k + 1 + survivors(cfg).len()
}

/// The whole matrix from the naive rules; `None` marks masked cells.
pub fn naive_matrix(seq: &TokenSequence, graph: &HeterogeneousGraph, cfg: &PatternConfig) -> Vec<Option<usize>> {
    let p = seq.len();
    let mut out = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            out.push(naive_cell(seq, graph, cfg, i, j).map(|l| naive_id(l, cfg)));
        }
    }
    out
}

