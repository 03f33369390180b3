//! Synthetic cloze tasks whose answer is fixed by entity co-occurrence.
//!
//! * hops = 1: the question names a cue entity; the answer is the only
//!   candidate sharing a sentence with it. Distractor candidates appear in
//!   sentences without any other entity.
//! * hops = 2: the cue shares a sentence with a bridge entity `B`; a second
//!   mention of `B` shares another sentence with the answer. Each distractor
//!   candidate is either alone in its sentence or next to a one-off entity
//!   that is never repeated, so only the answer is reachable through a MATCH
//!   edge.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ClozeInstance, Mention, PLACEHOLDER};
use crate::error::{GesaError, Result};

const ONSETS: [&str; 8] = ["K", "L", "M", "R", "T", "S", "N", "V"];
const NUCLEI: [&str; 4] = ["a", "o", "i", "u"];
const CODAS: [&str; 3] = ["ren", "mos", "dil"];
const RELATIONS: [&str; 6] = ["met", "visited", "joined", "praised", "called", "helped"];
const FILLERS: [&str; 12] = [
    "old", "small", "quietly", "today", "river", "house", "red", "then", "also", "very", "near", "road",
];

/// Deterministic pool of capitalized one-token names.
pub fn name_pool() -> Vec<String> {
    let mut names = Vec::with_capacity(ONSETS.len() * NUCLEI.len() * CODAS.len());
    for o in ONSETS {
        for n in NUCLEI {
            for c in CODAS {
                names.push(format!("{o}{n}{c}"));
            }
        }
    }
    names
}

/// Tokens of one sentence with its mentions as `(start, end, surface)`.
type Sentence = (Vec<String>, Vec<(usize, usize, String)>);

struct Builder {
    sentences: Vec<Sentence>,
}

impl Builder {
    /// `[filler] X rel filler [filler] .`
    fn single(&mut self, x: &str, rng: &mut ChaCha8Rng) {
        let mut toks = Vec::new();
        if rng.random_bool(0.5) {
            toks.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        }
        let xs = toks.len();
        toks.push(x.to_string());
        toks.push(RELATIONS[rng.random_range(0..RELATIONS.len())].to_string());
        toks.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        if rng.random_bool(0.5) {
            toks.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        }
        toks.push(".".into());
        self.sentences.push((toks, vec![(xs, xs + 1, x.to_string())]));
    }

    fn filler(&mut self, rng: &mut ChaCha8Rng) {
        let n = rng.random_range(2..=4);
        let mut toks: Vec<String> = (0..n).map(|_| FILLERS[rng.random_range(0..FILLERS.len())].to_string()).collect();
        toks.push(".".into());
        self.sentences.push((toks, Vec::new()));
    }

    /// `[filler] X rel Y [filler] .` with the two names in random order.
    fn pair(&mut self, a: &str, b: &str, rng: &mut ChaCha8Rng) {
        let (x, y) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let mut toks = Vec::new();
        if rng.random_bool(0.5) {
            toks.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        }
        let xs = toks.len();
        toks.push(x.to_string());
        toks.push(RELATIONS[rng.random_range(0..RELATIONS.len())].to_string());
        let ys = toks.len();
        toks.push(y.to_string());
        if rng.random_bool(0.5) {
            toks.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        }
        toks.push(".".into());
        self.sentences.push((toks, vec![(xs, xs + 1, x.to_string()), (ys, ys + 1, y.to_string())]));
    }
}

/// Generates one instance; the same arguments always give the same instance.
pub fn gen_synthetic(n_candidates: usize, n_sentences: usize, hops: u8, seed: u64) -> Result<ClozeInstance> {
    let pool = name_pool();
    let bad = |m: String| Err(GesaError::InvalidArgument(m));
    if n_candidates < 2 {
        return bad(format!("n_candidates must be at least 2, got {n_candidates}"));
    }
    if n_sentences < n_candidates {
        return bad(format!("n_sentences ({n_sentences}) must be at least n_candidates ({n_candidates})"));
    }
    let names_needed = match hops {
        1 => n_candidates + 1,
        2 => {
            if n_sentences < n_candidates + 1 {
                return bad(format!("hops=2 needs n_sentences > n_candidates, got {n_sentences} ≤ {n_candidates}"));
            }
            2 * n_candidates + 1
        }
        h => return bad(format!("hops must be 1 or 2, got {h}")),
    };
    if names_needed > pool.len() {
        return bad(format!("{n_candidates} candidates need more than the {} available names", pool.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = pool;
    names.shuffle(&mut rng);
    let cue = names[0].clone();
    let answer = names[1].clone();
    let distractors: Vec<String> = names[2..n_candidates + 1].to_vec();

    let mut b = Builder { sentences: Vec::new() };
    let mut pair_count = 0;
    match hops {
        1 => {
            b.pair(&cue, &answer, &mut rng);
            pair_count += 1;
        }
        _ => {
            let bridge = names[2 * n_candidates].clone();
            b.pair(&cue, &bridge, &mut rng);
            b.pair(&bridge, &answer, &mut rng);
            pair_count += 2;
        }
    }
    if hops == 1 {
        for d in &distractors {
            b.single(d, &mut rng);
            pair_count += 1;
        }
    } else {
        for (d, p) in distractors.iter().zip(&names[n_candidates + 1..2 * n_candidates]) {
            if rng.random_bool(0.5) {
                b.pair(p, d, &mut rng);
            } else {
                b.single(d, &mut rng);
            }
            pair_count += 1;
        }
    }
    for _ in pair_count..n_sentences {
        b.filler(&mut rng);
    }
    b.sentences.shuffle(&mut rng);

    let mut sentences = Vec::with_capacity(b.sentences.len());
    let mut mentions = Vec::new();
    for (s, (toks, spans)) in b.sentences.into_iter().enumerate() {
        for (start, end, surface) in spans {
            mentions.push(Mention { surface, sentence_index: s, token_start: start, token_end: end });
        }
        sentences.push(toks);
    }
    let candidates: Vec<usize> = mentions
        .iter()
        .enumerate()
        .filter(|(_, m)| m.surface == answer || distractors.contains(&m.surface))
        .map(|(i, _)| i)
        .collect();

    let rel = RELATIONS[rng.random_range(0..RELATIONS.len())];
    let question: Vec<String> = if rng.random_bool(0.5) {
        vec![PLACEHOLDER.into(), rel.into(), cue.clone()]
    } else {
        vec![cue.clone(), rel.into(), PLACEHOLDER.into()]
    };

    let instance = ClozeInstance {
        id: format!("synth-h{hops}-{seed}"),
        question_tokens: question,
        sentences,
        mentions,
        candidates,
        gold_answers: vec![answer],
    };
    instance.validate()?;
    Ok(instance)
}

/// `n` instances with seeds `base_seed * 1_000_003 + i`.
pub fn gen_dataset(n: usize, n_candidates: usize, n_sentences: usize, hops: u8, base_seed: u64) -> Result<Vec<ClozeInstance>> {
    (0..n as u64)
        .map(|i| gen_synthetic(n_candidates, n_sentences, hops, base_seed.wrapping_mul(1_000_003).wrapping_add(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence_of(inst: &ClozeInstance, surface: &str) -> Vec<usize> {
        inst.mentions.iter().filter(|m| m.surface == surface).map(|m| m.sentence_index).collect()
    }

    #[test]
    fn one_hop_gold_shares_the_cue_sentence() {
        let inst = gen_synthetic(2, 3, 1, 7).unwrap();
        let cue = inst.question_tokens.iter().find(|t| *t != PLACEHOLDER && inst.mentions.iter().any(|m| &m.surface == *t));
        let cue = cue.expect("question names a cue");
        let cue_sents = sentence_of(&inst, cue);
        assert_eq!(cue_sents.len(), 1);
        let sharing: Vec<&str> = inst
            .candidates
            .iter()
            .map(|&c| &inst.mentions[c])
            .filter(|m| m.sentence_index == cue_sents[0])
            .map(|m| m.surface.as_str())
            .collect();
        assert_eq!(sharing, vec![inst.gold_answers[0].as_str()]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic(4, 6, 1, 3).unwrap(), gen_synthetic(4, 6, 1, 3).unwrap());
        assert_ne!(gen_synthetic(4, 6, 1, 3).unwrap(), gen_synthetic(4, 6, 1, 4).unwrap());
    }

    #[test]
    fn two_hop_has_bridge_in_two_sentences() {
        let inst = gen_synthetic(3, 5, 2, 11).unwrap();
        let mut twice = 0;
        for m in &inst.mentions {
            let s = sentence_of(&inst, &m.surface);
            if s.len() == 2 {
                assert_ne!(s[0], s[1]);
                twice += 1;
            }
        }
        assert_eq!(twice, 2, "exactly one name is mentioned twice");
    }

    #[test]
    fn shape_counts() {
        let inst = gen_synthetic(4, 6, 1, 0).unwrap();
        assert_eq!(inst.sentences.len(), 6);
        assert_eq!(inst.candidates.len(), 4);
        assert_eq!(inst.mentions.len(), 5);
    }

    #[test]
    fn preconditions() {
        assert!(gen_synthetic(1, 3, 1, 0).is_err());
        assert!(gen_synthetic(4, 3, 1, 0).is_err());
        assert!(gen_synthetic(3, 3, 2, 0).is_err());
        assert!(gen_synthetic(3, 3, 3, 0).is_err());
        assert!(gen_synthetic(96, 100, 1, 0).is_err());
        assert!(gen_synthetic(48, 60, 2, 0).is_err());
    }
}
