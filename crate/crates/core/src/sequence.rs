//! Model input layout: `[CLS] Q [SEP] [SEP] D [SEP]` as word tokens, then the entity input.
//!
//! Every document mention is wrapped in a pair of `[ENT]` markers. The entity
//! input holds one `[MASK]` token for the missing entity, followed by one token
//! per surviving mention in document order.

use std::collections::HashSet;
use std::ops::Range;

use crate::corpus::{normalize_answer, ClozeInstance, PLACEHOLDER};
use crate::error::{GesaError, Result};
use crate::vocab::{Vocabulary, CLS_ID, ENT_ID, PLC_ID, SEP_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordRole {
    Cls,
    Question,
    PlcWord,
    Sep,
    Doc,
    EntMark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordToken {
    pub id: usize,
    pub role: WordRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityKind {
    Placeholder,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityToken {
    pub kind: EntityKind,
    pub mention_ref: Option<usize>,
    /// Word-token indices of the mention, `[ENT]` markers excluded.
    pub mention_word_span: Option<Range<usize>>,
}

impl EntityToken {
    pub fn placeholder() -> Self {
        Self {
            kind: EntityKind::Placeholder,
            mention_ref: None,
            mention_word_span: None,
        }
    }

    pub fn candidate(mention: usize, span: Range<usize>) -> Self {
        Self {
            kind: EntityKind::Candidate,
            mention_ref: Some(mention),
            mention_word_span: Some(span),
        }
    }
}

/// An entity token that the reader head scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSlot {
    /// Index into `entity_tokens`.
    pub entity: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub word_tokens: Vec<WordToken>,
    pub entity_tokens: Vec<EntityToken>,
    /// Entity tokens whose mention is listed in the instance's candidates.
    pub candidates: Vec<CandidateSlot>,
    /// Mentions removed by truncation.
    pub dropped_mentions: usize,
}

impl TokenSequence {
    /// Total length `P`.
    pub fn len(&self) -> usize {
        self.word_tokens.len() + self.entity_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn word_count(&self) -> usize {
        self.word_tokens.len()
    }

    pub fn entity_count(&self) -> usize {
        self.entity_tokens.len()
    }

    /// Sequence position of entity token `e`.
    pub fn entity_position(&self, e: usize) -> usize {
        self.word_tokens.len() + e
    }

    /// Binary targets per candidate slot: 1 when the surface normalizes to a gold answer.
    pub fn targets(&self, instance: &ClozeInstance) -> Vec<f64> {
        let golds = instance.normalized_golds();
        self.candidates
            .iter()
            .map(|c| f64::from(u8::from(golds.contains(&normalize_answer(&c.surface)))))
            .collect()
    }

    /// Reorders candidate entity tokens. `order` is a permutation of `1..entity_count`;
    /// the placeholder entity stays first.
    pub fn permute_entities(&self, order: &[usize]) -> Result<TokenSequence> {
        let n = self.entity_tokens.len();
        let mut seen = vec![false; n];
        if order.len() + 1 != n {
            return Err(GesaError::Sequence(format!(
                "permutation has {} entries, expected {}",
                order.len(),
                n.saturating_sub(1)
            )));
        }
        for &o in order {
            if o == 0 || o >= n || std::mem::replace(&mut seen[o], true) {
                return Err(GesaError::Sequence(format!("invalid entity permutation {order:?}")));
            }
        }
        let mut new_index = vec![0usize; n];
        for (pos, &old) in order.iter().enumerate() {
            new_index[old] = pos + 1;
        }
        let mut entity_tokens = vec![self.entity_tokens[0].clone()];
        entity_tokens.extend(order.iter().map(|&o| self.entity_tokens[o].clone()));
        let candidates = self
            .candidates
            .iter()
            .map(|c| CandidateSlot {
                entity: new_index[c.entity],
                surface: c.surface.clone(),
            })
            .collect();
        Ok(TokenSequence {
            word_tokens: self.word_tokens.clone(),
            entity_tokens,
            candidates,
            dropped_mentions: self.dropped_mentions,
        })
    }
}

/// Question length counted with its `[CLS]` and first `[SEP]`.
pub fn question_length_with_specials(instance: &ClozeInstance) -> usize {
    instance.question_tokens.len() + 2
}

/// Assembles the model input for `instance`.
///
/// Documents longer than the budget are cut from the end. A mention that would
/// be cut is dropped along with everything after it.
pub fn build_sequence(
    instance: &ClozeInstance,
    vocab: &Vocabulary,
    max_len: usize,
    max_q_len: usize,
) -> Result<TokenSequence> {
    let q_len = question_length_with_specials(instance);
    if q_len > max_q_len {
        return Err(GesaError::Sequence(format!(
            "instance {}: question length {q_len} exceeds max_q_len {max_q_len}",
            instance.id
        )));
    }
    if instance.mentions.is_empty() || instance.candidates.is_empty() {
        return Err(GesaError::Sequence(format!("instance {}: no candidates", instance.id)));
    }

    let mut words = Vec::with_capacity(max_len);
    words.push(WordToken { id: CLS_ID, role: WordRole::Cls });
    for tok in &instance.question_tokens {
        if tok == PLACEHOLDER {
            words.push(WordToken { id: PLC_ID, role: WordRole::PlcWord });
        } else {
            words.push(WordToken { id: vocab.id(tok), role: WordRole::Question });
        }
    }
    words.push(WordToken { id: SEP_ID, role: WordRole::Sep });
    words.push(WordToken { id: SEP_ID, role: WordRole::Sep });

    // Fixed cost so far: words, the closing [SEP], and the placeholder entity.
    let fixed = words.len() + 2;
    if fixed > max_len {
        return Err(GesaError::Sequence(format!(
            "instance {}: question alone needs {fixed} positions, max_len is {max_len}",
            instance.id
        )));
    }
    let mut budget = max_len - fixed;

    // mention index -> sorted order by (sentence, start)
    let mut order: Vec<usize> = (0..instance.mentions.len()).collect();
    order.sort_by_key(|&m| {
        let m = &instance.mentions[m];
        (m.sentence_index, m.token_start)
    });
    let mut starts = vec![Vec::new(); instance.sentences.len()];
    for &m in &order {
        let mention = &instance.mentions[m];
        starts[mention.sentence_index].push((mention.token_start, m));
    }

    let mut kept: Vec<(usize, Range<usize>)> = Vec::new();
    'doc: for (s, sentence) in instance.sentences.iter().enumerate() {
        let mut pending = starts[s].iter().peekable();
        let mut t = 0;
        while t < sentence.len() {
            if let Some(&&(start, m)) = pending.peek() {
                if start == t {
                    pending.next();
                    let mention = &instance.mentions[m];
                    let cost = mention.len() + 3;
                    if cost > budget {
                        break 'doc;
                    }
                    budget -= cost;
                    words.push(WordToken { id: ENT_ID, role: WordRole::EntMark });
                    let span_start = words.len();
                    for tok in &sentence[mention.token_start..mention.token_end] {
                        words.push(WordToken { id: vocab.id(tok), role: WordRole::Doc });
                    }
                    kept.push((m, span_start..words.len()));
                    words.push(WordToken { id: ENT_ID, role: WordRole::EntMark });
                    t = mention.token_end;
                    continue;
                }
            }
            if budget == 0 {
                break 'doc;
            }
            budget -= 1;
            words.push(WordToken { id: vocab.id(&sentence[t]), role: WordRole::Doc });
            t += 1;
        }
    }
    words.push(WordToken { id: SEP_ID, role: WordRole::Sep });

    let candidate_set: HashSet<usize> = instance.candidates.iter().copied().collect();
    let mut entity_tokens = vec![EntityToken::placeholder()];
    let mut candidates = Vec::new();
    for (m, span) in &kept {
        if candidate_set.contains(m) {
            candidates.push(CandidateSlot {
                entity: entity_tokens.len(),
                surface: instance.mentions[*m].surface.clone(),
            });
        }
        entity_tokens.push(EntityToken::candidate(*m, span.clone()));
    }
    if candidates.is_empty() {
        return Err(GesaError::Sequence(format!(
            "instance {}: all candidates truncated away",
            instance.id
        )));
    }

    let seq = TokenSequence {
        word_tokens: words,
        entity_tokens,
        candidates,
        dropped_mentions: instance.mentions.len() - kept.len(),
    };
    debug_assert!(seq.len() <= max_len);
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;
    use crate::vocab::build_vocab;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn rex() -> ClozeInstance {
        ClozeInstance {
            id: "rex".into(),
            question_tokens: toks("the [PLC] won"),
            sentences: vec![toks("Rex barked")],
            mentions: vec![Mention {
                surface: "Rex".into(),
                sentence_index: 0,
                token_start: 0,
                token_end: 1,
            }],
            candidates: vec![0],
            gold_answers: vec!["Rex".into()],
        }
    }

    fn render(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
        seq.word_tokens
            .iter()
            .map(|w| vocab.token(w.id).unwrap().to_string())
            .collect()
    }

    #[test]
    fn hand_laid_out_example() {
        let inst = rex();
        let vocab = build_vocab(std::slice::from_ref(&inst));
        let seq = build_sequence(&inst, &vocab, 64, 16).unwrap();
        assert_eq!(
            render(&seq, &vocab),
            toks("[CLS] the [PLC] won [SEP] [SEP] [ENT] Rex [ENT] barked [SEP]")
        );
        use WordRole::*;
        let roles: Vec<_> = seq.word_tokens.iter().map(|w| w.role).collect();
        assert_eq!(
            roles,
            vec![Cls, Question, PlcWord, Question, Sep, Sep, EntMark, Doc, EntMark, Doc, Sep]
        );
        assert_eq!(seq.entity_tokens.len(), 2);
        assert_eq!(seq.entity_tokens[0], EntityToken::placeholder());
        assert_eq!(seq.entity_tokens[1], EntityToken::candidate(0, 7..8));
        assert_eq!(seq.candidates, vec![CandidateSlot { entity: 1, surface: "Rex".into() }]);
        assert_eq!(seq.len(), 13);
    }

    #[test]
    fn zero_mentions_is_an_error() {
        let mut inst = rex();
        inst.mentions.clear();
        inst.candidates.clear();
        let vocab = build_vocab(std::slice::from_ref(&inst));
        let err = build_sequence(&inst, &vocab, 64, 16).unwrap_err();
        assert!(err.to_string().contains("no candidates"));
    }

    #[test]
    fn question_too_long() {
        let inst = rex();
        let vocab = build_vocab(std::slice::from_ref(&inst));
        assert!(build_sequence(&inst, &vocab, 64, 4).is_err());
        assert!(build_sequence(&inst, &vocab, 64, 5).is_ok());
    }

    fn two_sentence() -> ClozeInstance {
        ClozeInstance {
            id: "two".into(),
            question_tokens: toks("[PLC] met Ann"),
            sentences: vec![toks("Ann met Bob ."), toks("Cid ran far .")],
            mentions: vec![
                Mention { surface: "Ann".into(), sentence_index: 0, token_start: 0, token_end: 1 },
                Mention { surface: "Bob".into(), sentence_index: 0, token_start: 2, token_end: 3 },
                Mention { surface: "Cid".into(), sentence_index: 1, token_start: 0, token_end: 1 },
            ],
            candidates: vec![1, 2],
            gold_answers: vec!["Bob".into()],
        }
    }

    #[test]
    fn truncation_drops_tail_and_its_entities() {
        let inst = two_sentence();
        let vocab = build_vocab(std::slice::from_ref(&inst));
        let full = build_sequence(&inst, &vocab, 128, 16).unwrap();
        // words: 1 + 3 + 3 + 8 + 2*3 = 21, entities 4
        assert_eq!(full.word_count(), 21);
        assert_eq!(full.entity_count(), 4);
        assert_eq!(full.len(), 25);

        // Drop Cid: budget must not cover its 4-position mention block.
        let cut = build_sequence(&inst, &vocab, 21, 16).unwrap();
        assert!(cut.len() <= 21);
        assert_eq!(cut.entity_count(), 3);
        assert_eq!(cut.dropped_mentions, 1);
        assert_eq!(cut.candidates.len(), 1);
        assert_eq!(cut.candidates[0].surface, "Bob");
        assert_eq!(
            render(&cut, &vocab),
            toks("[CLS] [PLC] met Ann [SEP] [SEP] [ENT] Ann [ENT] met [ENT] Bob [ENT] . [SEP]")
        );
    }

    #[test]
    fn all_candidates_truncated() {
        let inst = two_sentence();
        let vocab = build_vocab(std::slice::from_ref(&inst));
        let err = build_sequence(&inst, &vocab, 12, 16).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn non_candidate_mentions_still_get_entity_tokens() {
        let inst = two_sentence();
        let vocab = build_vocab(std::slice::from_ref(&inst));
        let seq = build_sequence(&inst, &vocab, 128, 16).unwrap();
        let ents: Vec<_> = seq.candidates.iter().map(|c| c.entity).collect();
        assert_eq!(ents, vec![2, 3]);
        assert_eq!(seq.targets(&inst), vec![1.0, 0.0]);
    }

    #[test]
    fn permute_entities_moves_candidate_slots() {
        let inst = two_sentence();
        let vocab = build_vocab(std::slice::from_ref(&inst));
        let seq = build_sequence(&inst, &vocab, 128, 16).unwrap();
        let p = seq.permute_entities(&[3, 1, 2]).unwrap();
        assert_eq!(p.entity_tokens[1], seq.entity_tokens[3]);
        assert_eq!(p.candidates[0].entity, 3);
        assert_eq!(p.candidates[1].entity, 1);
        assert!(seq.permute_entities(&[1, 1, 2]).is_err());
        assert!(seq.permute_entities(&[0, 1, 2]).is_err());
    }
}
