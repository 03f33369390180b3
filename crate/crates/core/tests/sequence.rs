mod common;

use common::random_instance;
use gesa::sequence::{EntityKind, WordRole};
use gesa::{build_sequence, build_vocab};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn counts_without_truncation(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let vocab = build_vocab(std::slice::from_ref(&inst));
        let seq = build_sequence(&inst, &vocab, 512, 16).unwrap();
        let doc: usize = inst.sentences.iter().map(Vec::len).sum();
        let m = inst.mentions.len();
        // [CLS] Q [SEP] [SEP] D [SEP], two [ENT] marks per mention
        prop_assert_eq!(seq.word_count(), 1 + inst.question_tokens.len() + 2 + doc + 2 * m + 1);
        prop_assert_eq!(seq.entity_count(), 1 + m);
        prop_assert_eq!(seq.candidates.len(), inst.candidates.len());
        prop_assert_eq!(seq.entity_tokens[0].kind, EntityKind::Placeholder);
        prop_assert_eq!(seq.word_tokens.iter().filter(|w| w.role == WordRole::PlcWord).count(), 1);
        prop_assert_eq!(seq.word_tokens.iter().filter(|w| w.role == WordRole::EntMark).count(), 2 * m);
        for e in &seq.entity_tokens[1..] {
            let span = e.mention_word_span.clone().unwrap();
            let mention = &inst.mentions[e.mention_ref.unwrap()];
            prop_assert_eq!(span.len(), mention.len());
            prop_assert_eq!(seq.word_tokens[span.start - 1].role, WordRole::EntMark);
            prop_assert_eq!(seq.word_tokens[span.end].role, WordRole::EntMark);
        }
    }

    #[test]
    fn truncation_respects_the_budget(seed in any::<u64>(), max_len in 8usize..40) {
        let inst = random_instance(seed);
        let vocab = build_vocab(std::slice::from_ref(&inst));
        if let Ok(seq) = build_sequence(&inst, &vocab, max_len, 16) {
            prop_assert!(seq.len() <= max_len);
            prop_assert_eq!(seq.entity_count() + seq.dropped_mentions, 1 + inst.mentions.len());
            prop_assert!(!seq.candidates.is_empty());
        }
    }
}
