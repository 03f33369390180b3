mod common;

use std::io::Cursor;
use std::path::Path;

use common::random_instance;
use gesa::convert::{convert_record_text, DEFAULT_MARKER};
use gesa::corpus::{read_native, write_native_to};
use gesa::metrics::{exact_match, token_f1};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn native_format_round_trips(seeds in prop::collection::vec(any::<u64>(), 0..6)) {
        let data: Vec<_> = seeds.iter().map(|&s| random_instance(s)).collect();
        let mut buf = Vec::new();
        write_native_to(&mut buf, &data, Some("generated\nfor a test")).unwrap();
        let back = read_native(Cursor::new(&buf), Path::new("mem")).unwrap();
        prop_assert_eq!(back, data);
    }

    /// Random passages, spans and queries always convert into valid instances.
    #[test]
    fn converted_instances_validate(
        words in prop::collection::vec("[A-Za-z]{1,6}[.,]?", 1..30),
        spans in prop::collection::vec((0usize..200, 0usize..12), 0..8),
        query in prop::collection::vec(prop_oneof![Just(DEFAULT_MARKER.to_string()), "[a-z]{1,5}"], 0..6),
        answer in "[A-Za-z]{1,6}",
    ) {
        let text = words.join(" ");
        let n = text.chars().count();
        let entities: Vec<serde_json::Value> = spans
            .iter()
            .map(|&(s, len)| {
                let s = s % n;
                serde_json::json!({"start": s, "end": (s + len).min(n - 1)})
            })
            .collect();
        let entry = serde_json::json!({
            "id": "p",
            "passage": {"text": text, "entities": entities},
            "qas": [{"id": "q", "query": query.join(" "), "answers": [{"start": 0, "end": 0, "text": answer}]}],
        });
        let (out, report) = convert_record_text(&entry.to_string(), DEFAULT_MARKER, Path::new("mem")).unwrap();
        prop_assert_eq!(out.len() + report.skipped(), report.queries);
        for inst in &out {
            prop_assert!(inst.validate().is_ok(), "{:?}", inst.validate());
        }
        let markers = query.iter().filter(|q| *q == DEFAULT_MARKER).count();
        if markers != 1 {
            prop_assert!(out.is_empty());
        }
    }

    #[test]
    fn metrics_are_bounded(pred in "[a-z ]{0,20}", gold in "[a-z ]{0,20}") {
        let golds = vec![gold];
        let f1 = token_f1(&pred, &golds);
        prop_assert!((0.0..=1.0).contains(&f1));
        if exact_match(&pred, &golds) == 1.0 {
            prop_assert_eq!(f1, 1.0);
        }
    }
}

#[test]
fn metric_examples() {
    let g = |s: &str| vec![s.to_string()];
    assert_eq!(exact_match("Ed Balls", &g("Ed Balls")), 1.0);
    assert_eq!(token_f1("Ed Balls", &g("Ed Balls")), 1.0);
    assert_eq!(exact_match("Ed Balls", &g("Balls")), 0.0);
    assert!((token_f1("Ed Balls", &g("Balls")) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(exact_match("the VAT.", &g("VAT")), 1.0);
    assert_eq!(exact_match("An  apple", &g("apple")), 1.0);
}
