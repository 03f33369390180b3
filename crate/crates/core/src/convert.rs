//! Conversion from ReCoRD-style and WikiHop-style sources into cloze instances.
//!
//! ReCoRD-style input is either one JSON document with a top-level `data`
//! array or one JSON object per line. Each entry looks like
//!
//! ```text
//! {"passage": {"text": "...", "entities": [{"start": 0, "end": 7}]},
//!  "qas": [{"id": "q1", "query": "... @placeholder ...",
//!           "answers": [{"start": 0, "end": 7, "text": "Ed Balls"}]}]}
//! ```
//!
//! Character offsets are inclusive at both ends. Text is split on whitespace;
//! an entity span that starts or ends inside a token is widened to whole tokens.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use crate::corpus::{ClozeInstance, Mention, PLACEHOLDER};
use crate::error::{GesaError, Result};
use crate::graph::segment_sentences;

pub const DEFAULT_MARKER: &str = "@placeholder";

#[derive(Debug, Deserialize)]
struct Span {
    start: usize,
    end: usize,
}

#[derive(Debug, Deserialize)]
struct Answer {
    text: String,
}

#[derive(Debug, Deserialize)]
struct Query {
    #[serde(default)]
    id: Option<serde_json::Value>,
    query: String,
    #[serde(default)]
    answers: Vec<Answer>,
}

#[derive(Debug, Deserialize)]
struct Passage {
    text: String,
    #[serde(default)]
    entities: Vec<Span>,
}

#[derive(Debug, Deserialize)]
struct Entry {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    idx: Option<serde_json::Value>,
    passage: Passage,
    qas: Vec<Query>,
}

#[derive(Debug, Deserialize)]
struct Document {
    data: Vec<Entry>,
}

/// Counts of everything the converter skipped or adjusted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConversionReport {
    pub passages: usize,
    pub queries: usize,
    pub converted: usize,
    pub skipped_no_marker: usize,
    pub skipped_multiple_markers: usize,
    pub skipped_no_answer: usize,
    pub skipped_invalid: usize,
    pub widened_spans: usize,
    pub dropped_spans: usize,
}

impl ConversionReport {
    pub fn skipped(&self) -> usize {
        self.skipped_no_marker + self.skipped_multiple_markers + self.skipped_no_answer + self.skipped_invalid
    }
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Whitespace tokens with their character ranges (half-open, in chars).
fn tokenize_with_offsets(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_whitespace() {
            if !current.is_empty() {
                out.push((std::mem::take(&mut current), start, i));
            }
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push((current, start, n));
    }
    out
}

/// Replaces the single occurrence of `marker` by a `[PLC]` token.
///
/// Text glued to the marker (`@placeholder's`) becomes its own token.
fn question_tokens(query: &str, marker: &str) -> std::result::Result<Vec<String>, usize> {
    let count = query.matches(marker).count();
    if count != 1 {
        return Err(count);
    }
    let mut out = Vec::new();
    for tok in query.split_whitespace() {
        match tok.find(marker) {
            Some(at) => {
                let (prefix, rest) = tok.split_at(at);
                let suffix = &rest[marker.len()..];
                if !prefix.is_empty() {
                    out.push(prefix.to_string());
                }
                out.push(PLACEHOLDER.to_string());
                if !suffix.is_empty() {
                    out.push(suffix.to_string());
                }
            }
            None => out.push(tok.to_string()),
        }
    }
    Ok(out)
}

/// Passage sentences plus mentions for its entity spans. Shared by every query of the passage.
fn convert_passage(passage: &Passage, report: &mut ConversionReport) -> (Vec<Vec<String>>, Vec<Mention>) {
    let tokens = tokenize_with_offsets(&passage.text);
    let words: Vec<String> = tokens.iter().map(|t| t.0.clone()).collect();
    let sentences = segment_sentences(&words);
    // global token index -> (sentence, position)
    let mut locate = Vec::with_capacity(tokens.len());
    for (s, sent) in sentences.iter().enumerate() {
        for p in 0..sent.len() {
            locate.push((s, p));
        }
    }

    let mut spans = BTreeSet::new();
    for e in &passage.entities {
        // inclusive end offset
        let (cs, ce) = (e.start, e.end + 1);
        let covered: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, (_, s, t))| *s < ce && cs < *t)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
            log::warn!("entity span {}..={} covers no token; dropped", e.start, e.end);
            report.dropped_spans += 1;
            continue;
        };
        if tokens[first].1 != cs || tokens[last].2 != ce {
            log::warn!(
                "entity span {}..={} does not align with tokens; widened to {:?}",
                e.start,
                e.end,
                words[first..=last].join(" ")
            );
            report.widened_spans += 1;
        }
        if locate[first].0 != locate[last].0 {
            log::warn!("entity span {}..={} crosses a sentence boundary; dropped", e.start, e.end);
            report.dropped_spans += 1;
            continue;
        }
        spans.insert((first, last + 1));
    }

    let mut mentions = Vec::new();
    let mut taken_until = 0;
    for (first, end) in spans {
        if first < taken_until {
            log::warn!("entity span over tokens {first}..{end} overlaps an earlier one; dropped");
            report.dropped_spans += 1;
            continue;
        }
        taken_until = end;
        let (s, p) = locate[first];
        mentions.push(Mention {
            surface: words[first..end].join(" "),
            sentence_index: s,
            token_start: p,
            token_end: p + (end - first),
        });
    }
    (sentences, mentions)
}

fn parse_entries(text: &str, origin: &Path) -> Result<Vec<Entry>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        if let Ok(doc) = serde_json::from_str::<Document>(text) {
            return Ok(doc.data);
        }
    }
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(line).map_err(|e| GesaError::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Converts a ReCoRD-style file. Queries without exactly one marker, or without answers, are skipped and counted.
pub fn convert_record_style(path: impl AsRef<Path>, marker: &str) -> Result<(Vec<ClozeInstance>, ConversionReport)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    convert_record_text(&text, marker, path)
}

pub fn convert_record_text(text: &str, marker: &str, origin: &Path) -> Result<(Vec<ClozeInstance>, ConversionReport)> {
    if marker.is_empty() {
        return Err(GesaError::InvalidArgument("placeholder marker must be non-empty".into()));
    }
    let entries = parse_entries(text, origin)?;
    let mut report = ConversionReport::default();
    let mut out = Vec::new();
    for (e, entry) in entries.iter().enumerate() {
        report.passages += 1;
        let (sentences, mentions) = convert_passage(&entry.passage, &mut report);
        let entry_id = entry.id.as_ref().or(entry.idx.as_ref()).map(id_string).unwrap_or_else(|| e.to_string());
        for (q, qa) in entry.qas.iter().enumerate() {
            report.queries += 1;
            let id = qa.id.as_ref().map(id_string).unwrap_or_else(|| format!("{entry_id}-{q}"));
            let question = match question_tokens(&qa.query, marker) {
                Ok(t) => t,
                Err(0) => {
                    log::warn!("query {id}: no {marker:?} marker; skipped");
                    report.skipped_no_marker += 1;
                    continue;
                }
                Err(n) => {
                    log::warn!("query {id}: {n} {marker:?} markers; skipped");
                    report.skipped_multiple_markers += 1;
                    continue;
                }
            };
            let mut golds: Vec<String> = Vec::new();
            for a in &qa.answers {
                if !golds.contains(&a.text) {
                    golds.push(a.text.clone());
                }
            }
            if golds.is_empty() {
                log::warn!("query {id}: no answers; skipped");
                report.skipped_no_answer += 1;
                continue;
            }
            let instance = ClozeInstance {
                id,
                question_tokens: question,
                sentences: sentences.clone(),
                candidates: (0..mentions.len()).collect(),
                mentions: mentions.clone(),
                gold_answers: golds,
            };
            match instance.validate() {
                Ok(()) => {
                    report.converted += 1;
                    out.push(instance);
                }
                Err(err) => {
                    log::warn!("{err}; skipped");
                    report.skipped_invalid += 1;
                }
            }
        }
    }
    log::info!(
        "converted {} of {} queries ({} skipped: {} without marker, {} with several, {} without answers, {} invalid)",
        report.converted,
        report.queries,
        report.skipped(),
        report.skipped_no_marker,
        report.skipped_multiple_markers,
        report.skipped_no_answer,
        report.skipped_invalid
    );
    Ok((out, report))
}

/// WikiHop query `property subject` as a cloze question: `[PLC]`, the property words, then the subject.
pub fn convert_wikihop_query<S: AsRef<str>>(property: &str, subject_tokens: &[S]) -> Result<Vec<String>> {
    let words: Vec<String> = property.split('_').filter(|w| !w.is_empty()).map(str::to_string).collect();
    if words.is_empty() {
        return Err(GesaError::InvalidArgument("empty WikiHop property".into()));
    }
    let mut out = vec![PLACEHOLDER.to_string()];
    out.extend(words);
    out.extend(subject_tokens.iter().map(|s| s.as_ref().to_string()));
    Ok(out)
}
