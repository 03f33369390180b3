//! Cloze instances and the native line-oriented JSON format.
//!
//! One record per line:
//!
//! ```text
//! {"id":"q1","question":["[PLC]","won"],"sentences":[["Rex","barked","."]],
//!  "mentions":[{"surface":"Rex","sent":0,"start":0,"end":1}],"candidates":[0],"answers":["Rex"]}
//! ```
//!
//! Blank lines and lines starting with `#` are skipped, which lets writers
//! prepend a provenance header.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GesaError, Result};

/// Question token that marks the missing entity.
pub const PLACEHOLDER: &str = "[PLC]";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mention {
    pub surface: String,
    #[serde(rename = "sent")]
    pub sentence_index: usize,
    /// Half-open token range within the sentence.
    #[serde(rename = "start")]
    pub token_start: usize,
    #[serde(rename = "end")]
    pub token_end: usize,
}

impl Mention {
    pub fn len(&self) -> usize {
        self.token_end.saturating_sub(self.token_start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn overlaps(&self, other: &Mention) -> bool {
        self.sentence_index == other.sentence_index
            && self.token_start < other.token_end
            && other.token_start < self.token_end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClozeInstance {
    pub id: String,
    #[serde(rename = "question")]
    pub question_tokens: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    pub mentions: Vec<Mention>,
    /// Indices into `mentions` that are scored as answer candidates.
    pub candidates: Vec<usize>,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
}

impl ClozeInstance {
    /// Checks every structural invariant of an instance.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| GesaError::InvalidInstance {
            id: self.id.clone(),
            msg,
        };

        let plc_count = self
            .question_tokens
            .iter()
            .filter(|t| t.as_str() == PLACEHOLDER)
            .count();
        if plc_count != 1 {
            return Err(bad(format!("placeholder count ≠ 1 (found {plc_count})")));
        }

        for (idx, m) in self.mentions.iter().enumerate() {
            let sentence = self.sentences.get(m.sentence_index).ok_or_else(|| {
                bad(format!(
                    "mention {idx}: sentence {} out of range ({} sentences)",
                    m.sentence_index,
                    self.sentences.len()
                ))
            })?;
            if m.token_start >= m.token_end {
                return Err(bad(format!(
                    "mention {idx}: empty span {}..{}",
                    m.token_start, m.token_end
                )));
            }
            if m.token_end > sentence.len() {
                return Err(bad(format!(
                    "mention {idx}: span end {} exceeds sentence length {}",
                    m.token_end,
                    sentence.len()
                )));
            }
            let joined = sentence[m.token_start..m.token_end].join(" ");
            if joined != m.surface {
                return Err(bad(format!(
                    "mention {idx}: surface {:?} does not match span tokens {:?}",
                    m.surface, joined
                )));
            }
        }

        for (a, ma) in self.mentions.iter().enumerate() {
            for (b, mb) in self.mentions.iter().enumerate().skip(a + 1) {
                if ma.overlaps(mb) {
                    return Err(bad(format!("mentions {a} and {b} overlap")));
                }
            }
        }

        if self.candidates.is_empty() {
            return Err(bad("no candidates".into()));
        }
        let mut seen = HashSet::new();
        for &c in &self.candidates {
            if c >= self.mentions.len() {
                return Err(bad(format!(
                    "candidate index {c} out of range ({} mentions)",
                    self.mentions.len()
                )));
            }
            if !seen.insert(c) {
                return Err(bad(format!("candidate index {c} listed twice")));
            }
        }

        if self.gold_answers.is_empty() {
            return Err(bad("no gold answers".into()));
        }
        Ok(())
    }

    pub fn placeholder_position(&self) -> Option<usize> {
        self.question_tokens.iter().position(|t| t == PLACEHOLDER)
    }

    /// True when some candidate's normalized surface equals a normalized gold answer.
    pub fn is_answerable(&self) -> bool {
        let golds = self.normalized_golds();
        self.candidates
            .iter()
            .filter_map(|&c| self.mentions.get(c))
            .any(|m| golds.contains(&normalize_answer(&m.surface)))
    }

    pub fn normalized_golds(&self) -> HashSet<String> {
        self.gold_answers
            .iter()
            .map(|g| normalize_answer(g))
            .collect()
    }

    /// Every token of the question followed by every document token.
    pub fn token_stream(&self) -> impl Iterator<Item = &str> {
        self.question_tokens
            .iter()
            .chain(self.sentences.iter().flatten())
            .map(String::as_str)
    }
}

/// Lowercases, drops punctuation and the articles a/an/the, and collapses whitespace.
///
/// Shared by gold-answer matching, MATCH edges and the EM/F1 metrics.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_native(path: impl AsRef<Path>) -> Result<Vec<ClozeInstance>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_native(BufReader::new(file), path)
}

/// Reads native records from any buffered reader; `origin` is only used in error messages.
pub fn read_native<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<ClozeInstance>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| GesaError::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let inst: ClozeInstance =
            serde_json::from_str(trimmed).map_err(|e| parse_err(format!("malformed record: {e}")))?;
        inst.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

/// Writes instances one per line. Each line of `header` is emitted as a `# ` comment first.
pub fn write_native(
    path: impl AsRef<Path>,
    instances: &[ClozeInstance],
    header: Option<&str>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_native_to(&mut w, instances, header)?;
    w.flush()?;
    Ok(())
}

pub fn write_native_to<W: Write>(
    w: &mut W,
    instances: &[ClozeInstance],
    header: Option<&str>,
) -> Result<()> {
    if let Some(header) = header {
        for line in header.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn sample() -> ClozeInstance {
        ClozeInstance {
            id: "q1".into(),
            question_tokens: toks("the [PLC] won"),
            sentences: vec![toks("Rex barked .")],
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

    fn parse_str(s: &str) -> Result<Vec<ClozeInstance>> {
        read_native(s.as_bytes(), Path::new("mem"))
    }

    #[test]
    fn one_line_file_round_trips() {
        let mut buf = Vec::new();
        write_native_to(&mut buf, &[sample()], None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let parsed = parse_str(&text).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].id, "q1");
        assert_eq!(parsed[0], sample());
    }

    #[test]
    fn writer_emits_keys_in_field_order() {
        let line = serde_json::to_string(&sample()).unwrap();
        let order = ["\"id\"", "\"question\"", "\"sentences\"", "\"mentions\"", "\"candidates\"", "\"answers\""];
        let positions: Vec<usize> = order.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
        assert!(line.contains(r#"{"surface":"Rex","sent":0,"start":0,"end":1}"#));
    }

    #[test]
    fn header_lines_are_skipped() {
        let mut buf = Vec::new();
        write_native_to(&mut buf, &[sample()], Some("seed=3\nn=1")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# seed=3\n# n=1\n"));
        assert_eq!(parse_str(&text).unwrap().len(), 1);
    }

    #[test]
    fn span_past_sentence_end_names_the_mention() {
        let mut inst = sample();
        inst.mentions.push(Mention {
            surface: "barked . x".into(),
            sentence_index: 0,
            token_start: 1,
            token_end: 4,
        });
        let line = serde_json::to_string(&inst).unwrap();
        let err = parse_str(&format!("\n{line}\n")).unwrap_err().to_string();
        assert!(err.contains("mention 1"), "{err}");
        assert!(err.contains("mem:2"), "{err}");
    }

    #[test]
    fn two_placeholders_rejected() {
        let mut inst = sample();
        inst.question_tokens = toks("[PLC] and [PLC]");
        let err = inst.validate().unwrap_err().to_string();
        assert!(err.contains("placeholder count ≠ 1"), "{err}");
    }

    #[test]
    fn zero_placeholders_rejected() {
        let mut inst = sample();
        inst.question_tokens = toks("who won");
        assert!(inst.validate().is_err());
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_str("{\"id\": 3").unwrap_err().to_string();
        assert!(err.starts_with("mem:1"), "{err}");
        assert!(err.contains("malformed"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let line = serde_json::to_string(&sample())
            .unwrap()
            .replace("\"id\"", "\"extra\":1,\"id\"");
        assert!(parse_str(&line).is_err());
    }

    #[test]
    fn surface_must_match_span() {
        let mut inst = sample();
        inst.mentions[0].surface = "Max".into();
        assert!(inst.validate().is_err());
    }

    #[test]
    fn overlapping_mentions_rejected() {
        let mut inst = sample();
        inst.mentions.push(Mention {
            surface: "Rex barked".into(),
            sentence_index: 0,
            token_start: 0,
            token_end: 2,
        });
        let err = inst.validate().unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");
    }

    #[test]
    fn answerability_uses_normalization() {
        let mut inst = sample();
        inst.gold_answers = vec!["the REX!".into()];
        assert!(inst.is_answerable());
        inst.gold_answers = vec!["Max".into()];
        assert!(!inst.is_answerable());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The VAT."), "vat");
        assert_eq!(normalize_answer("  Ed   Balls "), "ed balls");
        assert_eq!(normalize_answer("an apple, a pear"), "apple pear");
        assert_eq!(normalize_answer("Labour's"), "labour s");
        assert_eq!(normalize_answer("the"), "");
    }
}
