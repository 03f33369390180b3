//! Text checkpoints: configuration, vocabulary and every named tensor.
//!
//! ```text
//! gesa-checkpoint 1
//! # free-form comment lines
//! config <n>
//! <n key=value lines>
//! vocab <n>
//! <n tokens, one per line>
//! tensor <name> <rows> <cols>
//! <rows lines of cols space-separated values>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a write/read cycle is
//! exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::config::RunConfig;
use crate::error::{GesaError, Result};
use crate::model::ModelParams;
use crate::vocab::Vocabulary;

const MAGIC: &str = "gesa-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

pub fn write_checkpoint_to<W: Write>(w: &mut W, ck: &Checkpoint, comment: Option<&str>) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    for line in comment.unwrap_or_default().lines() {
        writeln!(w, "# {line}")?;
    }
    let rendered = ck.config.render();
    writeln!(w, "config {}", rendered.lines().count())?;
    w.write_all(rendered.as_bytes())?;
    // reserved tokens are rebuilt on load; only corpus tokens are stored
    let tokens = ck.vocab.tokens();
    let reserved = tokens.len() - ck.vocab.corpus_len();
    writeln!(w, "vocab {}", ck.vocab.corpus_len())?;
    for t in &tokens[reserved..] {
        writeln!(w, "{t}")?;
    }
    for (name, arr) in ck.params.tensors() {
        let (r, c) = arr.dim();
        writeln!(w, "tensor {name} {r} {c}")?;
        for row in arr.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint, comment: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(&mut w, ck, comment)?;
    w.flush()?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    n: usize,
    origin: String,
    /// Comments are only allowed between the magic line and the config block.
    in_preamble: bool,
}

impl<R: BufRead> Lines<R> {
    fn err(&self, msg: impl Into<String>) -> GesaError {
        GesaError::Checkpoint(format!("{}:{}: {}", self.origin, self.n, msg.into()))
    }

    fn next(&mut self) -> Result<String> {
        loop {
            self.n += 1;
            match self.inner.next() {
                Some(line) => {
                    let line = line?;
                    if !(self.in_preamble && line.starts_with('#')) {
                        return Ok(line);
                    }
                }
                None => return Err(self.err("unexpected end of file")),
            }
        }
    }

    fn header(&mut self, word: &str) -> Result<usize> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((w, n)) if w == word => n.trim().parse().map_err(|_| self.err(format!("bad count in {line:?}"))),
            _ => Err(self.err(format!("expected `{word} <n>`, got {line:?}"))),
        }
    }
}

pub fn read_checkpoint<R: BufRead>(reader: R, origin: &str) -> Result<Checkpoint> {
    let mut lines = Lines { inner: reader.lines(), n: 0, origin: origin.to_string(), in_preamble: false };
    if lines.next()? != MAGIC {
        return Err(lines.err("not a checkpoint (bad magic line)"));
    }
    lines.in_preamble = true;
    let n = lines.header("config")?;
    lines.in_preamble = false;
    let mut text = String::new();
    for _ in 0..n {
        text.push_str(&lines.next()?);
        text.push('\n');
    }
    let mut config = RunConfig::default();
    config.apply_text(&text)?;
    let n = lines.header("vocab")?;
    let mut toks = Vec::with_capacity(n);
    for _ in 0..n {
        toks.push(lines.next()?);
    }
    let vocab = Vocabulary::from_tokens(toks.iter().map(String::as_str));
    if vocab.corpus_len() != n {
        return Err(lines.err("vocabulary contains duplicate or reserved tokens"));
    }

    let mut params = ModelParams::zeros(&config.model, vocab.len());
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut slots = params.tensors_mut();
    for (name, slot) in names.iter().zip(slots.iter_mut()) {
        let line = lines.next()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let dims = match parts.as_slice() {
            ["tensor", n, r, c] if n == name => (r.parse::<usize>(), c.parse::<usize>()),
            _ => return Err(lines.err(format!("expected tensor {name}, got {line:?}"))),
        };
        let (r, c) = match dims {
            (Ok(r), Ok(c)) => (r, c),
            _ => return Err(lines.err(format!("bad shape in {line:?}"))),
        };
        if slot.dim() != (r, c) {
            return Err(lines.err(format!("tensor {name}: shape {r}x{c} does not match the config ({:?})", slot.dim())));
        }
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r {
            let row = lines.next()?;
            let before = data.len();
            for v in row.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| lines.err(format!("bad number {v:?}")))?);
            }
            if data.len() - before != c {
                return Err(lines.err(format!("tensor {name}: expected {c} values per row")));
            }
        }
        **slot = Array2::from_shape_vec((r, c), data).expect("shape checked");
    }
    drop(slots);
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    Ok(Checkpoint { config, vocab, params })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    read_checkpoint(BufReader::new(File::open(path)?), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let config = RunConfig {
            model: ModelConfig { hidden: 8, head_size: 2, heads: 2, layers: 1, entity_embed_dim: 3, ..ModelConfig::desk() },
            ..RunConfig::default()
        };
        let vocab = Vocabulary::from_tokens(["alpha", "#beta", "."]);
        let mut params = ModelParams::init(&config.model, vocab.len(), 4);
        params.reader.b[[0, 0]] = -0.0;
        params.layers[0].ln1_bias[[0, 1]] = 1e-300;
        params.layers[0].ln1_bias[[0, 2]] = 0.1 + 0.2;
        Checkpoint { config, vocab, params }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &ck, Some("seed=4\nnote")).unwrap();
        let back = read_checkpoint(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, ck);
        assert!(back.params.reader.b[[0, 0]].is_sign_negative());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &sample(), None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(40).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_checkpoint(cut.as_bytes(), "mem"), Err(GesaError::Checkpoint(_))));
        assert!(read_checkpoint("nope\n".as_bytes(), "mem").is_err());
    }
}
