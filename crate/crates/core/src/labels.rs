//! Relative-position labels and the attention mask over a token sequence.
//!
//! The `P×P` matrix is split into four blocks by token type: word→word (w2w),
//! word→entity (w2e), entity→word (e2w) and entity→entity (e2e). Each cell gets
//! a discrete label which indexes a learned vector in every attention layer.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{GesaError, Result};
use crate::graph::{EdgeType, HeterogeneousGraph};
use crate::sequence::{EntityKind, TokenSequence, WordRole};

/// A relation kind before it is mapped to a dense id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// Clipped relative offset `j - i` in `[-k, k]`.
    Window(i32),
    GlobCls,
    GlobQ,
    W2eMention,
    W2eNone,
    W2ePlcq,
    E2ePlc,
    E2eSent,
    E2eMatch,
    E2eNoEdge,
    E2eSelf,
}

impl Label {
    /// Non-window labels in id order.
    pub const FIXED: [Label; 10] = [
        Label::GlobCls,
        Label::GlobQ,
        Label::W2eMention,
        Label::W2eNone,
        Label::W2ePlcq,
        Label::E2ePlc,
        Label::E2eSent,
        Label::E2eMatch,
        Label::E2eNoEdge,
        Label::E2eSelf,
    ];
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Window(d) => write!(f, "WIN({d})"),
            Label::GlobCls => f.write_str("GLOB_CLS"),
            Label::GlobQ => f.write_str("GLOB_Q"),
            Label::W2eMention => f.write_str("W2E_MENTION"),
            Label::W2eNone => f.write_str("W2E_NONE"),
            Label::W2ePlcq => f.write_str("W2E_PLCQ"),
            Label::E2ePlc => f.write_str("E2E_PLC"),
            Label::E2eSent => f.write_str("E2E_SENT"),
            Label::E2eMatch => f.write_str("E2E_MATCH"),
            Label::E2eNoEdge => f.write_str("E2E_NO_EDGE"),
            Label::E2eSelf => f.write_str("E2E_SELF"),
        }
    }
}

/// Attention block, keyed by (row type, column type).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    W2w = 0,
    W2e = 1,
    E2w = 2,
    E2e = 3,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::W2w, Block::W2e, Block::E2w, Block::E2e];

    pub fn of(row_is_entity: bool, col_is_entity: bool) -> Block {
        match (row_is_entity, col_is_entity) {
            (false, false) => Block::W2w,
            (false, true) => Block::W2e,
            (true, false) => Block::E2w,
            (true, true) => Block::E2e,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::W2w => "w2w",
            Block::W2e => "w2e",
            Block::E2w => "e2w",
            Block::E2e => "e2e",
        }
    }
}

/// How far word pairs outside the window are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum W2wMode {
    /// Far pairs attend with the extreme window labels.
    #[default]
    ClippedDense,
    /// Far non-global pairs are masked.
    MaskedWindow,
}

impl FromStr for W2wMode {
    type Err = GesaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped_dense" => Ok(W2wMode::ClippedDense),
            "masked_window" => Ok(W2wMode::MaskedWindow),
            other => Err(GesaError::Config(format!("unknown w2w_mode {other:?}"))),
        }
    }
}

impl fmt::Display for W2wMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            W2wMode::ClippedDense => "clipped_dense",
            W2wMode::MaskedWindow => "masked_window",
        })
    }
}

/// Ablation toggles over the attention pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    /// [CLS] and question words become ordinary window positions.
    NoGlobalW2w,
    /// e2e uses window labels over entity-input offsets instead of the graph.
    LocalE2e,
    /// w2e, e2w and e2e scores drop the relative term.
    Eq3InW2eE2wE2e,
    /// w2w scores drop the relative term.
    Eq3InW2w,
    DropGlobCls,
    DropGlobQ,
    DropW2eMention,
    DropW2ePlcq,
    DropE2eSent,
    DropE2eMatch,
    DropE2ePlc,
    OneLabelAllEdges,
}

impl Ablation {
    pub const ALL: [Ablation; 12] = [
        Ablation::NoGlobalW2w,
        Ablation::LocalE2e,
        Ablation::Eq3InW2eE2wE2e,
        Ablation::Eq3InW2w,
        Ablation::DropGlobCls,
        Ablation::DropGlobQ,
        Ablation::DropW2eMention,
        Ablation::DropW2ePlcq,
        Ablation::DropE2eSent,
        Ablation::DropE2eMatch,
        Ablation::DropE2ePlc,
        Ablation::OneLabelAllEdges,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoGlobalW2w => "NO_GLOBAL_W2W",
            Ablation::LocalE2e => "LOCAL_E2E",
            Ablation::Eq3InW2eE2wE2e => "EQ3_IN_W2E_E2W_E2E",
            Ablation::Eq3InW2w => "EQ3_IN_W2W",
            Ablation::DropGlobCls => "DROP_GLOB_CLS",
            Ablation::DropGlobQ => "DROP_GLOB_Q",
            Ablation::DropW2eMention => "DROP_W2E_MENTION",
            Ablation::DropW2ePlcq => "DROP_W2E_PLCQ",
            Ablation::DropE2eSent => "DROP_E2E_SENT",
            Ablation::DropE2eMatch => "DROP_E2E_MATCH",
            Ablation::DropE2ePlc => "DROP_E2E_PLC",
            Ablation::OneLabelAllEdges => "ONE_LABEL_ALL_EDGES",
        }
    }
}

impl FromStr for Ablation {
    type Err = GesaError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| GesaError::Config(format!("unknown ablation {s:?}")))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of ablation toggles; empty means the full model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AblationSet(BTreeSet<Ablation>);

impl AblationSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn insert(&mut self, a: Ablation) {
        self.0.insert(a);
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }

    /// Whether scores in `block` include the relative-position term.
    pub fn uses_relative(&self, block: Block) -> bool {
        match block {
            Block::W2w => !self.has(Ablation::Eq3InW2w),
            _ => !self.has(Ablation::Eq3InW2eE2wE2e),
        }
    }
}

impl FromIterator<Ablation> for AblationSet {
    fn from_iter<T: IntoIterator<Item = Ablation>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl FromStr for AblationSet {
    type Err = GesaError;

    /// Comma-separated names; `""` and `"none"` give the empty set.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::none());
        }
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for AblationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.0.iter().map(|a| a.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// Dense id assignment for the labels reachable under a set of ablations.
///
/// Without ablations: `WIN(d) = d + k` for `d ∈ [-k, k]`, then the ten fixed
/// labels in [`Label::FIXED`] order, for `2k + 11` ids in total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    k: usize,
    ablations: AblationSet,
    fixed_ids: [Option<usize>; 10],
    size: usize,
}

impl LabelVocabulary {
    pub fn new(k: usize, ablations: &AblationSet) -> Self {
        let mut vocab = LabelVocabulary {
            k,
            ablations: ablations.clone(),
            fixed_ids: [None; 10],
            size: 2 * k + 1,
        };
        for (slot, label) in Label::FIXED.into_iter().enumerate() {
            if vocab.representative(label) == Some(label) {
                vocab.fixed_ids[slot] = Some(vocab.size);
                vocab.size += 1;
            }
        }
        for (slot, label) in Label::FIXED.into_iter().enumerate() {
            if vocab.fixed_ids[slot].is_none() {
                if let Some(rep) = vocab.representative(label) {
                    vocab.fixed_ids[slot] = vocab.fixed_ids[fixed_slot(rep)];
                }
            }
        }
        vocab
    }

    /// The label a kind is merged into, or `None` when the rules never produce it.
    fn representative(&self, label: Label) -> Option<Label> {
        let a = &self.ablations;
        let local_e2e = a.has(Ablation::LocalE2e);
        match label {
            Label::Window(_) => Some(label),
            Label::GlobCls => (!a.has(Ablation::NoGlobalW2w) && !a.has(Ablation::DropGlobCls)).then_some(label),
            Label::GlobQ => (!a.has(Ablation::NoGlobalW2w) && !a.has(Ablation::DropGlobQ)).then_some(label),
            Label::W2eMention if a.has(Ablation::DropW2eMention) => Some(Label::W2eNone),
            Label::W2ePlcq if a.has(Ablation::DropW2ePlcq) => Some(Label::W2eNone),
            Label::W2eMention | Label::W2eNone | Label::W2ePlcq => Some(label),
            _ if local_e2e => None,
            Label::E2eSelf | Label::E2eNoEdge => Some(label),
            Label::E2ePlc if a.has(Ablation::DropE2ePlc) => Some(Label::E2eNoEdge),
            Label::E2eSent if a.has(Ablation::DropE2eSent) => Some(Label::E2eNoEdge),
            Label::E2eMatch if a.has(Ablation::DropE2eMatch) => Some(Label::E2eNoEdge),
            Label::E2ePlc | Label::E2eSent | Label::E2eMatch if a.has(Ablation::OneLabelAllEdges) => {
                [Label::E2ePlc, Label::E2eSent, Label::E2eMatch]
                    .into_iter()
                    .find(|&l| match l {
                        Label::E2ePlc => !a.has(Ablation::DropE2ePlc),
                        Label::E2eSent => !a.has(Ablation::DropE2eSent),
                        _ => !a.has(Ablation::DropE2eMatch),
                    })
            }
            Label::E2ePlc | Label::E2eSent | Label::E2eMatch => Some(label),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ablations(&self) -> &AblationSet {
        &self.ablations
    }

    /// Number of distinct ids `V`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Dense id of `label`, or `None` when it is not reachable under the ablations.
    pub fn id(&self, label: Label) -> Option<usize> {
        match label {
            Label::Window(d) => {
                let k = self.k as i32;
                (-k..=k).contains(&d).then(|| (d + k) as usize)
            }
            other => self.fixed_ids[fixed_slot(other)],
        }
    }

    /// `WIN(clip(j - i, -k, k))`.
    pub fn window_id(&self, i: usize, j: usize) -> usize {
        window_label(i, j, self.k)
    }
}

fn fixed_slot(label: Label) -> usize {
    Label::FIXED
        .iter()
        .position(|&l| l == label)
        .expect("window labels have no fixed slot")
}

/// Window label id for word positions `i`, `j` with radius `k`.
pub fn window_label(i: usize, j: usize, k: usize) -> usize {
    let k = k as i64;
    let d = (j as i64 - i as i64).clamp(-k, k);
    (d + k) as usize
}

/// Settings that determine the label pattern.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatternConfig {
    pub k: usize,
    pub w2w_mode: W2wMode,
    pub ablations: AblationSet,
}

/// Relative-position label ids and attend/mask bits for every ordered pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    size: usize,
    word_count: usize,
    labels: Vec<u32>,
    mask: Vec<bool>,
}

impl LabelMatrix {
    pub fn from_parts(word_count: usize, size: usize, labels: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if labels.len() != size * size || mask.len() != size * size || word_count > size {
            return Err(GesaError::Labels(format!(
                "inconsistent label matrix parts: size {size}, words {word_count}, {} labels, {} mask bits",
                labels.len(),
                mask.len()
            )));
        }
        Ok(Self { size, word_count, labels, mask })
    }

    /// `P`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn entity_count(&self) -> usize {
        self.size - self.word_count
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.size + j] as usize
    }

    /// True when `i` may attend to `j`.
    pub fn attends(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.size + j]
    }

    pub fn row_labels(&self, i: usize) -> &[u32] {
        &self.labels[i * self.size..(i + 1) * self.size]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.size..(i + 1) * self.size]
    }

    pub fn block(&self, i: usize, j: usize) -> Block {
        Block::of(i >= self.word_count, j >= self.word_count)
    }

    /// Distinct unmasked label ids inside one block.
    pub fn distinct_labels(&self, block: Block) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for i in 0..self.size {
            for j in 0..self.size {
                if self.block(i, j) == block && self.attends(i, j) {
                    out.insert(self.label(i, j));
                }
            }
        }
        out
    }

    /// CSV grid of ids, one row per line, masked cells as `-1`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut line = String::new();
        for i in 0..self.size {
            line.clear();
            for j in 0..self.size {
                if j > 0 {
                    line.push(',');
                }
                if self.attends(i, j) {
                    line.push_str(&self.label(i, j).to_string());
                } else {
                    line.push_str("-1");
                }
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Parses a CSV grid; lines starting with `#` are skipped. Masked cells come back
    /// with label 0, so only `attends` and the labels of unmasked cells survive a round trip.
    pub fn read_csv<R: BufRead>(reader: R, word_count: usize) -> Result<Self> {
        let mut rows: Vec<Vec<i64>> = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| GesaError::Labels(format!("line {}: {e}", n + 1)))?;
            rows.push(row);
        }
        let size = rows.len();
        let mut labels = Vec::with_capacity(size * size);
        let mut mask = Vec::with_capacity(size * size);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(GesaError::Labels(format!(
                    "row {i} has {} cells, expected {size}",
                    row.len()
                )));
            }
            for &v in row {
                if v < -1 {
                    return Err(GesaError::Labels(format!("invalid label id {v}")));
                }
                mask.push(v >= 0);
                labels.push(v.max(0) as u32);
            }
        }
        Self::from_parts(word_count.min(size), size, labels, mask)
    }
}

/// Writes `m` as CSV to `path`.
pub fn export_pattern(m: &LabelMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    m.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn import_pattern(path: impl AsRef<Path>, word_count: usize) -> Result<LabelMatrix> {
    LabelMatrix::read_csv(BufReader::new(File::open(path)?), word_count)
}

fn is_question(role: WordRole) -> bool {
    matches!(role, WordRole::Question | WordRole::PlcWord)
}

/// Builds the label matrix for a sequence and its entity graph.
pub fn build_label_matrix(
    seq: &TokenSequence,
    graph: &HeterogeneousGraph,
    config: &PatternConfig,
) -> Result<LabelMatrix> {
    let n_words = seq.word_count();
    let n_ents = seq.entity_count();
    if graph.node_count() != n_ents {
        return Err(GesaError::Labels(format!(
            "graph has {} nodes but the sequence has {n_ents} entity tokens",
            graph.node_count()
        )));
    }
    let vocab = LabelVocabulary::new(config.k, &config.ablations);
    let abl = &config.ablations;
    let id = |l: Label| vocab.id(l).expect("rule produced an unreachable label") as u32;

    let p = n_words + n_ents;
    let mut labels = vec![0u32; p * p];
    let mut mask = vec![true; p * p];

    // w2w
    let no_global = abl.has(Ablation::NoGlobalW2w);
    let cls_global = !no_global && !abl.has(Ablation::DropGlobCls);
    let q_global = !no_global && !abl.has(Ablation::DropGlobQ);
    let glob: Vec<Option<u32>> = seq
        .word_tokens
        .iter()
        .map(|w| match w.role {
            WordRole::Cls if cls_global => Some(id(Label::GlobCls)),
            r if is_question(r) && q_global => Some(id(Label::GlobQ)),
            _ => None,
        })
        .collect();
    let cls_id = cls_global.then(|| id(Label::GlobCls));
    let k = config.k;
    for i in 0..n_words {
        let row = &mut labels[i * p..i * p + n_words];
        let row_mask = &mut mask[i * p..i * p + n_words];
        match glob[i] {
            Some(g) if Some(g) == cls_id => row.fill(g),
            Some(g) => {
                // a question row: CLS columns still win
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = match glob[j] {
                        Some(c) if Some(c) == cls_id => c,
                        _ => g,
                    };
                }
            }
            None => {
                for (j, cell) in row.iter_mut().enumerate() {
                    match glob[j] {
                        Some(g) => *cell = g,
                        None => {
                            *cell = window_label(i, j, k) as u32;
                            if config.w2w_mode == W2wMode::MaskedWindow && i.abs_diff(j) > k {
                                row_mask[j] = false;
                            }
                        }
                    }
                }
            }
        }
    }

    // w2e / e2w share one label per (word, entity) pair
    let mention = id(Label::W2eMention);
    let none = id(Label::W2eNone);
    let plcq = id(Label::W2ePlcq);
    for (e, ent) in seq.entity_tokens.iter().enumerate() {
        let col = n_words + e;
        for (w, word) in seq.word_tokens.iter().enumerate() {
            let in_span = match ent.kind {
                EntityKind::Placeholder => word.role == WordRole::PlcWord,
                EntityKind::Candidate => ent.mention_word_span.as_ref().is_some_and(|s| s.contains(&w)),
            };
            let l = if in_span {
                mention
            } else if ent.kind == EntityKind::Placeholder && is_question(word.role) {
                plcq
            } else {
                none
            };
            labels[w * p + col] = l;
            labels[col * p + w] = l;
        }
    }

    // e2e
    if abl.has(Ablation::LocalE2e) {
        for a in 0..n_ents {
            for b in 0..n_ents {
                labels[(n_words + a) * p + n_words + b] = window_label(a, b, k) as u32;
            }
        }
    } else {
        let self_id = id(Label::E2eSelf);
        let no_edge = id(Label::E2eNoEdge);
        let edge_ids = [
            (EdgeType::Plc, id(Label::E2ePlc)),
            (EdgeType::SentBased, id(Label::E2eSent)),
            (EdgeType::Match, id(Label::E2eMatch)),
        ];
        for a in 0..n_ents {
            let row = &mut labels[(n_words + a) * p + n_words..(n_words + a + 1) * p];
            row.fill(no_edge);
            row[a] = self_id;
        }
        for &(a, b, kind) in graph.edges() {
            let l = edge_ids.iter().find(|(t, _)| *t == kind).map(|(_, l)| *l).unwrap_or(no_edge);
            labels[(n_words + a) * p + n_words + b] = l;
            labels[(n_words + b) * p + n_words + a] = l;
        }
    }

    for i in 0..p {
        if !mask[i * p..(i + 1) * p].iter().any(|&m| m) {
            return Err(GesaError::Labels(format!("row {i} is fully masked")));
        }
    }
    LabelMatrix::from_parts(n_words, p, labels, mask)
}
