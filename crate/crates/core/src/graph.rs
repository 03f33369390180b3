//! Heterogeneous entity graph over the entity input.
//!
//! Node 0 is the missing entity; node `j > 0` is the `j`-th entity token of the
//! sequence. Edges are undirected and stored once with `i < j`.

use std::fmt;
use std::io::Write;

use crate::corpus::{normalize_answer, Mention};
use crate::error::{GesaError, Result};
use crate::sequence::{EntityKind, EntityToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    SentBased,
    Match,
    Plc,
}

impl EdgeType {
    pub fn name(self) -> &'static str {
        match self {
            EdgeType::SentBased => "SENT_BASED",
            EdgeType::Match => "MATCH",
            EdgeType::Plc => "PLC",
        }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeterogeneousGraph {
    node_count: usize,
    edges: Vec<(usize, usize, EdgeType)>,
    adjacency: Vec<Option<EdgeType>>,
}

impl HeterogeneousGraph {
    fn new(node_count: usize) -> Self {
        Self {
            node_count,
            edges: Vec::new(),
            adjacency: vec![None; node_count * node_count],
        }
    }

    fn add(&mut self, i: usize, j: usize, kind: EdgeType) {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        debug_assert!(a != b);
        self.adjacency[a * self.node_count + b] = Some(kind);
        self.adjacency[b * self.node_count + a] = Some(kind);
        self.edges.push((a, b, kind));
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Edges sorted by `(i, j)`.
    pub fn edges(&self) -> &[(usize, usize, EdgeType)] {
        &self.edges
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<EdgeType> {
        if i >= self.node_count || j >= self.node_count {
            return None;
        }
        self.adjacency[i * self.node_count + j]
    }

    pub fn edges_of(&self, kind: EdgeType) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.2 == kind)
            .map(|e| (e.0, e.1))
    }

    pub fn degree(&self, node: usize, kind: EdgeType) -> usize {
        self.edges_of(kind)
            .filter(|&(a, b)| a == node || b == node)
            .count()
    }

    /// One edge per line: `i j TYPE`.
    pub fn write_edges<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (i, j, kind) in &self.edges {
            writeln!(w, "{i} {j} {kind}")?;
        }
        Ok(())
    }
}

/// Builds SENT-BASED, MATCH and PLC edges over `entities`.
pub fn build_graph(entities: &[EntityToken], mentions: &[Mention]) -> Result<HeterogeneousGraph> {
    match entities.first() {
        Some(e) if e.kind == EntityKind::Placeholder => {}
        _ => return Err(GesaError::Graph("entity 0 must be the placeholder entity".into())),
    }

    // (sentence, normalized surface) per candidate node.
    let mut nodes: Vec<(usize, String)> = Vec::with_capacity(entities.len());
    for (idx, e) in entities.iter().enumerate().skip(1) {
        if e.kind != EntityKind::Candidate {
            return Err(GesaError::Graph(format!(
                "entity {idx} is a second placeholder entity"
            )));
        }
        let m = e
            .mention_ref
            .and_then(|r| mentions.get(r))
            .ok_or_else(|| GesaError::Graph(format!("entity {idx}: dangling mention_ref {:?}", e.mention_ref)))?;
        nodes.push((m.sentence_index, normalize_answer(&m.surface)));
    }

    let mut graph = HeterogeneousGraph::new(entities.len());
    for a in 0..nodes.len() {
        graph.add(0, a + 1, EdgeType::Plc);
        for b in a + 1..nodes.len() {
            let (sa, ref na) = nodes[a];
            let (sb, ref nb) = nodes[b];
            if sa == sb {
                graph.add(a + 1, b + 1, EdgeType::SentBased);
            } else if !na.is_empty() && na == nb {
                graph.add(a + 1, b + 1, EdgeType::Match);
            }
        }
    }
    graph.edges.sort();
    Ok(graph)
}

/// Splits after every token ending in `.`, `!` or `?`. Never yields empty sentences.
pub fn segment_sentences<S: AsRef<str> + Clone>(tokens: &[S]) -> Vec<Vec<S>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for tok in tokens {
        current.push(tok.clone());
        if tok.as_ref().ends_with(['.', '!', '?']) {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}
