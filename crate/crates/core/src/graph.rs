//! Directed, labeled relation graphs over region indices.
//!
//! Relation labels are `1..=num_labels`. Every vertex additionally carries one
//! implicit self-loop with label [`SELF_LABEL`]; self-loops are never stored
//! in `edges` and never written to the JSON export.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SELF_LABEL: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationGraph {
    k: usize,
    edges: Vec<Edge>,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    k: usize,
    edges: Vec<Edge>,
    labels: Vec<String>,
}

impl RelationGraph {
    /// Builds a graph, rejecting self edges, out-of-range endpoints or labels,
    /// and repeated ordered pairs. Edges are kept sorted by `(src, dst)`.
    pub fn new(k: usize, labels: Vec<String>, mut edges: Vec<Edge>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Graph("graph needs at least one vertex".into()));
        }
        if let Some(i) = validate_edges(k, labels.len(), &edges)? {
            let e = edges[i];
            return Err(Error::Graph(format!(
                "duplicate edge {} -> {}",
                e.src, e.dst
            )));
        }
        edges.sort();
        Ok(RelationGraph { k, edges, labels })
    }

    /// Graph with self-loops only.
    pub fn empty(k: usize, labels: Vec<String>) -> Result<Self> {
        Self::new(k, labels, Vec::new())
    }

    pub fn num_vertices(&self) -> usize {
        self.k
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.labels
    }

    /// Non-self edges, sorted by `(src, dst)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn self_loops(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.k).map(|v| Edge {
            src: v,
            dst: v,
            label: SELF_LABEL,
        })
    }

    pub fn edge(&self, src: usize, dst: usize) -> Option<&Edge> {
        self.edges
            .binary_search_by(|e| (e.src, e.dst).cmp(&(src, dst)))
            .ok()
            .map(|i| &self.edges[i])
    }

    /// Relabel vertices: vertex `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                label: e.label,
            })
            .collect();
        Self::new(self.k, self.labels.clone(), edges)
    }

    pub fn to_json(&self) -> String {
        // one edge per line so loader errors can point at a line
        let mut out = format!("{{\"k\":{},\"edges\":[", self.k);
        for (i, e) in self.edges.iter().enumerate() {
            out.push_str(if i == 0 { "\n" } else { ",\n" });
            out.push_str(&serde_json::to_string(e).expect("edge serializes"));
        }
        if !self.edges.is_empty() {
            out.push('\n');
        }
        out.push_str("],\"labels\":");
        out.push_str(&serde_json::to_string(&self.labels).expect("labels serialize"));
        out.push('}');
        out
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(GraphFile {
            k: self.k,
            edges: self.edges.clone(),
            labels: self.labels.clone(),
        })
        .expect("graph serializes")
    }

    /// Parse the export format; validation errors report the line of the
    /// offending edge.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        if file.k == 0 {
            return Err(Error::Graph("graph needs at least one vertex".into()));
        }
        let at_line = |i: usize, msg: String| {
            let line = edge_lines(text).get(i).copied().unwrap_or(1);
            Error::AtLine { line, msg }
        };
        match validate_edges(file.k, file.labels.len(), &file.edges) {
            Ok(None) => {}
            Ok(Some(i)) => {
                let e = file.edges[i];
                return Err(at_line(i, format!("duplicate edge {} -> {}", e.src, e.dst)));
            }
            Err(Error::Graph(msg)) => {
                let i = first_invalid(file.k, file.labels.len(), &file.edges).unwrap_or(0);
                return Err(at_line(i, msg));
            }
            Err(e) => return Err(e),
        }
        Self::new(file.k, file.labels, file.edges)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        Self::from_json(&value.to_string())
    }
}

fn edge_error(k: usize, num_labels: usize, e: &Edge) -> Option<String> {
    if e.src >= k || e.dst >= k {
        Some(format!(
            "edge {} -> {} has a vertex outside 0..{k}",
            e.src, e.dst
        ))
    } else if e.src == e.dst {
        Some(format!("explicit self edge on vertex {}", e.src))
    } else if e.label == SELF_LABEL || e.label > num_labels {
        Some(format!(
            "edge {} -> {} has label {} outside 1..={num_labels}",
            e.src, e.dst, e.label
        ))
    } else {
        None
    }
}

fn first_invalid(k: usize, num_labels: usize, edges: &[Edge]) -> Option<usize> {
    edges
        .iter()
        .position(|e| edge_error(k, num_labels, e).is_some())
}

/// `Err` for the first invalid edge, `Ok(Some(i))` for the first duplicate pair.
fn validate_edges(k: usize, num_labels: usize, edges: &[Edge]) -> Result<Option<usize>> {
    let mut seen = BTreeSet::new();
    for (i, e) in edges.iter().enumerate() {
        if let Some(msg) = edge_error(k, num_labels, e) {
            return Err(Error::Graph(msg));
        }
        if !seen.insert((e.src, e.dst)) {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

/// 1-based line numbers of each object inside the top-level `"edges"` array.
fn edge_lines(text: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let mut line = 1;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut last_key = String::new();
    let mut current = String::new();
    let mut edges_depth: Option<usize> = None;
    for ch in text.chars() {
        if ch == '\n' {
            line += 1;
        }
        if in_string {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
                last_key = std::mem::take(&mut current);
            } else {
                current.push(ch);
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '[' => {
                depth += 1;
                if depth == 2 && last_key == "edges" {
                    edges_depth = Some(depth);
                }
            }
            '{' => {
                depth += 1;
                if edges_depth.is_some_and(|d| depth == d + 1) {
                    lines.push(line);
                }
            }
            ']' | '}' => {
                if edges_depth == Some(depth) && ch == ']' {
                    edges_depth = None;
                }
                depth = depth.saturating_sub(1);
            }
            _ => {}
        }
    }
    lines
}
