//! Graph convolution over relation graphs: plain, direction/label-aware, and
//! edge-gated.
//!
//! A directed edge `src -> dst` with label `l` produces two messages: one to
//! `dst` through the forward transform and one back to `src` through the
//! reverse transform (disable with [`GcnOptions::reverse_messages`]). Every
//! vertex also sends itself a message through the self transform with the
//! self label. In the gated variant each message is scaled by
//! `sigmoid(gate_w[dir] . v_src + gate_b[l])`; the label bias sits inside the
//! gated term.
//!
//! Messages into a vertex are summed in a canonical order keyed on
//! (direction, label, source feature bits), so the output is bit-identical
//! under any relabeling of vertices or reordering of edges.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::RelationGraph;
use crate::params::{Checkpoint, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    /// Along the edge, into `dst`.
    Forward = 0,
    /// Against the edge, into `src`.
    Reverse = 1,
    SelfLoop = 2,
}

#[derive(Clone, Copy, Debug)]
struct Incidence {
    target: usize,
    source: usize,
    dir: Direction,
    label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GcnOptions {
    pub reverse_messages: bool,
}

impl Default for GcnOptions {
    fn default() -> Self {
        GcnOptions {
            reverse_messages: true,
        }
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Message list in canonical accumulation order.
fn incidences(graph: &RelationGraph, features: &Tensor, opts: GcnOptions) -> Vec<Incidence> {
    let mut out: Vec<Incidence> = graph
        .self_loops()
        .map(|e| Incidence {
            target: e.dst,
            source: e.src,
            dir: Direction::SelfLoop,
            label: e.label,
        })
        .collect();
    for e in graph.edges() {
        out.push(Incidence {
            target: e.dst,
            source: e.src,
            dir: Direction::Forward,
            label: e.label,
        });
        if opts.reverse_messages {
            out.push(Incidence {
                target: e.src,
                source: e.dst,
                dir: Direction::Reverse,
                label: e.label,
            });
        }
    }
    out.sort_by(|a, b| {
        a.target
            .cmp(&b.target)
            .then(a.dir.cmp(&b.dir))
            .then(a.label.cmp(&b.label))
            .then_with(|| cmp_rows(features.row_slice(a.source), features.row_slice(b.source)))
    });
    out
}

fn check_features(op: &'static str, features: &Tensor, graph: &RelationGraph) -> Result<()> {
    if !features.is_matrix() || features.rows() != graph.num_vertices() {
        return Err(Error::invalid(
            op,
            format!(
                "graph has {} vertices but features have shape {:?}",
                graph.num_vertices(),
                features.shape()
            ),
        ));
    }
    Ok(())
}

/// Parameters of one direction/label-aware gated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams {
    prefix: String,
    /// `D x D` transforms, indexed by [`Direction`].
    pub w_fwd: Tensor,
    pub w_rev: Tensor,
    pub w_self: Tensor,
    /// `(labels + 1) x D`; row 0 is the self label.
    pub bias: Tensor,
    /// `3 x D`, one gate row per [`Direction`].
    pub gate_w: Tensor,
    /// `(labels + 1) x 1`.
    pub gate_b: Tensor,
}

pub struct GcnLayerVars {
    w: [Var; 3],
    bias: Var,
    gate_w: Var,
    gate_b: Var,
}

impl GcnLayerParams {
    pub fn init<R: Rng + ?Sized>(
        prefix: impl Into<String>,
        dim: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Self {
        GcnLayerParams {
            prefix: prefix.into(),
            w_fwd: Tensor::glorot(&[dim, dim], dim, dim, rng),
            w_rev: Tensor::glorot(&[dim, dim], dim, dim, rng),
            w_self: Tensor::glorot(&[dim, dim], dim, dim, rng),
            bias: Tensor::zeros(&[num_labels + 1, dim]),
            gate_w: Tensor::glorot(&[3, dim], dim, 1, rng),
            gate_b: Tensor::zeros(&[num_labels + 1, 1]),
        }
    }

    pub fn zeros(prefix: impl Into<String>, dim: usize, num_labels: usize) -> Self {
        GcnLayerParams {
            prefix: prefix.into(),
            w_fwd: Tensor::zeros(&[dim, dim]),
            w_rev: Tensor::zeros(&[dim, dim]),
            w_self: Tensor::zeros(&[dim, dim]),
            bias: Tensor::zeros(&[num_labels + 1, dim]),
            gate_w: Tensor::zeros(&[3, dim]),
            gate_b: Tensor::zeros(&[num_labels + 1, 1]),
        }
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        prefix: &str,
        dim: usize,
        num_labels: usize,
    ) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(GcnLayerParams {
            prefix: prefix.to_string(),
            w_fwd: ck.take(&name("w_fwd"), &[dim, dim])?,
            w_rev: ck.take(&name("w_rev"), &[dim, dim])?,
            w_self: ck.take(&name("w_self"), &[dim, dim])?,
            bias: ck.take(&name("bias"), &[num_labels + 1, dim])?,
            gate_w: ck.take(&name("gate_w"), &[3, dim])?,
            gate_b: ck.take(&name("gate_b"), &[num_labels + 1, 1])?,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_self.rows()
    }

    /// Number of relation labels, excluding the self label.
    pub fn num_labels(&self) -> usize {
        self.bias.rows() - 1
    }

    pub fn bind(&self, tape: &mut Tape) -> GcnLayerVars {
        let p = &self.prefix;
        GcnLayerVars {
            w: [
                tape.param(format!("{p}.w_fwd"), &self.w_fwd),
                tape.param(format!("{p}.w_rev"), &self.w_rev),
                tape.param(format!("{p}.w_self"), &self.w_self),
            ],
            bias: tape.param(format!("{p}.bias"), &self.bias),
            gate_w: tape.param(format!("{p}.gate_w"), &self.gate_w),
            gate_b: tape.param(format!("{p}.gate_b"), &self.gate_b),
        }
    }
}

impl ParamSet for GcnLayerParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let p = &self.prefix;
        vec![
            (format!("{p}.bias"), &self.bias),
            (format!("{p}.gate_b"), &self.gate_b),
            (format!("{p}.gate_w"), &self.gate_w),
            (format!("{p}.w_fwd"), &self.w_fwd),
            (format!("{p}.w_rev"), &self.w_rev),
            (format!("{p}.w_self"), &self.w_self),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let p = self.prefix.clone();
        vec![
            (format!("{p}.bias"), &mut self.bias),
            (format!("{p}.gate_b"), &mut self.gate_b),
            (format!("{p}.gate_w"), &mut self.gate_w),
            (format!("{p}.w_fwd"), &mut self.w_fwd),
            (format!("{p}.w_rev"), &mut self.w_rev),
            (format!("{p}.w_self"), &mut self.w_self),
        ]
    }
}

/// How a layer turns incidences into messages.
enum Flavor<'a> {
    Vanilla { w: Var, b: Var },
    Directional(&'a GcnLayerVars),
    Gated(&'a GcnLayerVars),
}

fn convolve(
    tape: &mut Tape,
    features: Var,
    graph: &RelationGraph,
    flavor: Flavor<'_>,
    opts: GcnOptions,
) -> Result<Var> {
    let feats = tape.value(features).clone();
    check_features("gcn", &feats, graph)?;
    let k = graph.num_vertices();
    let inc = incidences(graph, &feats, opts);
    let targets: Vec<usize> = inc.iter().map(|i| i.target).collect();
    let labels: Vec<usize> = inc.iter().map(|i| i.label).collect();

    let messages = match flavor {
        Flavor::Vanilla { w, b } => {
            let sources: Vec<usize> = inc.iter().map(|i| i.source).collect();
            let m = tape.linear(features, w, None)?;
            let gathered = tape.gather_rows(m, &sources)?;
            tape.add(gathered, b)?
        }
        Flavor::Directional(vars) | Flavor::Gated(vars) => {
            let table_rows = tape.value(vars.bias).rows();
            if let Some(&bad) = labels.iter().find(|&&l| l >= table_rows) {
                return Err(Error::UnknownLabel {
                    label: bad,
                    available: table_rows - 1,
                });
            }
            // rows of `stacked` are indexed by dir * K + source
            let per_dir = vars
                .w
                .iter()
                .map(|&w| tape.linear(features, w, None))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&per_dir, 0)?;
            let rows: Vec<usize> = inc.iter().map(|i| i.dir as usize * k + i.source).collect();
            let gathered = tape.gather_rows(stacked, &rows)?;
            let biases = tape.gather_rows(vars.bias, &labels)?;
            let pre = tape.add(gathered, biases)?;
            if let Flavor::Gated(vars) = flavor {
                let logits = tape.linear(features, vars.gate_w, None)?;
                let cols = (0..3)
                    .map(|d| tape.slice_cols(logits, d, 1))
                    .collect::<Result<Vec<_>>>()?;
                let gate_all = tape.concat(&cols, 0)?;
                let gate_src = tape.gather_rows(gate_all, &rows)?;
                let gate_bias = tape.gather_rows(vars.gate_b, &labels)?;
                let gate_pre = tape.add(gate_src, gate_bias)?;
                let gate = tape.sigmoid(gate_pre);
                tape.mul(pre, gate)?
            } else {
                pre
            }
        }
    };
    let summed = tape.scatter_add_rows(messages, &targets, k)?;
    Ok(tape.relu(summed))
}

/// Undirected single-transform convolution on the tape: each directed edge
/// is one undirected incidence at both endpoints.
pub fn gcn_vanilla_on(
    tape: &mut Tape,
    features: Var,
    graph: &RelationGraph,
    w: Var,
    b: Var,
) -> Result<Var> {
    convolve(
        tape,
        features,
        graph,
        Flavor::Vanilla { w, b },
        GcnOptions::default(),
    )
}

pub fn gcn_directional_on(
    tape: &mut Tape,
    features: Var,
    graph: &RelationGraph,
    vars: &GcnLayerVars,
    opts: GcnOptions,
) -> Result<Var> {
    convolve(tape, features, graph, Flavor::Directional(vars), opts)
}

pub fn gcn_gated_on(
    tape: &mut Tape,
    features: Var,
    graph: &RelationGraph,
    vars: &GcnLayerVars,
    opts: GcnOptions,
) -> Result<Var> {
    convolve(tape, features, graph, Flavor::Gated(vars), opts)
}

/// `relu(sum over neighbours j, including i, of (W v_j + b))`.
pub fn gcn_vanilla(
    features: &Tensor,
    graph: &RelationGraph,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let w = tape.constant(w.clone());
    let b = tape.constant(b.clone());
    let out = gcn_vanilla_on(&mut tape, f, graph, w, b)?;
    Ok(tape.value(out).clone())
}

pub fn gcn_directional(
    features: &Tensor,
    graph: &RelationGraph,
    params: &GcnLayerParams,
    opts: GcnOptions,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = params.bind(&mut tape);
    let out = gcn_directional_on(&mut tape, f, graph, &vars, opts)?;
    Ok(tape.value(out).clone())
}

pub fn gcn_gated(
    features: &Tensor,
    graph: &RelationGraph,
    params: &GcnLayerParams,
    opts: GcnOptions,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = params.bind(&mut tape);
    let out = gcn_gated_on(&mut tape, f, graph, &vars, opts)?;
    Ok(tape.value(out).clone())
}

/// Stack of gated layers for one relation kind.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnEncoder {
    pub layers: Vec<GcnLayerParams>,
    pub options: GcnOptions,
}

impl GcnEncoder {
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        dim: usize,
        num_labels: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        GcnEncoder {
            layers: (0..num_layers)
                .map(|l| GcnLayerParams::init(format!("{prefix}.layer{l}"), dim, num_labels, rng))
                .collect(),
            options: GcnOptions::default(),
        }
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        prefix: &str,
        dim: usize,
        num_labels: usize,
        num_layers: usize,
    ) -> Result<Self> {
        Ok(GcnEncoder {
            layers: (0..num_layers)
                .map(|l| {
                    GcnLayerParams::from_checkpoint(
                        ck,
                        &format!("{prefix}.layer{l}"),
                        dim,
                        num_labels,
                    )
                })
                .collect::<Result<_>>()?,
            options: GcnOptions::default(),
        })
    }

    pub fn encode_on(&self, tape: &mut Tape, features: Var, graph: &RelationGraph) -> Result<Var> {
        let mut h = features;
        for layer in &self.layers {
            let vars = layer.bind(tape);
            h = gcn_gated_on(tape, h, graph, &vars, self.options)?;
        }
        Ok(h)
    }

    pub fn encode(&self, features: &Tensor, graph: &RelationGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = self.encode_on(&mut tape, f, graph)?;
        Ok(tape.value(out).clone())
    }
}

impl ParamSet for GcnEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}
