//! Explanation subgraphs: the mined graph for one new case, filtered to the
//! classes of interest and to edges above a weight threshold, with DOT and
//! JSON export.
//!
//! Weights are copied from the mined matrices, never recomputed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::qbaf::{FullCasebase, QbafBatch};

pub const SCHEMA_VERSION: u32 = 1;

/// Default edge threshold for `explain`.
pub const DEFAULT_THRESHOLD: f64 = 0.25;

const EDGE_PEN_SCALE: f64 = 5.0;
const BORDER_PEN_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Case,
    Target,
    NewCase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Attack,
    Support,
    IrrelevanceAttack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationNode {
    /// Position in the full graph; the new case is numbered after all casebase nodes.
    pub index: usize,
    pub kind: NodeKind,
    /// Class index; `None` for the new case.
    pub class: Option<usize>,
    pub base_score: f64,
    /// Source row of a casebase case.
    pub source: Option<usize>,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSubgraph {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub class_filter: Vec<usize>,
    pub threshold: f64,
    /// Predicted class from the full graph.
    pub prediction: usize,
    /// Final strengths of every target, in class order, from the full graph.
    pub target_strengths: Vec<f64>,
    pub nodes: Vec<ExplanationNode>,
    pub edges: Vec<ExplanationEdge>,
}

/// Filters row `row` of a mined batch. `strengths` is the `[B×n]` result of
/// the semantics on the same batch.
pub fn extract_explanation(
    qbaf: &QbafBatch,
    strengths: &Tensor,
    casebase: &FullCasebase,
    row: usize,
    class_names: &[String],
    class_filter: &BTreeSet<usize>,
    threshold: f64,
) -> Result<ExplanationSubgraph> {
    qbaf.validate()?;
    let n = qbaf.num_nodes();
    if n != casebase.len() {
        return Err(Error::dim("explain", format!("graph has {n} nodes, casebase {}", casebase.len())));
    }
    if row >= qbaf.batch_size() || strengths.shape() != [qbaf.batch_size(), n] {
        return Err(Error::dim("explain", format!("row {row} of strengths {:?}", strengths.shape())));
    }
    if class_filter.is_empty() {
        return Err(Error::Parameter("class filter is empty".into()));
    }
    if let Some(c) = class_filter.iter().find(|&&c| c >= casebase.num_classes()) {
        return Err(Error::Parameter(format!("class {c} out of range")));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("threshold must be in [0, 1], got {threshold}")));
    }
    if class_names.len() != casebase.num_classes() {
        return Err(Error::dim("explain", format!("{} class names for {} classes", class_names.len(), casebase.num_classes())));
    }

    let s = strengths.row(row);
    let labels = casebase.node_labels();
    let num_cases = casebase.cases().len();
    let target_strengths: Vec<f64> = qbaf.target_indices.iter().map(|&t| s[t]).collect();
    let prediction = crate::semantics::argmax(&target_strengths);

    let mut nodes = Vec::new();
    for i in (0..n).filter(|&i| class_filter.contains(&labels[i])) {
        let (kind, source) = if i < num_cases { (NodeKind::Case, Some(casebase.cases()[i].id)) } else { (NodeKind::Target, None) };
        nodes.push(ExplanationNode { index: i, kind, class: Some(labels[i]), base_score: qbaf.b_cb.data()[i], source, strength: s[i] });
    }
    // The new case's strength is its base score: nothing attacks it.
    nodes.push(ExplanationNode {
        index: n,
        kind: NodeKind::NewCase,
        class: None,
        base_score: qbaf.b_new.data()[row],
        source: None,
        strength: qbaf.b_new.data()[row],
    });

    let kept: Vec<usize> = nodes.iter().map(|v| v.index).filter(|&i| i < n).collect();
    let mut edges = Vec::new();
    for &i in &kept {
        for &j in &kept {
            let w = qbaf.a_cb.at(i, j);
            if w.abs() > threshold {
                let kind = if w < 0.0 { EdgeKind::Attack } else { EdgeKind::Support };
                edges.push(ExplanationEdge { from: i, to: j, weight: w, kind });
            }
        }
    }
    for &j in &kept {
        let w = qbaf.a_n.at(row, j);
        if w.abs() > threshold {
            edges.push(ExplanationEdge { from: n, to: j, weight: w, kind: EdgeKind::IrrelevanceAttack });
        }
    }

    Ok(ExplanationSubgraph {
        schema_version: SCHEMA_VERSION,
        class_names: class_names.to_vec(),
        class_filter: class_filter.iter().copied().collect(),
        threshold,
        prediction,
        target_strengths,
        nodes,
        edges,
    })
}

impl ExplanationSubgraph {
    /// Checks the structural invariants of a subgraph, e.g. one read from disk.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported explanation schema version {}", self.schema_version)));
        }
        let ids: BTreeSet<usize> = self.nodes.iter().map(|v| v.index).collect();
        let new_case = self.nodes.iter().find(|v| v.kind == NodeKind::NewCase).map(|v| v.index);
        for e in &self.edges {
            if !ids.contains(&e.from) || !ids.contains(&e.to) {
                return Err(Error::Format(format!("edge {}->{} has a missing endpoint", e.from, e.to)));
            }
            if !(e.weight.abs() > self.threshold) {
                return Err(Error::Format(format!("edge {}->{} is below the threshold", e.from, e.to)));
            }
            let expected = match (Some(e.from) == new_case, e.weight < 0.0) {
                (true, true) => EdgeKind::IrrelevanceAttack,
                (false, true) => EdgeKind::Attack,
                (false, false) => EdgeKind::Support,
                (true, false) => return Err(Error::Format("irrelevance edge with positive weight".into())),
            };
            if e.kind != expected {
                return Err(Error::Format(format!("edge {}->{} has kind {:?}, expected {expected:?}", e.from, e.to, e.kind)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("subgraph serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("explanation JSON: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph explanation {\n  rankdir=LR;\n  node [shape=box, style=rounded, fontname=\"Helvetica\"];\n");
        for v in &self.nodes {
            let name = match v.kind {
                NodeKind::Case => format!("case {}", v.source.unwrap_or(v.index)),
                NodeKind::Target => "target".to_string(),
                NodeKind::NewCase => "new case".to_string(),
            };
            let class = v.class.map_or(String::new(), |c| format!("\\n{}", escape(&self.class_names[c])));
            let shape = match v.kind {
                NodeKind::Target => ", shape=doubleoctagon",
                NodeKind::NewCase => ", shape=ellipse",
                NodeKind::Case => "",
            };
            let _ = writeln!(
                out,
                "  n{} [label=\"{name}{class}\\nbase {:.2}\\nstrength {:.2}\", penwidth={:.3}{shape}];",
                v.index,
                v.base_score,
                v.strength,
                BORDER_PEN_SCALE * v.base_score,
            );
        }
        for e in &self.edges {
            let magnitude = e.weight.abs();
            let rgb = match e.kind {
                EdgeKind::Attack => "d62728",
                EdgeKind::Support => "2ca02c",
                EdgeKind::IrrelevanceAttack => "9467bd",
            };
            let alpha = (255.0 * magnitude).round().clamp(0.0, 255.0) as u8;
            let _ = writeln!(
                out,
                "  n{} -> n{} [color=\"#{rgb}{alpha:02x}\", penwidth={:.3}, label=\"{:.2}\"];",
                e.from,
                e.to,
                EDGE_PEN_SCALE * magnitude,
                e.weight,
            );
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn export_dot(graph: &ExplanationSubgraph, path: &Path) -> Result<()> {
    std::fs::write(path, graph.to_dot()).map_err(|e| Error::io(path, e))
}

pub fn export_json(graph: &ExplanationSubgraph, path: &Path) -> Result<()> {
    std::fs::write(path, graph.to_json()).map_err(|e| Error::io(path, e))
}

pub fn import_json(path: &Path) -> Result<ExplanationSubgraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExplanationSubgraph::from_json(&text)
}
