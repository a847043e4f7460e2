//! Mining the edge-weighted argumentation graph from a casebase and a batch
//! of new cases.
//!
//! Nodes are the casebase cases followed by one target argument per class.
//! For an ordered pair `(i, j)` the edge weight is
//!
//! ```text
//! w_min(i, j, S) = min(W[i][j], A_{g in S}(1 - min(W[i][g], W[g][j])))
//! A_cb[i][j]     = -w_min(i, j, nodes labelled y_i)   if y_i != y_j  (attack)
//!                = +w_min(i, j, all nodes)            otherwise      (support)
//! ```
//!
//! where `W` is the exceptionality matrix and `A` the clamped soft-min. Each
//! new case attacks every node with its irrelevance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fuzzy;
use crate::heads::{BoundModel, DeepArguingModel};

/// A labelled characterisation. `label` is a zero-based class index and `id`
/// identifies the source row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub x: Vec<f64>,
    pub label: usize,
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetArgument {
    pub x_delta: Vec<f64>,
    pub class: usize,
}

/// One target per class, each characterised by the componentwise mean of the casebase.
pub fn make_targets(casebase: &[Case], num_classes: usize) -> Result<Vec<TargetArgument>> {
    let first = casebase.first().ok_or_else(|| Error::Config("casebase is empty".into()))?;
    let width = first.x.len();
    let mut mean = vec![0.0; width];
    for c in casebase {
        if c.x.len() != width {
            return Err(Error::dim("make_targets", format!("case {} has width {}, expected {width}", c.id, c.x.len())));
        }
        for (m, v) in mean.iter_mut().zip(&c.x) {
            *m += v;
        }
    }
    let n = casebase.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok((0..num_classes).map(|class| TargetArgument { x_delta: mean.clone(), class }).collect())
}

/// Casebase cases followed by the targets; this node order indexes every
/// graph matrix and explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullCasebase {
    cases: Vec<Case>,
    targets: Vec<TargetArgument>,
}

impl FullCasebase {
    pub fn new(cases: Vec<Case>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if let Some(c) = cases.iter().find(|c| c.label >= num_classes) {
            return Err(Error::Config(format!("case {} has label {} but there are {num_classes} classes", c.id, c.label)));
        }
        let targets = make_targets(&cases, num_classes)?;
        Ok(Self { cases, targets })
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn targets(&self) -> &[TargetArgument] {
        &self.targets
    }

    pub fn num_classes(&self) -> usize {
        self.targets.len()
    }

    pub fn width(&self) -> usize {
        self.cases[0].x.len()
    }

    pub fn len(&self) -> usize {
        self.cases.len() + self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (self.cases.len()..self.len()).collect()
    }

    pub fn node_labels(&self) -> Vec<usize> {
        self.cases.iter().map(|c| c.label).chain(self.targets.iter().map(|t| t.class)).collect()
    }

    /// Characterisations of all nodes, `[n×p]`.
    pub fn node_features(&self) -> Tensor {
        let rows: Vec<&[f64]> =
            self.cases.iter().map(|c| c.x.as_slice()).chain(self.targets.iter().map(|t| t.x_delta.as_slice())).collect();
        Tensor::from_rows(&rows).expect("uniform widths checked at construction")
    }

    pub fn case_features(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.cases.iter().map(|c| c.x.as_slice()).collect();
        Tensor::from_rows(&rows).expect("uniform widths checked at construction")
    }

    pub fn target_features(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.targets.iter().map(|t| t.x_delta.as_slice()).collect();
        Tensor::from_rows(&rows).expect("uniform widths checked at construction")
    }

    pub fn sign_matrix(&self) -> Tensor {
        sign_matrix(&self.node_labels())
    }

    pub fn minimality_mask(&self) -> Vec<bool> {
        minimality_mask(&self.node_labels())
    }
}

/// `+1` for same-label pairs, `-1` for opposite labels, 0 on the diagonal.
pub fn sign_matrix(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                data[i * n + j] = if labels[i] == labels[j] { 1.0 } else { -1.0 };
            }
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

/// Membership of node `g` in the minimality set of pair `(i, j)`, laid out
/// as `[n*n, n]`: same-label nodes of `i` for attacks, every node for supports.
pub fn minimality_mask(labels: &[usize]) -> Vec<bool> {
    let n = labels.len();
    let mut mask = vec![true; n * n * n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] != labels[j] {
                for g in 0..n {
                    mask[(i * n + j) * n + g] = labels[g] == labels[i];
                }
            }
        }
    }
    mask
}

/// Tape handles for the casebase part of a mined graph.
#[derive(Clone, Copy, Debug)]
pub struct CasebaseGraph {
    pub a_cb: Var,
    pub b_cb: Var,
    pub exceptionality: Var,
    pub node_embeddings: Var,
}

/// Builds `(A_cb, b_cb)` over all casebase and target nodes.
pub fn build_casebase_graph(tape: &mut Tape, model: &BoundModel, fcb: &FullCasebase, t: f64) -> Result<CasebaseGraph> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    let x = tape.constant(fcb.node_features())?;
    let (b_cb, emb) = model.score_and_embed(tape, x)?;
    let w = model.exceptionality_from_embeddings(tape, emb, emb)?;

    let a_cb = edges_from_exceptionality(tape, w, &fcb.node_labels(), t)?;
    Ok(CasebaseGraph { a_cb, b_cb, exceptionality: w, node_embeddings: emb })
}

/// Signed, minimality-filtered edge weights `A_cb` from an exceptionality
/// matrix `w` (`[n×n]`) over nodes with the given labels.
pub fn edges_from_exceptionality(tape: &mut Tape, w: Var, labels: &[usize], t: f64) -> Result<Var> {
    let n = labels.len();
    if tape.value(w).shape() != [n, n] {
        return Err(Error::dim("edges", format!("exceptionality {:?} for {n} nodes", tape.value(w).shape())));
    }
    let paths = tape.path_min(w)?;
    let minimality = tape.one_minus(paths)?;
    let agg = fuzzy::aggregate_rows(tape, minimality, Some(minimality_mask(labels)), t)?;
    let agg = tape.reshape(agg, vec![n, n])?;
    let w_min = tape.min(w, agg)?;
    let signs = tape.constant(sign_matrix(labels))?;
    tape.hadamard(w_min, signs)
}

/// Irrelevance attacks `A_N` (`[B×n]`, in `[-1, 0]`) and base scores `b_new` of a batch of new cases.
pub fn build_newcase_edges(tape: &mut Tape, model: &BoundModel, graph: &CasebaseGraph, x_new: &Tensor) -> Result<(Var, Var)> {
    let x = tape.constant(x_new.clone())?;
    let (b_new, emb) = model.score_and_embed(tape, x)?;
    let a_n = model.irrelevance_from_embeddings(tape, emb, graph.node_embeddings)?;
    Ok((a_n, b_new))
}

/// Matrices of a mined graph for one batch of new cases.
#[derive(Clone, Debug, PartialEq)]
pub struct QbafBatch {
    pub a_cb: Tensor,
    pub b_cb: Tensor,
    pub a_n: Tensor,
    pub b_new: Tensor,
    pub target_indices: Vec<usize>,
}

impl QbafBatch {
    pub fn num_nodes(&self) -> usize {
        self.b_cb.len()
    }

    pub fn batch_size(&self) -> usize {
        self.b_new.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.b_cb.len();
        let b = self.b_new.len();
        if self.a_cb.shape() != [n, n] || self.a_n.shape() != [b, n] {
            return Err(Error::dim(
                "qbaf",
                format!("A_cb {:?}, A_N {:?} for {n} nodes and {b} new cases", self.a_cb.shape(), self.a_n.shape()),
            ));
        }
        if self.target_indices.iter().any(|&i| i >= n) {
            return Err(Error::dim("qbaf", "target index out of range"));
        }
        Ok(())
    }
}

/// Mines the graph for `x_new` without recording gradients.
pub fn mine(model: &DeepArguingModel, fcb: &FullCasebase, x_new: &Tensor, t: f64) -> Result<QbafBatch> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let graph = build_casebase_graph(&mut tape, &bound, fcb, t)?;
    let (a_n, b_new) = build_newcase_edges(&mut tape, &bound, &graph, x_new)?;
    Ok(QbafBatch {
        a_cb: tape.value(graph.a_cb).clone(),
        b_cb: tape.value(graph.b_cb).clone(),
        a_n: tape.value(a_n).clone(),
        b_new: tape.value(b_new).clone(),
        target_indices: fcb.target_indices(),
    })
}
