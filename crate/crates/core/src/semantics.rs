//! Batched MLP-based gradual semantics and prediction.
//!
//! Strengths start at the base scores and are updated with
//! `s_i <- relu(tau_i + sum_j w(j, i) * s_j)` for a fixed number of steps.
//! For a batch the update is a single matrix product per step:
//! `S <- relu(B_eff + S * A_cb)`, where the constant-strength new case is
//! folded into `B_eff = b_cb + A_N * diag(b_new)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::qbaf::QbafBatch;

/// How the new case's attacks enter the iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewCaseMode {
    /// The new case keeps its strength and attacks at every step.
    #[default]
    Folded,
    /// The new case attacks once, producing the first iterate; later steps
    /// use the casebase edges and base scores only.
    OneShot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrengthTrace {
    /// `[B×n]` strengths after the last step.
    pub strengths: Tensor,
    /// Largest absolute change per step.
    pub max_delta: Vec<f64>,
}

/// Runs `iterations` steps on the tape and returns `S^(I)` (`[B×n]`).
pub fn final_strengths_on_tape(
    tape: &mut Tape,
    a_cb: Var,
    b_cb: Var,
    a_n: Var,
    b_new: Var,
    iterations: usize,
    mode: NewCaseMode,
) -> Result<Var> {
    iterate(tape, a_cb, b_cb, a_n, b_new, iterations, mode, |_, _, _| {})
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    tape: &mut Tape,
    a_cb: Var,
    b_cb: Var,
    a_n: Var,
    b_new: Var,
    iterations: usize,
    mode: NewCaseMode,
    mut on_step: impl FnMut(&Tape, Var, Var),
) -> Result<Var> {
    if iterations < 1 {
        return Err(Error::Parameter("semantics needs at least one iteration".into()));
    }
    let n = tape.value(b_cb).len();
    let b = tape.value(b_new).len();
    if tape.value(a_cb).shape() != [n, n] || tape.value(a_n).shape() != [b, n] {
        return Err(Error::dim(
            "final_strengths",
            format!("A_cb {:?}, A_N {:?} for {n} nodes, {b} new cases", tape.value(a_cb).shape(), tape.value(a_n).shape()),
        ));
    }
    let zeros = tape.constant(Tensor::zeros(&[b, n]))?;
    let tiled = tape.add_row_broadcast(zeros, b_cb)?;
    let attacks = tape.mul_col_broadcast(a_n, b_new)?;
    let b_eff = tape.add(tiled, attacks)?;

    let mut s = tiled;
    for step in 0..iterations {
        let pre = match (mode, step) {
            (NewCaseMode::OneShot, 0) => b_eff,
            (NewCaseMode::OneShot, _) => {
                let agg = tape.matmul(s, a_cb)?;
                tape.add(tiled, agg)?
            }
            (NewCaseMode::Folded, _) => {
                let agg = tape.matmul(s, a_cb)?;
                tape.add(b_eff, agg)?
            }
        };
        let next = tape.relu(pre)?;
        on_step(tape, s, next);
        s = next;
    }
    Ok(s)
}

/// Vectorised semantics over a mined graph, with per-step convergence diagnostics.
pub fn final_strengths(qbaf: &QbafBatch, iterations: usize, mode: NewCaseMode) -> Result<StrengthTrace> {
    qbaf.validate()?;
    let mut tape = Tape::new();
    let a_cb = tape.constant(qbaf.a_cb.clone())?;
    let b_cb = tape.constant(qbaf.b_cb.clone())?;
    let a_n = tape.constant(qbaf.a_n.clone())?;
    let b_new = tape.constant(qbaf.b_new.clone())?;

    let mut max_delta = Vec::with_capacity(iterations);
    let last = iterate(&mut tape, a_cb, b_cb, a_n, b_new, iterations, mode, |tape, prev, next| {
        let delta = tape
            .value(next)
            .data()
            .iter()
            .zip(tape.value(prev).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        max_delta.push(delta);
    })?;
    Ok(StrengthTrace { strengths: tape.value(last).clone(), max_delta })
}

/// Scalar semantics with the new case as an explicit argument of constant
/// strength; independent of the matrix formulation.
pub fn reference_strengths(qbaf: &QbafBatch, iterations: usize, mode: NewCaseMode) -> Result<Tensor> {
    qbaf.validate()?;
    let n = qbaf.num_nodes();
    let mut out = Vec::with_capacity(qbaf.batch_size() * n);
    for b in 0..qbaf.batch_size() {
        let new_strength = qbaf.b_new.data()[b];
        let tau = qbaf.b_cb.data();
        let mut s: Vec<f64> = tau.to_vec();
        for step in 0..iterations {
            let mut next = vec![0.0; n];
            for i in 0..n {
                let mut aggregate = 0.0;
                for j in 0..n {
                    if j != i {
                        aggregate += qbaf.a_cb.at(j, i) * s[j];
                    }
                }
                let from_new = qbaf.a_n.at(b, i) * new_strength;
                next[i] = match mode {
                    NewCaseMode::Folded => (tau[i] + aggregate + from_new).max(0.0),
                    NewCaseMode::OneShot if step == 0 => (tau[i] + from_new).max(0.0),
                    NewCaseMode::OneShot => (tau[i] + aggregate).max(0.0),
                };
            }
            s = next;
        }
        out.extend(s);
    }
    Tensor::matrix(qbaf.batch_size(), n, out)
}

/// Target strengths as logits (`[B×C]`) and the argmax class per row;
/// ties go to the lowest class index.
pub fn predict(strengths: &Tensor, target_indices: &[usize]) -> Result<(Vec<usize>, Tensor)> {
    let n = strengths.cols();
    if let Some(&bad) = target_indices.iter().find(|&&i| i >= n) {
        return Err(Error::dim("predict", format!("target index {bad} of {n} nodes")));
    }
    let rows = strengths.rows();
    let mut logits = Vec::with_capacity(rows * target_indices.len());
    let mut labels = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = strengths.row(r);
        let scores: Vec<f64> = target_indices.iter().map(|&i| row[i]).collect();
        labels.push(argmax(&scores));
        logits.extend(scores);
    }
    Ok((labels, Tensor::matrix(rows, target_indices.len(), logits)?))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
