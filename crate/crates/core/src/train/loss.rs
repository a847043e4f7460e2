//! Training objective: weighted cross entropy over target strengths plus
//! soft constraints on exceptionality, acyclicity and sparsity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::heads::BoundModel;
use crate::qbaf::Case;

use super::config::TrainConfig;

/// `w_c = sqrt(|D| / (C * n_c))`.
pub fn class_weights(data: &[Case], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for c in data {
        *counts.get_mut(c.label).ok_or_else(|| Error::Config(format!("label {} out of range", c.label)))? += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {empty} has no samples")));
    }
    let total = data.len() as f64;
    Ok(counts.iter().map(|&n| (total / (num_classes as f64 * n as f64)).sqrt()).collect())
}

/// Pushes every case to dominate every target and never the reverse:
/// `MSE(W(x_cb, x_delta), 1) + MSE(W(x_delta, x_cb), 0)`.
pub fn loss_delta(tape: &mut Tape, model: &BoundModel, x_cb: &Tensor, x_delta: &Tensor) -> Result<Var> {
    let cb = tape.constant(x_cb.clone())?;
    let delta = tape.constant(x_delta.clone())?;
    let e_cb = model.embed(tape, cb)?;
    let e_delta = model.embed(tape, delta)?;

    let forward = model.exceptionality_from_embeddings(tape, e_cb, e_delta)?;
    let miss = tape.add_scalar(forward, -1.0)?;
    let sq = tape.hadamard(miss, miss)?;
    let to_one = tape.mean(sq)?;

    let backward = model.exceptionality_from_embeddings(tape, e_delta, e_cb)?;
    let sq = tape.hadamard(backward, backward)?;
    let to_zero = tape.mean(sq)?;
    tape.add(to_one, to_zero)
}

/// `tr(exp(A ∘ A)) - n`; zero exactly when the weighted graph is acyclic.
pub fn loss_dag(tape: &mut Tape, a: Var) -> Result<Var> {
    let shape = tape.value(a).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("loss_dag", format!("non-square {shape:?}")));
    }
    let sq = tape.hadamard(a, a)?;
    let tr = tape.trace_expm(sq)?;
    tape.add_scalar(tr, -(shape[0] as f64))
}

/// `sum |A| / n`.
pub fn loss_sparsity(tape: &mut Tape, a: Var, n: usize) -> Result<Var> {
    if n < 1 {
        return Err(Error::Parameter("sparsity divisor must be at least 1".into()));
    }
    let abs = tape.abs(a)?;
    let s = tape.sum(abs)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Values of each loss term from one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub delta: f64,
    pub dag: f64,
    pub sparsity_casebase: f64,
    pub sparsity_new: f64,
}

impl LossBreakdown {
    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        self.task += weight * other.task;
        self.delta += weight * other.delta;
        self.dag += weight * other.dag;
        self.sparsity_casebase += weight * other.sparsity_casebase;
        self.sparsity_new += weight * other.sparsity_new;
    }
}

/// Handles for the loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub task: Var,
    pub delta: Var,
    pub dag: Var,
    pub sparsity_casebase: Var,
    pub sparsity_new: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item(),
            task: tape.value(self.task).item(),
            delta: tape.value(self.delta).item(),
            dag: tape.value(self.dag).item(),
            sparsity_casebase: tape.value(self.sparsity_casebase).item(),
            sparsity_new: tape.value(self.sparsity_new).item(),
        }
    }
}

/// Inputs to [`total_loss`] from one forward pass.
pub struct LossInputs<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
    pub class_weights: &'a [f64],
    pub a_cb: Var,
    pub a_n: Var,
    pub x_cb: &'a Tensor,
    pub x_delta: &'a Tensor,
}

/// `L_task + λ_δ L_δ + λ_dag L_dag(A_cb) + λ_sp L_sp(A_cb) + λ_sp' L_sp(A_N)`,
/// with the sparsity divisor equal to the number of graph nodes.
pub fn total_loss(tape: &mut Tape, model: &BoundModel, inputs: &LossInputs<'_>, config: &TrainConfig) -> Result<LossTerms> {
    let n = tape.value(inputs.a_cb).rows();
    let task = tape.softmax_cross_entropy(inputs.logits, inputs.labels, inputs.class_weights)?;
    let delta = loss_delta(tape, model, inputs.x_cb, inputs.x_delta)?;
    let dag = loss_dag(tape, inputs.a_cb)?;
    let sparsity_casebase = loss_sparsity(tape, inputs.a_cb, n)?;
    let sparsity_new = loss_sparsity(tape, inputs.a_n, n)?;

    let mut total = task;
    for (term, lambda) in [
        (delta, config.lambda_delta),
        (dag, config.lambda_dag),
        (sparsity_casebase, config.lambda_sp),
        (sparsity_new, config.lambda_sp_prime),
    ] {
        let scaled = tape.scale(term, lambda)?;
        total = tape.add(total, scaled)?;
    }
    Ok(LossTerms { total, task, delta, dag, sparsity_casebase, sparsity_new })
}
