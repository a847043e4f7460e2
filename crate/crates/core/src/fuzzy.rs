//! Fuzzy-logic connectives over truth degrees in `[0, 1]`: the Gödel T-norm,
//! a LogSumExp soft-min standing in for universal aggregation, and strong
//! negation.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_domain(tape: &Tape, v: Var) -> Result<()> {
    match tape.value(v).data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(&bad) => Err(Error::Domain(bad)),
        None => Ok(()),
    }
}

/// Gödel T-norm `min(a, b)`.
pub fn tnorm(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_domain(tape, a)?;
    check_domain(tape, b)?;
    tape.min(a, b)
}

/// Strong negation `1 - a`.
pub fn negate(tape: &mut Tape, a: Var) -> Result<Var> {
    check_domain(tape, a)?;
    tape.one_minus(a)
}

/// Clamps into `[0, 1]` with zero gradient outside.
pub fn clamp_unit(tape: &mut Tape, a: Var) -> Result<Var> {
    let lower = tape.relu(a)?;
    let ones = tape.constant(Tensor::full(tape.value(a).shape(), 1.0))?;
    tape.min(lower, ones)
}

/// Soft universal aggregation of a whole tensor, clamped into `[0, 1]`.
/// An empty input aggregates to 1.
pub fn aggregate(tape: &mut Tape, values: Var, t: f64) -> Result<Var> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    if tape.value(values).is_empty() {
        return tape.constant(Tensor::scalar(1.0));
    }
    let soft = tape.logsumexp_neg(values, t)?;
    clamp_unit(tape, soft)
}

/// Row-wise soft aggregation over the entries selected by `mask`, clamped
/// into `[0, 1]`. Rows with nothing selected aggregate to 1.
pub fn aggregate_rows(tape: &mut Tape, values: Var, mask: Option<Vec<bool>>, t: f64) -> Result<Var> {
    let soft = tape.logsumexp_neg_rows(values, mask, t)?;
    clamp_unit(tape, soft)
}

/// Scalar soft-min with the same clamping as [`aggregate`].
pub fn aggregate_value(values: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    Ok(crate::autodiff::soft_min(values.iter().copied(), t).clamp(0.0, 1.0))
}
