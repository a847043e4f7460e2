//! Three-case minimality configurations. Cases are ordered by decreasing
//! exceptionality, alpha over beta over gamma, with forward exceptionality
//! near 1 and none backwards.

use deep_arguing::autodiff::{Tape, Tensor};
use deep_arguing::qbaf::edges_from_exceptionality;

pub const HIGH: f64 = 0.999;
pub const TEMPERATURE: f64 = 0.025;
const ALPHA: usize = 0;
const BETA: usize = 1;
const GAMMA: usize = 2;

pub struct Scenario {
    pub name: &'static str,
    pub labels: [usize; 3],
    /// Edges that should keep most of their weight, with expected sign.
    pub retained: Vec<(usize, usize, f64)>,
    /// Edges minimality should suppress, with the sign they would carry.
    pub suppressed: Vec<(usize, usize, f64)>,
}

pub fn scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "(a) only the minimal same-label attacker attacks",
            labels: [0, 0, 1],
            retained: vec![(BETA, GAMMA, -1.0)],
            suppressed: vec![(ALPHA, GAMMA, -1.0)],
        },
        Scenario {
            name: "(b) a cross-label attacker attacks both",
            labels: [0, 1, 1],
            retained: vec![(ALPHA, BETA, -1.0), (ALPHA, GAMMA, -1.0), (BETA, GAMMA, 1.0)],
            suppressed: vec![],
        },
        Scenario {
            name: "(c) transitive support is suppressed",
            labels: [0, 0, 0],
            retained: vec![(ALPHA, BETA, 1.0), (BETA, GAMMA, 1.0)],
            suppressed: vec![(ALPHA, GAMMA, 1.0)],
        },
        Scenario {
            name: "(d) support is redundant under indirect defence",
            labels: [0, 1, 0],
            retained: vec![(ALPHA, BETA, -1.0), (BETA, GAMMA, -1.0)],
            suppressed: vec![(ALPHA, GAMMA, 1.0)],
        },
    ]
}

pub fn exceptionality() -> Tensor {
    let mut w = vec![0.0; 9];
    for (i, j) in [(ALPHA, BETA), (BETA, GAMMA), (ALPHA, GAMMA)] {
        w[i * 3 + j] = HIGH;
    }
    Tensor::matrix(3, 3, w).unwrap()
}

pub fn edges(labels: &[usize; 3]) -> Tensor {
    let mut tape = Tape::new();
    let w = tape.constant(exceptionality()).unwrap();
    let a = edges_from_exceptionality(&mut tape, w, labels, TEMPERATURE).unwrap();
    tape.value(a).clone()
}

/// Checks one scenario; returns a description of the first violation.
/// Every retained edge must exceed every suppressed edge by at least 0.5 in
/// magnitude, and carry the expected sign.
pub fn check(s: &Scenario) -> Result<String, String> {
    let a = edges(&s.labels);
    let mut report = Vec::new();
    for &(i, j, sign) in s.retained.iter().chain(&s.suppressed) {
        let w = a.at(i, j);
        if w != 0.0 && w.signum() != sign {
            return Err(format!("{}: edge {i}->{j} = {w} has the wrong sign", s.name));
        }
        report.push(format!("{i}->{j}={w:.3}"));
    }
    let min_retained = s.retained.iter().map(|&(i, j, _)| a.at(i, j).abs()).fold(f64::INFINITY, f64::min);
    let max_suppressed = s.suppressed.iter().map(|&(i, j, _)| a.at(i, j).abs()).fold(0.0, f64::max);
    if min_retained - max_suppressed < 0.5 {
        return Err(format!("{}: retained {min_retained:.3} vs suppressed {max_suppressed:.3}", s.name));
    }
    Ok(report.join(" "))
}
