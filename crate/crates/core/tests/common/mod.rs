//! Independent scalar oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use deep_arguing::autodiff::{Tape, Tensor, Var};
use deep_arguing::data::{self, DatasetSchema, PreparedData, SplitConfig};
use deep_arguing::heads::{Architecture, DeepArguingModel, Mlp};
use deep_arguing::qbaf::{Case, QbafBatch};
use deep_arguing::train::TrainConfig;
use deep_arguing::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub mod gradcheck;
pub mod scenarios;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform entries whose magnitudes stay at least `margin` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// True when no two entries are closer than `gap`.
pub fn well_separated(values: &[f64], gap: f64) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).all(|w| w[1] - w[0] >= gap)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. Central differences with step 1e-5 carry
/// round-off near `2e-11 * |f|`, so entries far below 1e-6 cannot be compared
/// relatively; the floor checks them to about 1e-10 absolute instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between reverse-mode gradients of `f` and central
/// differences, over every entry of every input. Non-scalar outputs are
/// contracted with a fixed random tensor first.
pub fn gradient_error(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let project = |tape: &mut Tape, out: Var| -> Var {
        if tape.value(out).len() == 1 && tape.value(out).shape().is_empty() {
            return out;
        }
        let shape = tape.value(out).shape().to_vec();
        let mut r = rng(0xC0FFEE);
        let proj = tape.constant(uniform(&mut r, &shape, -1.0, 1.0)).unwrap();
        let prod = tape.hadamard(out, proj).unwrap();
        tape.sum(prod).unwrap()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = project(&mut tape, out);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for e in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Scalar reference implementations.

/// `-t ln sum exp(-a/t)` clamped to `[0, 1]`; 1 for an empty set.
pub fn soft_min_oracle(values: &[f64], t: f64) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let m = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let s: f64 = values.iter().map(|v| (-(v - m) / t).exp()).sum();
    (m - t * s.ln()).clamp(0.0, 1.0)
}

/// Signed edge weights from an exceptionality matrix, by direct triple loop.
pub fn graph_oracle(w: &[Vec<f64>], labels: &[usize], t: f64) -> Vec<Vec<f64>> {
    let n = labels.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let attack = labels[i] != labels[j];
            let mut terms = Vec::new();
            for g in 0..n {
                if attack && labels[g] != labels[i] {
                    continue;
                }
                terms.push(1.0 - w[i][g].min(w[g][j]));
            }
            let magnitude = w[i][j].min(soft_min_oracle(&terms, t));
            a[i][j] = if attack { -magnitude } else { magnitude };
        }
    }
    a
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn mlp_oracle(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let layers = mlp.weights().len();
    for (l, (w, b)) in mlp.weights().iter().zip(mlp.biases()).enumerate() {
        let (rows, cols) = (w.rows(), w.cols());
        let mut next = b.data().to_vec();
        for o in 0..cols {
            for i in 0..rows {
                next[o] += h[i] * w.at(i, o);
            }
        }
        if l + 1 < layers {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = next;
    }
    h
}

pub fn embed_oracle(model: &DeepArguingModel, x: &[f64]) -> Vec<f64> {
    mlp_oracle(model.edge_head(), &mlp_oracle(model.extractor(), x))
}

pub fn base_score_oracle(model: &DeepArguingModel, x: &[f64]) -> f64 {
    sigmoid(mlp_oracle(model.base_head(), &mlp_oracle(model.extractor(), x))[0])
}

pub fn exceptionality_oracle(ea: &[f64], eb: &[f64], alpha: f64) -> f64 {
    let d = ea.len() as f64;
    let s: f64 = ea.iter().zip(eb).map(|(a, b)| 2.0 * sigmoid(alpha * (a - b)) - 1.0).sum();
    (s / d).max(0.0)
}

/// `tr(exp(M))` by a long plain Taylor series, for small matrices.
pub fn trace_expm_oracle(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut term = vec![vec![0.0; n]; n];
    for (i, row) in term.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut total = n as f64;
    for k in 1..200 {
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    next[i][j] += term[i][l] * m[l][j];
                }
                next[i][j] /= k as f64;
            }
        }
        term = next;
        total += (0..n).map(|i| term[i][i]).sum::<f64>();
    }
    total
}

// ---------------------------------------------------------------------------
// Fixtures.

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::default() }
}

pub fn random_model(seed: u64, input_width: usize, embedding_dim: usize) -> DeepArguingModel {
    let arch = Architecture {
        input_width,
        extractor_widths: vec![8, 6],
        head_hidden_widths: vec![5],
        embedding_dim,
    };
    DeepArguingModel::init(&arch, 10.0, &mut rng(seed)).unwrap()
}

pub fn random_cases(rng: &mut ChaCha8Rng, count: usize, width: usize, num_classes: usize) -> Vec<Case> {
    (0..count)
        .map(|i| Case { x: (0..width).map(|_| rng.random_range(-2.0..2.0)).collect(), label: i % num_classes, id: i })
        .collect()
}

/// Two isotropic 2-D Gaussian blobs with the given spread, centres `distance`
/// apart on the x axis, alternating labels, written as CSV.
pub fn write_blobs(path: &Path, points: usize, sigma: f64, distance: f64, seed: u64) {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut f = std::fs::File::create(path).unwrap();
    writeln!(f, "x1,x2,class").unwrap();
    for i in 0..points {
        let label = i % 2;
        let cx = if label == 0 { -distance / 2.0 } else { distance / 2.0 };
        let (x, y) = (cx + noise.sample(&mut r), noise.sample(&mut r));
        writeln!(f, "{x},{y},{}", ["west", "east"][label]).unwrap();
    }
}

pub fn blob_schema() -> DatasetSchema {
    DatasetSchema {
        label_column: "class".into(),
        numeric_columns: vec!["x1".into(), "x2".into()],
        categorical_columns: vec![],
        label_vocabulary: vec!["west".into(), "east".into()],
    }
}

pub fn blob_config_toml() -> &'static str {
    "label_column = \"class\"\nnumeric_columns = [\"x1\", \"x2\"]\nlabel_vocabulary = [\"west\", \"east\"]\n"
}

pub fn prepared_blobs(dir: &Path, seed: u64) -> PreparedData {
    let path = dir.join(format!("blobs-{seed}.csv"));
    write_blobs(&path, 400, 0.5, 4.0, seed);
    data::load_and_preprocess(&path, None, &blob_schema(), &SplitConfig::default(), seed).unwrap()
}

/// Random graph with `n ≤ 10` nodes, `B ≤ 4` new cases, weights in `[-1, 1]`
/// on the casebase and `[-1, 0]` on new-case edges, zero diagonal.
pub fn random_qbaf(r: &mut ChaCha8Rng) -> QbafBatch {
    let n = r.random_range(1..=10);
    let b = r.random_range(1..=4);
    let mut a = uniform(r, &[n, n], -1.0, 1.0);
    for i in 0..n {
        a.data_mut()[i * n + i] = 0.0;
    }
    let c = r.random_range(1..=n);
    QbafBatch {
        a_cb: a,
        b_cb: uniform(r, &[n], 0.0, 1.0),
        a_n: uniform(r, &[b, n], -1.0, 0.0),
        b_new: uniform(r, &[b], 0.0, 1.0),
        target_indices: (n - c..n).collect(),
    }
}

/// Random acyclic casebase graph: weights only from lower to higher positions
/// of a random permutation.
pub fn random_acyclic_qbaf(r: &mut ChaCha8Rng) -> QbafBatch {
    let mut q = random_qbaf(r);
    let n = q.num_nodes();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    let mut rank = vec![0; n];
    for (p, &v) in order.iter().enumerate() {
        rank[v] = p;
    }
    for i in 0..n {
        for j in 0..n {
            if rank[i] >= rank[j] {
                q.a_cb.data_mut()[i * n + j] = 0.0;
            }
        }
    }
    q
}
