//! Dense numeric kernels shared by the tape operations.
//!
//! Every kernel writes each output row with the same sequential inner loop
//! whether or not the `parallel` feature is enabled, so results are bitwise
//! identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Outputs smaller than this are filled on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_LEN: usize = 4096;

/// Calls `f(i, row)` for every `width`-sized row of `out`.
pub(crate) fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() >= PAR_MIN_LEN {
            out.par_chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
            return;
        }
    }
    out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
}

/// `a[m×k] · b[k×p]`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for_each_row(&mut out, p, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn inf_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const EXPM_TERM_TOL: f64 = 1e-12;
const EXPM_MAX_TERMS: usize = 30;

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// `b` is scaled by `2^-s` until its infinity norm is at most 0.5; Taylor
/// terms are summed until a term's norm drops below 1e-12 (at most 30 terms)
/// and the result is squared `s` times.
pub(crate) fn expm(b: &[f64], n: usize) -> Vec<f64> {
    let norm = inf_norm(b, n);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled: Vec<f64> = b.iter().map(|v| v * scale).collect();

    let mut result = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
    }
    let mut term = result.clone();
    for k in 1..=EXPM_MAX_TERMS {
        term = matmul(&term, n, n, &scaled, n);
        let inv_k = 1.0 / k as f64;
        term.iter_mut().for_each(|v| *v *= inv_k);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
        if inf_norm(&term, n) < EXPM_TERM_TOL {
            break;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, n, n, &result, n);
    }
    result
}
