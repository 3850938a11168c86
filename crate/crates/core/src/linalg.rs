//! Small dense linear-algebra helpers shared by the GP and planner code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Jitter ladder: ×10 per retry.
pub(crate) const JITTER_START: f64 = 1e-10;
pub(crate) const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of `mat`, or of `mat + jitter·scale·I` with the jitter
/// escalated up the ladder until the factorization succeeds.
///
/// On failure returns the pivot at which the last attempt broke down.
pub(crate) fn cholesky_or_jitter(
    mat: &DMatrix<f64>,
    scale: f64,
) -> Result<Cholesky<f64, Dyn>, usize> {
    match Cholesky::new(mat.clone()) {
        Some(ch) if ch.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) => Ok(ch),
        _ => ladder(mat, scale, JITTER_START),
    }
}

fn ladder(mat: &DMatrix<f64>, scale: f64, start: f64) -> Result<Cholesky<f64, Dyn>, usize> {
    let mut rel = start;
    loop {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += rel * scale;
        }
        if let Some(ch) = Cholesky::new(m.clone()) {
            return Ok(ch);
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(first_failing_pivot(&m));
        }
        rel *= 10.0;
    }
}

/// Index of the first pivot where an unpivoted Cholesky sweep hits a
/// non-positive diagonal.
pub(crate) fn first_failing_pivot(mat: &DMatrix<f64>) -> usize {
    let n = mat.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = mat[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return j;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = mat[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    n.saturating_sub(1)
}

/// `ln N(diff; 0, LLᵀ)` given the lower factor.
pub(crate) fn gaussian_log_density(l: &DMatrix<f64>, diff: &DVector<f64>) -> f64 {
    let n = diff.len();
    let y = l
        .solve_lower_triangular(diff)
        .expect("cholesky factor has a positive diagonal");
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * (y.norm_squared() + log_det + n as f64 * LN_2PI)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub(crate) fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1);
    m.diagonal().iter().sum::<f64>() / n as f64
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
