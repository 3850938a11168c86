use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{GpError, Trajectory};
use crate::linalg::{cholesky_or_jitter, mean_diagonal, LN_2PI};

/// A posterior factorized for repeated scoring and sampling.
///
/// Holds, per dimension, the (jittered) lower Cholesky factor of the
/// covariance and its inverse.
#[derive(Debug, Clone)]
pub struct PreparedPosterior {
    mean: Trajectory,
    dims: Vec<PreparedDim>,
}

#[derive(Debug, Clone)]
struct PreparedDim {
    lower: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl PreparedPosterior {
    pub fn new(mean: Trajectory, covariance: &[DMatrix<f64>]) -> Result<Self, GpError> {
        let n = mean.nrows();
        if covariance.len() != mean.ncols() {
            return Err(GpError::DimensionMismatch {
                expected: mean.ncols(),
                found: covariance.len(),
            });
        }
        let dims = covariance
            .iter()
            .map(|c| {
                let scale = mean_diagonal(c);
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(GpError::NotPsd {
                        min_eigenvalue: scale,
                    });
                }
                let chol = cholesky_or_jitter(c, scale).map_err(|_| GpError::NotPsd {
                    min_eigenvalue: f64::NAN,
                })?;
                let lower = chol.l();
                let log_det: f64 = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Ok(PreparedDim {
                    precision: chol.inverse(),
                    lower,
                    log_norm: -0.5 * (log_det + n as f64 * LN_2PI),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { mean, dims })
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn mean(&self) -> &Trajectory {
        &self.mean
    }

    /// Inverse covariance of dimension `d`.
    pub fn precision(&self, d: usize) -> &DMatrix<f64> {
        &self.dims[d].precision
    }

    /// Log-density of a trajectory. The caller guarantees the shape.
    pub fn log_density(&self, x: &Trajectory) -> f64 {
        let n = self.len();
        let mut total = 0.0;
        let mut y = vec![0.0; n];
        for (d, pd) in self.dims.iter().enumerate() {
            // forward substitution L y = x_d - m_d
            let l = &pd.lower;
            let mut q = 0.0;
            for i in 0..n {
                let mut s = x[(i, d)] - self.mean[(i, d)];
                for (k, yk) in y.iter().enumerate().take(i) {
                    s -= l[(i, k)] * yk;
                }
                y[i] = s / l[(i, i)];
                q += y[i] * y[i];
            }
            total += pd.log_norm - 0.5 * q;
        }
        total
    }

    /// `center + std_scale · L z` with `z` standard normal, per dimension.
    pub fn perturb<R: Rng + ?Sized>(&self, center: &Trajectory, std_scale: f64, rng: &mut R) -> Trajectory {
        let n = self.len();
        let mut x = center.clone();
        for (d, pd) in self.dims.iter().enumerate() {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let dx = &pd.lower * z;
            for i in 0..n {
                x[(i, d)] += std_scale * dx[i];
            }
        }
        x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        self.perturb(&self.mean, 1.0, rng)
    }
}
