//! Gaussian-process models of trajectories over a discrete time grid.
//!
//! Each state dimension is an independent zero-mean GP sharing one
//! squared-exponential kernel. Observations arrive as timestamped
//! measurements in any order, possibly with gaps; they are sorted into a
//! canonical order before the Gram matrix is assembled, so the result depends
//! only on *which* observations were used, never on how they were delivered.

mod kernel;
mod mixture;
mod prepared;

use std::cmp::Ordering;
use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, cholesky_or_jitter, LN_2PI};

pub use kernel::KernelParams;
pub use mixture::{mixture_posterior, GoalMixture, MixtureComponent};
pub use prepared::PreparedPosterior;

/// Row-major trajectory: one row per grid point, one column per state
/// dimension.
pub type Trajectory = DMatrix<f64>;

/// Most negative eigenvalue tolerated in a returned covariance.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite observation from {origin:?} at t={timestamp}")]
    NonFiniteObservation { origin: Source, timestamp: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate sequence {sequence} from {origin:?}")]
    DuplicateSequence { origin: Source, sequence: u64 },
    #[error("Gram matrix ill-conditioned beyond jitter recovery near t = {timestamps:?}")]
    IllConditioned { timestamps: Vec<f64> },
    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("need at least {needed} observations, got {found}")]
    TooFewObservations { needed: usize, found: usize },
    #[error("search grid is empty")]
    EmptySearchGrid,
    #[error("goal list is empty")]
    EmptyGoals,
}

/// Who produced a measurement. The derived order is part of the canonical
/// conditioning order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Operator,
    Robot,
    Agent(u32),
}

/// A timestamped measurement of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedObservation {
    /// Sender clock (s). This is what the GP conditions on.
    pub timestamp: f64,
    /// Receiver clock (s). Informational only.
    pub receive_time: f64,
    pub value: Vec<f64>,
    pub source: Source,
    pub sequence: u64,
}

impl TimedObservation {
    pub fn new(source: Source, sequence: u64, timestamp: f64, value: Vec<f64>) -> Self {
        Self {
            timestamp,
            receive_time: timestamp,
            value,
            source,
            sequence,
        }
    }

    pub fn received_at(mut self, receive_time: f64) -> Self {
        self.receive_time = receive_time;
        self
    }
}

/// Sort key used before every Gram assembly: (timestamp, source, sequence).
pub fn canonical_order(a: &TimedObservation, b: &TimedObservation) -> Ordering {
    a.timestamp
        .total_cmp(&b.timestamp)
        .then(a.source.cmp(&b.source))
        .then(a.sequence.cmp(&b.sequence))
}

/// Evaluation grid `now, now + dt, …, now + horizon·dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub now: f64,
    pub horizon: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(now: f64, horizon: usize, dt: f64) -> Result<Self, GpError> {
        let g = Self { now, horizon, dt };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(GpError::InvalidGrid(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.horizon < 1 {
            return Err(GpError::InvalidGrid("horizon must be >= 1".into()));
        }
        if !self.now.is_finite() {
            return Err(GpError::InvalidGrid("now must be finite".into()));
        }
        Ok(())
    }

    /// Number of grid points (`horizon + 1`).
    pub fn len(&self) -> usize {
        self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, index: usize) -> f64 {
        self.now + index as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn last_time(&self) -> f64 {
        self.time(self.horizon)
    }

    /// Grid index whose time is within half a step of `t`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = ((t - self.now) / self.dt).round();
        if k < 0.0 || k > self.horizon as f64 {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - t).abs() <= 0.5 * self.dt).then_some(k)
    }
}

/// Posterior over a trajectory evaluated on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPosterior {
    pub grid: TimeGrid,
    /// `grid.len() × D`.
    pub mean: Trajectory,
    /// One `grid.len() × grid.len()` covariance per dimension.
    pub covariance: Vec<DMatrix<f64>>,
    /// Observations actually conditioned on, in canonical order.
    pub conditioning_set: Vec<TimedObservation>,
}

impl GpPosterior {
    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn variance_at(&self, index: usize) -> Vec<f64> {
        self.covariance.iter().map(|c| c[(index, index)]).collect()
    }

    /// Sum over dimensions of the marginal variance at one grid index.
    pub fn trace_at(&self, index: usize) -> f64 {
        self.variance_at(index).iter().sum()
    }

    /// Same posterior with every covariance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.covariance {
            *c *= factor;
        }
        out
    }

    /// Same posterior with `offset[d]` added to every mean entry of dimension
    /// `d`.
    pub fn shifted(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for (d, o) in offset.iter().enumerate().take(out.dim()) {
            out.mean.column_mut(d).add_scalar_mut(*o);
        }
        out
    }

    /// Factorize once for repeated density evaluation and sampling.
    pub fn prepare(&self) -> Result<PreparedPosterior, GpError> {
        PreparedPosterior::new(self.mean.clone(), &self.covariance)
    }

    /// Smallest eigenvalue over all per-dimension covariances.
    pub fn min_eigenvalue(&self) -> f64 {
        self.covariance
            .iter()
            .map(|c| SymmetricEigen::new(c.clone()).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_psd(&self) -> Result<(), GpError> {
        let min_eigenvalue = self.min_eigenvalue();
        if min_eigenvalue < -PSD_TOLERANCE {
            return Err(GpError::NotPsd { min_eigenvalue });
        }
        Ok(())
    }

    pub fn check_shape(&self, trajectory: &Trajectory) -> Result<(), GpError> {
        if trajectory.nrows() != self.len() {
            return Err(GpError::DimensionMismatch {
                expected: self.len(),
                found: trajectory.nrows(),
            });
        }
        if trajectory.ncols() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                found: trajectory.ncols(),
            });
        }
        Ok(())
    }
}

/// One conditioning point: a time, its value and its own noise variance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Point<'a> {
    pub t: f64,
    pub value: &'a [f64],
    pub noise: f64,
}

fn validate_observations(obs: &[TimedObservation], dim: usize) -> Result<(), GpError> {
    let mut seen = HashSet::with_capacity(obs.len());
    for o in obs {
        if o.value.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                found: o.value.len(),
            });
        }
        if !o.timestamp.is_finite() || o.value.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFiniteObservation {
                origin: o.source,
                timestamp: o.timestamp,
            });
        }
        if !seen.insert((o.source, o.sequence)) {
            return Err(GpError::DuplicateSequence {
                origin: o.source,
                sequence: o.sequence,
            });
        }
    }
    Ok(())
}

pub(crate) fn sorted(obs: &[TimedObservation]) -> Vec<TimedObservation> {
    let mut v = obs.to_vec();
    v.sort_by(canonical_order);
    v
}

fn gram(params: &KernelParams, points: &[Point]) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        let k = params.covariance(points[i].t, points[j].t);
        if i == j {
            k + points[i].noise
        } else {
            k
        }
    })
}

fn ill_conditioned(params: &KernelParams, points: &[Point], pivot: usize) -> GpError {
    let t = points[pivot.min(points.len() - 1)].t;
    let mut timestamps: Vec<f64> = points
        .iter()
        .map(|p| p.t)
        .filter(|&s| (s - t).abs() <= 1e-6 * params.length_scale)
        .collect();
    timestamps.dedup();
    GpError::IllConditioned { timestamps }
}

/// Conditions `dim` independent GPs on `points` and evaluates mean and
/// covariance at `query` times.
pub(crate) fn condition(
    params: &KernelParams,
    dim: usize,
    points: &[Point],
    query: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>), GpError> {
    let m = query.len();
    let prior = DMatrix::from_fn(m, m, |i, j| params.covariance(query[i], query[j]));
    if points.is_empty() {
        return Ok((DMatrix::zeros(m, dim), prior));
    }
    let n = points.len();
    let chol = cholesky_or_jitter(&gram(params, points), params.signal_variance)
        .map_err(|pivot| ill_conditioned(params, points, pivot))?;
    let y = DMatrix::from_fn(n, dim, |i, d| points[i].value[d]);
    let alpha = chol.solve(&y);
    let cross = DMatrix::from_fn(n, m, |i, j| params.covariance(points[i].t, query[j]));
    let mean = cross.transpose() * alpha;
    let v = chol
        .l_dirty()
        .solve_lower_triangular(&cross)
        .expect("cholesky factor has a positive diagonal");
    let mut cov = prior - v.transpose() * v;
    linalg::symmetrize(&mut cov);
    if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
        let mut timestamps: Vec<f64> = points.iter().map(|p| p.t).collect();
        timestamps.dedup();
        return Err(GpError::IllConditioned { timestamps });
    }
    Ok((mean, cov))
}

/// Log marginal likelihood of the points, summed over dimensions.
pub(crate) fn log_marginal(
    params: &KernelParams,
    dim: usize,
    points: &[Point],
) -> Result<f64, GpError> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let chol = cholesky_or_jitter(&gram(params, points), params.signal_variance)
        .map_err(|pivot| ill_conditioned(params, points, pivot))?;
    let l = chol.l();
    Ok((0..dim)
        .map(|d| {
            let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.value[d]));
            linalg::gaussian_log_density(&l, &y)
        })
        .sum())
}

fn points_of<'a>(params: &KernelParams, obs: &'a [TimedObservation]) -> Vec<Point<'a>> {
    obs.iter()
        .map(|o| Point {
            t: o.timestamp,
            value: &o.value,
            noise: params.noise_variance,
        })
        .collect()
}

/// Posterior of a `dim`-dimensional trajectory given exactly `obs`, on `grid`.
///
/// Missing observations are simply absent; nothing is imputed.
pub fn posterior(
    params: &KernelParams,
    dim: usize,
    obs: &[TimedObservation],
    grid: &TimeGrid,
) -> Result<GpPosterior, GpError> {
    params.validate()?;
    grid.validate()?;
    validate_observations(obs, dim)?;
    let conditioning_set = sorted(obs);
    let points = points_of(params, &conditioning_set);
    let (mean, cov) = condition(params, dim, &points, &grid.times())?;
    Ok(GpPosterior {
        grid: *grid,
        mean,
        covariance: vec![cov; dim],
        conditioning_set,
    })
}

/// Posterior standard deviation of each dimension at the single time `now`.
pub fn predictive_std_at_now(
    params: &KernelParams,
    dim: usize,
    obs: &[TimedObservation],
    now: f64,
) -> Result<Vec<f64>, GpError> {
    params.validate()?;
    validate_observations(obs, dim)?;
    let sorted = sorted(obs);
    let points = points_of(params, &sorted);
    let (_, cov) = condition(params, dim, &points, &[now])?;
    Ok(vec![cov[(0, 0)].max(0.0).sqrt(); dim])
}

/// `count` i.i.d. draws from the posterior, deterministic in `seed`.
pub fn sample(posterior: &GpPosterior, count: usize, seed: u64) -> Result<Vec<Trajectory>, GpError> {
    use rand::Rng;

    let n = posterior.len();
    let roots = posterior
        .covariance
        .iter()
        .map(|c| {
            let eig = SymmetricEigen::new(c.clone());
            let scale = eig.eigenvalues.amax().max(1.0);
            let min = eig.eigenvalues.min();
            if min < -PSD_TOLERANCE * scale {
                return Err(GpError::NotPsd { min_eigenvalue: min });
            }
            let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut x = posterior.mean.clone();
            for (d, root) in roots.iter().enumerate() {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let dx = root * z;
                for i in 0..n {
                    x[(i, d)] += dx[i];
                }
            }
            x
        })
        .collect())
}

/// Gaussian log-density of `trajectory` under the posterior, summed over
/// independent dimensions.
pub fn log_density(posterior: &GpPosterior, trajectory: &Trajectory) -> Result<f64, GpError> {
    posterior.check_shape(trajectory)?;
    Ok(posterior.prepare()?.log_density(trajectory))
}

/// Log marginal likelihood of `obs` under `params`, summed over dimensions.
pub fn log_marginal_likelihood(
    params: &KernelParams,
    obs: &[TimedObservation],
) -> Result<f64, GpError> {
    params.validate()?;
    let dim = obs.first().map_or(0, |o| o.value.len());
    validate_observations(obs, dim)?;
    let sorted = sorted(obs);
    log_marginal(params, dim, &points_of(params, &sorted))
}

/// Grid search over candidate kernels by log marginal likelihood. The first
/// candidate wins ties.
pub fn fit_hyperparameters(
    obs: &[TimedObservation],
    search_grid: &[KernelParams],
) -> Result<KernelParams, GpError> {
    if obs.len() < 3 {
        return Err(GpError::TooFewObservations {
            needed: 3,
            found: obs.len(),
        });
    }
    let mut best: Option<(KernelParams, f64)> = None;
    for candidate in search_grid {
        let lml = log_marginal_likelihood(candidate, obs)?;
        if best.is_none_or(|(_, b)| lml > b) {
            best = Some((*candidate, lml));
        }
    }
    best.map(|(p, _)| p).ok_or(GpError::EmptySearchGrid)
}

/// Standard-normal log density, used in tests and diagnostics.
pub fn standard_normal_log_density(x: f64) -> f64 {
    -0.5 * (x * x + LN_2PI)
}

#[cfg(test)]
mod tests;
