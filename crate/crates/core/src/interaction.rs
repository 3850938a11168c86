//! Interaction potentials coupling operator intent, robot path and crowd.
//!
//! Everything here is a log-potential: `ln ψ = ln ψ_h + ln ψ_f`, each term a
//! sum of per-step contributions over the planning grid and each bounded
//! above by zero.
//!
//! * Attraction compares the operator's commanded velocities `h(τ)` with the
//!   robot's planned velocities `v(τ) = (p(τ+1) − p(τ)) / dt` under a
//!   quadratic form in `Σ⁻¹`; identical paths score 0 and dissimilar ones
//!   fall off exponentially.
//! * Cooperation penalizes robot/agent proximity with
//!   `ln(1 − α·exp(−d²/2γ²))` at every grid point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InteractionError {
    #[error("invalid interaction parameters: {0}")]
    InvalidParams(String),
    #[error("grid mismatch: {what} has {found} steps, expected {expected}")]
    GridMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Attraction covariance Σ in command units². Keeps its inverse alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct AttractionParams {
    sigma: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl AttractionParams {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self, InteractionError> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(InteractionError::InvalidParams("sigma must be square and non-empty".into()));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(InteractionError::InvalidParams("sigma must be finite".into()));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
            return Err(InteractionError::InvalidParams("sigma must be symmetric".into()));
        }
        let chol = nalgebra::Cholesky::new(sigma.clone()).ok_or_else(|| {
            InteractionError::InvalidParams("sigma must be positive definite".into())
        })?;
        Ok(Self {
            precision: chol.inverse(),
            sigma,
        })
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self, InteractionError> {
        Self::new(DMatrix::identity(dim, dim) * variance)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Σ → cΣ.
    pub fn scaled(&self, c: f64) -> Result<Self, InteractionError> {
        Self::new(&self.sigma * c)
    }
}

impl TryFrom<Vec<Vec<f64>>> for AttractionParams {
    type Error = InteractionError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(InteractionError::InvalidParams("sigma must be square".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

impl From<AttractionParams> for Vec<Vec<f64>> {
    fn from(p: AttractionParams) -> Self {
        p.sigma.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooperationParams {
    /// α in [0, 1).
    pub strength: f64,
    /// γ > 0 (m).
    pub radius: f64,
}

impl CooperationParams {
    pub fn new(strength: f64, radius: f64) -> Result<Self, InteractionError> {
        let p = Self { strength, radius };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), InteractionError> {
        if !(0.0..1.0).contains(&self.strength) {
            return Err(InteractionError::InvalidParams(format!(
                "strength must be in [0, 1), got {}",
                self.strength
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(InteractionError::InvalidParams(format!(
                "radius must be > 0, got {}",
                self.radius
            )));
        }
        Ok(())
    }

    /// Per-step log-potential at squared distance `d2`.
    #[inline]
    pub fn log_term(&self, d2: f64) -> f64 {
        (-self.strength * (-d2 / (2.0 * self.radius * self.radius)).exp()).ln_1p()
    }
}

/// Number of leading state columns treated as planar position.
pub fn position_dims(state_dim: usize) -> usize {
    state_dim.min(2)
}

/// First differences of the leading `dims` columns of `f_r`, divided by `dt`.
pub fn robot_velocities(f_r: &Trajectory, dims: usize, dt: f64) -> DMatrix<f64> {
    let n = f_r.nrows();
    DMatrix::from_fn(n.saturating_sub(1), dims, |t, d| {
        (f_r[(t + 1, d)] - f_r[(t, d)]) / dt
    })
}

/// `ln ψ_h` without shape checks.
pub(crate) fn attraction_unchecked(
    h: &Trajectory,
    f_r: &Trajectory,
    precision: &DMatrix<f64>,
    dt: f64,
) -> f64 {
    let dims = precision.nrows();
    let steps = f_r.nrows().saturating_sub(1);
    let mut e = [0.0f64; 8];
    let mut e_vec;
    let err: &mut [f64] = if dims <= e.len() {
        &mut e[..dims]
    } else {
        e_vec = vec![0.0; dims];
        &mut e_vec
    };
    let mut total = 0.0;
    for t in 0..steps {
        for d in 0..dims {
            err[d] = h[(t, d)] - (f_r[(t + 1, d)] - f_r[(t, d)]) / dt;
        }
        for i in 0..dims {
            let mut row = 0.0;
            for j in 0..dims {
                row += precision[(i, j)] * err[j];
            }
            total += err[i] * row;
        }
    }
    -total
}

/// `ln ψ_f` for one agent, without shape checks.
pub(crate) fn cooperation_pair(f_r: &Trajectory, agent: &Trajectory, params: &CooperationParams) -> f64 {
    let pos = position_dims(f_r.ncols()).min(agent.ncols());
    (0..f_r.nrows())
        .map(|t| {
            let d2: f64 = (0..pos).map(|d| (f_r[(t, d)] - agent[(t, d)]).powi(2)).sum();
            params.log_term(d2)
        })
        .sum()
}

fn check_rows(what: &'static str, expected: usize, found: usize) -> Result<(), InteractionError> {
    if expected != found {
        return Err(InteractionError::GridMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// `ln ψ_h(h, f_r) = −Σ_τ (h(τ) − v(τ))ᵀ Σ⁻¹ (h(τ) − v(τ))`.
pub fn attraction(
    h: &Trajectory,
    f_r: &Trajectory,
    params: &AttractionParams,
    dt: f64,
) -> Result<f64, InteractionError> {
    check_rows("operator trajectory", f_r.nrows(), h.nrows())?;
    if h.ncols() != params.dim() || f_r.ncols() < params.dim() {
        return Err(InteractionError::DimensionMismatch(format!(
            "sigma is {}x{}, operator has {} dims, robot has {}",
            params.dim(),
            params.dim(),
            h.ncols(),
            f_r.ncols()
        )));
    }
    if !(dt > 0.0) {
        return Err(InteractionError::InvalidParams(format!("dt must be > 0, got {dt}")));
    }
    Ok(attraction_unchecked(h, f_r, params.precision(), dt))
}

/// `ln ψ_f(f_r, f) = Σ_i Σ_τ ln(1 − α·exp(−‖p_r(τ) − p_i(τ)‖² / 2γ²))`.
pub fn cooperation(
    f_r: &Trajectory,
    agents: &[Trajectory],
    params: &CooperationParams,
) -> Result<f64, InteractionError> {
    let pos = position_dims(f_r.ncols());
    for a in agents {
        check_rows("agent trajectory", f_r.nrows(), a.nrows())?;
        if a.ncols() < pos {
            return Err(InteractionError::DimensionMismatch(format!(
                "agent has {} dims, need {pos} position dims",
                a.ncols()
            )));
        }
    }
    Ok(agents.iter().map(|a| cooperation_pair(f_r, a, params)).sum())
}

/// `ln ψ = ln ψ_h + ln ψ_f`.
pub fn joint_log_potential(
    h: &Trajectory,
    f_r: &Trajectory,
    agents: &[Trajectory],
    attraction_params: &AttractionParams,
    cooperation_params: &CooperationParams,
    dt: f64,
) -> Result<f64, InteractionError> {
    Ok(attraction(h, f_r, attraction_params, dt)? + cooperation(f_r, agents, cooperation_params)?)
}
