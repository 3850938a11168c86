//! Receding-horizon blending of operator intent and onboard autonomy.
//!
//! The joint density over operator trajectory `h`, robot trajectory `f_r`
//! and agent trajectories `f_i` is the product of their GP posteriors times
//! the interaction potential. [`map_infer`] finds an approximate maximizer by
//! sampling, scoring and coordinate refinement; the robot executes only the
//! first step and replans on the next tick.

mod autonomy;
mod map;
mod model;
pub(crate) mod session;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GpError, Trajectory};
use crate::interaction::InteractionError;

pub use autonomy::{autonomy_measure, AutonomyAllocation, MIN_TRACE};
pub use map::map_infer;
pub use model::{
    joint_log_density, FactorBreakdown, InteractionParams, JointModel, OperatorPosterior,
    Posteriors,
};
pub use session::{PlannerSession, SessionConfig, AGENT_DIM, OPERATOR_DIM, ROBOT_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
    #[error("inference failed: no candidate had a finite score")]
    InferenceFailure { diagnostics: Box<Diagnostics> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Future steps on the planning grid.
    pub horizon: usize,
    /// Joint samples drawn before refinement.
    pub sample_count: usize,
    /// Grid step (s).
    pub dt: f64,
    pub seed: u64,
    /// Coordinate hill-climbing sweeps; sweep `i` perturbs with covariance
    /// scaled by `0.25^i`.
    pub refine_iterations: usize,
    /// Random perturbations tried per factor per sweep.
    pub refine_proposals: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            sample_count: 100,
            dt: 0.05,
            seed: 0,
            refine_iterations: 6,
            refine_proposals: 8,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.horizon < 1 {
            return Err(PlannerError::InvalidConfig("horizon must be >= 1".into()));
        }
        if self.sample_count < 1 {
            return Err(PlannerError::InvalidConfig("sample_count must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PlannerError::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        Ok(())
    }
}

/// One candidate joint realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSample {
    /// Absent when the operator factor is not part of the model.
    pub h: Option<Trajectory>,
    pub f_r: Trajectory,
    pub agents: Vec<Trajectory>,
    pub unnormalized_log_density: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Per-factor terms of the selected sample.
    pub breakdown: FactorBreakdown,
    /// Range (max − min) of each term across the finite initial candidates:
    /// how strongly each factor influenced the selection.
    pub selection_spread: FactorBreakdown,
    /// Incumbent score after the initial selection and after each sweep.
    pub refine_trace: Vec<f64>,
    pub finite_candidates: usize,
    /// The planner failed this tick and the previous action was repeated.
    pub fallback: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendResult {
    pub map_sample: JointSample,
    /// Robot state at grid index 1 of the selected plan.
    pub next_action: Vec<f64>,
    /// Planar velocity taking the plan from index 0 to index 1.
    pub velocity: [f64; 2],
    pub autonomy: AutonomyAllocation,
    pub diagnostics: Diagnostics,
}

impl BlendResult {
    /// Planar positions of the planned robot path.
    pub fn planned_path(&self) -> Vec<[f64; 2]> {
        let f = &self.map_sample.f_r;
        (0..f.nrows())
            .map(|i| [f[(i, 0)], if f.ncols() > 1 { f[(i, 1)] } else { 0.0 }])
            .collect()
    }
}
