use serde::{Deserialize, Serialize};

use super::{OperatorPosterior, PlannerError};
use crate::gp::GpPosterior;

/// Traces below this are treated as degenerate and clamped.
pub const MIN_TRACE: f64 = 1e-12;

/// Share of control implied by relative posterior uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutonomyAllocation {
    pub operator_weight: f64,
    pub robot_weight: f64,
    pub operator_trace: f64,
    pub robot_trace: f64,
    /// A trace was clamped at [`MIN_TRACE`].
    pub degenerate: bool,
}

impl AutonomyAllocation {
    /// Inverse-trace normalization: each weight is proportional to
    /// `1 / trace`.
    pub fn from_traces(operator_trace: f64, robot_trace: f64) -> Self {
        let degenerate = operator_trace < MIN_TRACE || robot_trace < MIN_TRACE;
        let ot = operator_trace.max(MIN_TRACE);
        let rt = robot_trace.max(MIN_TRACE);
        // (1/ot) / (1/ot + 1/rt), written so that ot = ∞ gives exactly 0
        let operator_weight = if ot.is_infinite() { 0.0 } else { rt / (ot + rt) };
        Self {
            operator_weight,
            robot_weight: 1.0 - operator_weight,
            operator_trace: ot,
            robot_trace: rt,
            degenerate,
        }
    }
}

fn index_at(grid: &crate::gp::TimeGrid, now: f64) -> Result<usize, PlannerError> {
    grid.index_of(now)
        .ok_or_else(|| PlannerError::GridMismatch(format!("time {now} is not on the grid")))
}

/// Allocation from the operator and robot posteriors at time `now`.
pub fn autonomy_measure(
    operator: &OperatorPosterior,
    robot: &GpPosterior,
    now: f64,
) -> Result<AutonomyAllocation, PlannerError> {
    let op_trace = match operator {
        OperatorPosterior::Single(p) => p.trace_at(index_at(&p.grid, now)?),
        OperatorPosterior::Mixture(m) => m.trace_at(index_at(m.grid(), now)?),
    };
    let robot_trace = robot.trace_at(index_at(&robot.grid, now)?);
    Ok(AutonomyAllocation::from_traces(op_trace, robot_trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{mixture_posterior, posterior, KernelParams, Source, TimeGrid, TimedObservation};

    fn post(var: f64) -> GpPosterior {
        let p = KernelParams::new(var, 1.0, 1e-3).unwrap();
        posterior(&p, 2, &[], &TimeGrid::new(0.0, 3, 0.1).unwrap()).unwrap()
    }

    #[test]
    fn equal_traces_split_evenly() {
        let a = autonomy_measure(&OperatorPosterior::Single(post(1.0)), &post(1.0), 0.0).unwrap();
        assert_eq!(a.operator_weight, 0.5);
        assert_eq!(a.robot_weight, 0.5);
    }

    #[test]
    fn diffuse_operator_gets_no_weight() {
        let a = AutonomyAllocation::from_traces(f64::INFINITY, 1.0);
        assert_eq!(a.operator_weight, 0.0);
        assert_eq!(a.robot_weight, 1.0);
        let b = AutonomyAllocation::from_traces(1e12, 1.0);
        assert!(b.operator_weight < 1e-11);
        assert!((b.operator_weight + b.robot_weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_trace_is_clamped_and_flagged() {
        let a = AutonomyAllocation::from_traces(0.0, 1.0);
        assert!(a.degenerate);
        assert_eq!(a.operator_trace, MIN_TRACE);
        assert!(a.operator_weight > 0.999_999);
    }

    #[test]
    fn identical_components_collapse() {
        let p = KernelParams::new(1.0, 1.0, 1e-2).unwrap();
        let grid = TimeGrid::new(0.0, 3, 0.1).unwrap();
        let obs = [TimedObservation::new(Source::Operator, 0, -0.1, vec![0.5, 0.0])];
        let mut mix = mixture_posterior(&p, &obs, &[vec![1.0, 0.0], vec![1.0, 0.0]], &grid, 0.1).unwrap();
        mix.weights = vec![0.3, 0.7];
        let single = OperatorPosterior::Single(mix.components[0].posterior.clone());
        let robot = post(0.5);
        let a = autonomy_measure(&OperatorPosterior::Mixture(mix), &robot, 0.0).unwrap();
        let b = autonomy_measure(&single, &robot, 0.0).unwrap();
        assert!((a.operator_weight - b.operator_weight).abs() < 1e-12);
    }

    #[test]
    fn off_grid_time_rejected() {
        assert!(autonomy_measure(&OperatorPosterior::Single(post(1.0)), &post(1.0), 7.0).is_err());
    }
}
