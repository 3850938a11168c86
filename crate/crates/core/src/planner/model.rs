use serde::{Deserialize, Serialize};

use super::{JointSample, PlannerError};
use crate::gp::{GoalMixture, GpPosterior, PreparedPosterior, TimeGrid, Trajectory};
use crate::interaction::{
    attraction_unchecked, cooperation_pair, position_dims, AttractionParams, CooperationParams,
};
use crate::linalg::log_sum_exp;

/// Operator intent: a single GP posterior or a goal mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OperatorPosterior {
    Single(GpPosterior),
    Mixture(GoalMixture),
}

impl OperatorPosterior {
    pub fn grid(&self) -> &TimeGrid {
        match self {
            Self::Single(p) => &p.grid,
            Self::Mixture(m) => m.grid(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Single(p) => p.dim(),
            Self::Mixture(m) => m.dim(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            Self::Single(p) => Self::Single(p.scaled(factor)),
            Self::Mixture(m) => {
                let mut m = m.clone();
                for c in &mut m.components {
                    c.posterior = c.posterior.scaled(factor);
                }
                Self::Mixture(m)
            }
        }
    }
}

/// All trajectory posteriors entering the joint density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posteriors {
    pub operator: Option<OperatorPosterior>,
    pub robot: GpPosterior,
    pub agents: Vec<GpPosterior>,
}

/// Interaction terms; `None` disables a term (ψ ≡ 1 for that factor).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionParams {
    pub attraction: Option<AttractionParams>,
    pub cooperation: Option<CooperationParams>,
}

/// Per-factor contributions to the unnormalized joint log-density.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorBreakdown {
    pub operator: f64,
    pub robot: f64,
    pub agents: f64,
    pub attraction: f64,
    pub cooperation: f64,
}

impl FactorBreakdown {
    pub fn total(&self) -> f64 {
        self.operator + self.robot + self.agents + self.attraction + self.cooperation
    }

    pub fn interaction(&self) -> f64 {
        self.attraction + self.cooperation
    }

    pub fn priors(&self) -> f64 {
        self.operator + self.robot + self.agents
    }
}

pub(crate) enum OperatorFactor {
    Single(PreparedPosterior),
    Mixture {
        log_weights: Vec<f64>,
        components: Vec<PreparedPosterior>,
    },
}

impl OperatorFactor {
    pub(crate) fn log_density(&self, h: &Trajectory) -> f64 {
        match self {
            Self::Single(p) => p.log_density(h),
            Self::Mixture {
                log_weights,
                components,
            } => {
                let terms: Vec<f64> = log_weights
                    .iter()
                    .zip(components)
                    .map(|(lw, c)| lw + c.log_density(h))
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }

    pub(crate) fn components(&self) -> Vec<&PreparedPosterior> {
        match self {
            Self::Single(p) => vec![p],
            Self::Mixture { components, .. } => components.iter().collect(),
        }
    }

    /// Component with the highest responsibility for `h`.
    pub(crate) fn responsible(&self, h: &Trajectory) -> &PreparedPosterior {
        match self {
            Self::Single(p) => p,
            Self::Mixture {
                log_weights,
                components,
            } => {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (i, (lw, c)) in log_weights.iter().zip(components).enumerate() {
                    let s = lw + c.log_density(h);
                    if s > best_score {
                        best = i;
                        best_score = s;
                    }
                }
                &components[best]
            }
        }
    }
}

/// The joint density with every factor factorized, ready for scoring.
pub struct JointModel {
    pub(crate) operator: Option<OperatorFactor>,
    pub(crate) robot: PreparedPosterior,
    pub(crate) agents: Vec<PreparedPosterior>,
    pub(crate) attraction: Option<AttractionParams>,
    pub(crate) cooperation: Option<CooperationParams>,
    pub(crate) grid: TimeGrid,
    /// Constant added to every score; the argmax must not depend on it.
    pub(crate) log_offset: f64,
}

fn same_grid(what: &str, a: &TimeGrid, b: &TimeGrid) -> Result<(), PlannerError> {
    if a.horizon != b.horizon || a.dt != b.dt || a.now != b.now {
        return Err(PlannerError::GridMismatch(format!(
            "{what} grid {b:?} differs from robot grid {a:?}"
        )));
    }
    Ok(())
}

impl JointModel {
    pub fn new(posteriors: &Posteriors, interaction: &InteractionParams) -> Result<Self, PlannerError> {
        let grid = posteriors.robot.grid;
        let robot_dim = posteriors.robot.dim();
        let operator = match &posteriors.operator {
            None => None,
            Some(op) => {
                same_grid("operator", &grid, op.grid())?;
                if let Some(a) = &interaction.attraction {
                    if a.dim() != op.dim() || op.dim() > robot_dim {
                        return Err(PlannerError::GridMismatch(format!(
                            "attraction sigma is {0}x{0} but operator has {1} dims and robot {2}",
                            a.dim(),
                            op.dim(),
                            robot_dim
                        )));
                    }
                }
                Some(match op {
                    OperatorPosterior::Single(p) => OperatorFactor::Single(p.prepare()?),
                    OperatorPosterior::Mixture(m) => OperatorFactor::Mixture {
                        log_weights: m.weights.iter().map(|w| w.ln()).collect(),
                        components: m
                            .components
                            .iter()
                            .map(|c| c.posterior.prepare())
                            .collect::<Result<_, _>>()?,
                    },
                })
            }
        };
        let pos = position_dims(robot_dim);
        let agents = posteriors
            .agents
            .iter()
            .map(|a| {
                same_grid("agent", &grid, &a.grid)?;
                if a.dim() < pos {
                    return Err(PlannerError::GridMismatch(format!(
                        "agent has {} dims, need {pos}",
                        a.dim()
                    )));
                }
                Ok(a.prepare()?)
            })
            .collect::<Result<Vec<_>, PlannerError>>()?;
        Ok(Self {
            operator,
            robot: posteriors.robot.prepare()?,
            agents,
            attraction: interaction.attraction.clone(),
            cooperation: interaction.cooperation,
            grid,
            log_offset: 0.0,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn has_operator(&self) -> bool {
        self.operator.is_some()
    }

    pub(crate) fn operator_log_density(&self, h: &Trajectory) -> f64 {
        self.operator.as_ref().map_or(0.0, |o| o.log_density(h))
    }

    pub(crate) fn attraction_term(&self, h: Option<&Trajectory>, f_r: &Trajectory) -> f64 {
        match (h, &self.attraction, &self.operator) {
            (Some(h), Some(a), Some(_)) => attraction_unchecked(h, f_r, a.precision(), self.grid.dt),
            _ => 0.0,
        }
    }

    pub(crate) fn cooperation_term(&self, f_r: &Trajectory, agent: &Trajectory) -> f64 {
        self.cooperation
            .as_ref()
            .map_or(0.0, |c| cooperation_pair(f_r, agent, c))
    }

    /// Per-factor breakdown of the unnormalized joint log-density.
    pub fn breakdown(&self, h: Option<&Trajectory>, f_r: &Trajectory, agents: &[Trajectory]) -> FactorBreakdown {
        FactorBreakdown {
            operator: h.map_or(0.0, |h| self.operator_log_density(h)),
            robot: self.robot.log_density(f_r),
            agents: self
                .agents
                .iter()
                .zip(agents)
                .map(|(p, a)| p.log_density(a))
                .sum(),
            attraction: self.attraction_term(h, f_r),
            cooperation: agents.iter().map(|a| self.cooperation_term(f_r, a)).sum(),
        }
    }

    pub fn log_density(&self, h: Option<&Trajectory>, f_r: &Trajectory, agents: &[Trajectory]) -> f64 {
        self.breakdown(h, f_r, agents).total()
    }

    /// Shape-checked scoring of a candidate.
    pub fn score(&self, sample: &JointSample) -> Result<FactorBreakdown, PlannerError> {
        let n = self.grid.len();
        let check = |what: &str, t: &Trajectory, dim: usize| {
            if t.nrows() != n || t.ncols() != dim {
                return Err(PlannerError::GridMismatch(format!(
                    "{what} is {}x{}, expected {n}x{dim}",
                    t.nrows(),
                    t.ncols()
                )));
            }
            Ok(())
        };
        check("robot trajectory", &sample.f_r, self.robot.dim())?;
        match (&self.operator, &sample.h) {
            (Some(op), Some(h)) => check("operator trajectory", h, op.components()[0].dim())?,
            (None, None) => {}
            _ => {
                return Err(PlannerError::GridMismatch(
                    "operator trajectory presence does not match the model".into(),
                ))
            }
        }
        if sample.agents.len() != self.agents.len() {
            return Err(PlannerError::GridMismatch(format!(
                "{} agent trajectories for {} agent posteriors",
                sample.agents.len(),
                self.agents.len()
            )));
        }
        for (a, p) in sample.agents.iter().zip(&self.agents) {
            check("agent trajectory", a, p.dim())?;
        }
        Ok(self.breakdown(sample.h.as_ref(), &sample.f_r, &sample.agents))
    }
}

/// `ln ψ + ln p(h|z) + ln p(f_r|z) + Σ ln p(f_i|z)`, without `ln Z`.
pub fn joint_log_density(
    sample: &JointSample,
    posteriors: &Posteriors,
    interaction: &InteractionParams,
) -> Result<f64, PlannerError> {
    Ok(JointModel::new(posteriors, interaction)?.score(sample)?.total())
}
