//! Goal-conditioned GP mixtures.
//!
//! Each component conditions the same observations on an extra
//! pseudo-observation placing the trajectory at a candidate goal at the end
//! of the grid. Component weights are proportional to how well each goal
//! explains the observed data.

use serde::{Deserialize, Serialize};

use super::{
    condition, log_marginal, sorted, validate_observations, GpError, GpPosterior, KernelParams,
    Point, TimeGrid, TimedObservation,
};
use crate::linalg::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub goal: Vec<f64>,
    pub posterior: GpPosterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalMixture {
    pub components: Vec<MixtureComponent>,
    pub weights: Vec<f64>,
}

impl GoalMixture {
    pub fn dim(&self) -> usize {
        self.components[0].posterior.dim()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.components[0].posterior.grid
    }

    /// Total variance at a grid index: weighted within-component trace plus
    /// the spread of component means around the mixture mean.
    pub fn trace_at(&self, index: usize) -> f64 {
        let dim = self.dim();
        let mut mixture_mean = vec![0.0; dim];
        for (c, w) in self.components.iter().zip(&self.weights) {
            for (d, m) in mixture_mean.iter_mut().enumerate() {
                *m += w * c.posterior.mean[(index, d)];
            }
        }
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let spread: f64 = (0..dim)
                    .map(|d| (c.posterior.mean[(index, d)] - mixture_mean[d]).powi(2))
                    .sum();
                w * (c.posterior.trace_at(index) + spread)
            })
            .sum()
    }

    /// Index of the heaviest component (first on ties).
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

/// Builds one component per goal; see the module docs.
pub fn mixture_posterior(
    params: &KernelParams,
    obs: &[TimedObservation],
    goals: &[Vec<f64>],
    grid: &TimeGrid,
    goal_noise: f64,
) -> Result<GoalMixture, GpError> {
    params.validate()?;
    grid.validate()?;
    if goals.is_empty() {
        return Err(GpError::EmptyGoals);
    }
    if !(goal_noise > 0.0 && goal_noise.is_finite()) {
        return Err(GpError::InvalidParams(format!(
            "goal_noise must be finite and > 0, got {goal_noise}"
        )));
    }
    let dim = goals[0].len();
    for g in goals {
        if g.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                found: g.len(),
            });
        }
    }
    validate_observations(obs, dim)?;
    let conditioning_set = sorted(obs);
    let query = grid.times();
    let t_goal = grid.last_time();

    let mut components = Vec::with_capacity(goals.len());
    let mut log_weights = Vec::with_capacity(goals.len());
    for goal in goals {
        let pseudo = Point {
            t: t_goal,
            value: goal,
            noise: goal_noise,
        };
        let mut points: Vec<Point> = conditioning_set
            .iter()
            .map(|o| Point {
                t: o.timestamp,
                value: &o.value,
                noise: params.noise_variance,
            })
            .collect();
        points.push(pseudo);
        let (mean, cov) = condition(params, dim, &points, &query)?;
        // p(obs | goal) = p(obs, goal) / p(goal)
        let joint = log_marginal(params, dim, &points)?;
        let goal_only = log_marginal(params, dim, &[pseudo])?;
        log_weights.push(joint - goal_only);
        components.push(MixtureComponent {
            goal: goal.clone(),
            posterior: GpPosterior {
                grid: *grid,
                mean,
                covariance: vec![cov; dim],
                conditioning_set: conditioning_set.clone(),
            },
        });
    }
    let norm = log_sum_exp(&log_weights);
    let weights = log_weights.iter().map(|l| (l - norm).exp()).collect();
    Ok(GoalMixture {
        components,
        weights,
    })
}
