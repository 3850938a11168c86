//! Per-tick replanning over a rolling observation window.
//!
//! Positions are planned in a frame anchored at the latest robot (or agent)
//! observation so that the zero-mean GP priors mean "stay near where you
//! were last seen" rather than "return to the origin". Posteriors are shifted
//! back to world coordinates before inference. The operator trajectory is a
//! planar velocity command and needs no anchoring.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    autonomy_measure, map_infer, AutonomyAllocation, BlendResult, Diagnostics, InteractionParams,
    JointSample, OperatorPosterior, PlannerConfig, PlannerError, Posteriors,
};
use crate::gp::{self, GpError, GpPosterior, KernelParams, Source, TimeGrid, TimedObservation};

/// Robot state `[x, y, θ]`.
pub const ROBOT_DIM: usize = 3;
/// Agent state `[x, y]`.
pub const AGENT_DIM: usize = 2;
/// Operator command `[v_x, v_y]`.
pub const OPERATOR_DIM: usize = 2;

/// Sequence number reserved for the goal pseudo-observation.
const GOAL_SEQUENCE: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub planner: PlannerConfig,
    pub operator_kernel: KernelParams,
    pub robot_kernel: KernelParams,
    pub agent_kernel: KernelParams,
    pub interaction: InteractionParams,
    /// Observations older than this (s) are forgotten.
    pub history_s: f64,
    /// Navigation goal for the onboard autonomy, if any.
    pub goal: Option<[f64; 2]>,
    /// Variance of the goal pseudo-observation.
    pub goal_variance: f64,
    /// Distance per second the goal pseudo-observation may lead the robot.
    pub cruise_speed: f64,
    /// Ignore the operator entirely.
    pub autonomy_only: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            operator_kernel: KernelParams {
                signal_variance: 1.0,
                length_scale: 1.0,
                noise_variance: 1e-2,
            },
            robot_kernel: KernelParams {
                signal_variance: 1.0,
                length_scale: 1.0,
                noise_variance: 1e-4,
            },
            agent_kernel: KernelParams {
                signal_variance: 1.0,
                length_scale: 1.0,
                noise_variance: 1e-3,
            },
            interaction: InteractionParams::default(),
            history_s: 2.0,
            goal: None,
            goal_variance: 1e-2,
            cruise_speed: 1.0,
            autonomy_only: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        self.planner.validate()?;
        self.operator_kernel.validate()?;
        self.robot_kernel.validate()?;
        self.agent_kernel.validate()?;
        if let Some(a) = &self.interaction.attraction {
            if a.dim() != OPERATOR_DIM {
                return Err(PlannerError::InvalidConfig(format!(
                    "attraction sigma must be {OPERATOR_DIM}x{OPERATOR_DIM}, got {0}x{0}",
                    a.dim()
                )));
            }
        }
        if let Some(c) = &self.interaction.cooperation {
            c.validate()?;
        }
        for (name, v) in [
            ("history_s", self.history_s),
            ("goal_variance", self.goal_variance),
            ("cruise_speed", self.cruise_speed),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlannerError::InvalidConfig(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Per-tick seed derivation (splitmix64 finalizer).
fn tick_seed(seed: u64, tick: u64) -> u64 {
    let mut z = seed ^ tick.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn expected_dim(source: Source) -> usize {
    match source {
        Source::Operator => OPERATOR_DIM,
        Source::Robot => ROBOT_DIM,
        Source::Agent(_) => AGENT_DIM,
    }
}

/// Latest observation by (timestamp, sequence).
fn latest<'a>(obs: impl Iterator<Item = &'a TimedObservation>) -> Option<&'a TimedObservation> {
    obs.max_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.sequence.cmp(&b.sequence)))
}

/// Rolling planner state for one robot.
#[derive(Debug, Clone)]
pub struct PlannerSession {
    config: SessionConfig,
    observations: BTreeMap<(Source, u64), TimedObservation>,
    tick: u64,
    last_anchor: Option<Vec<f64>>,
    previous: Option<BlendResult>,
}

impl PlannerSession {
    pub fn new(config: SessionConfig) -> Result<Self, PlannerError> {
        config.validate()?;
        Ok(Self {
            config,
            observations: BTreeMap::new(),
            tick: 0,
            last_anchor: None,
            previous: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Observations currently held, in canonical order.
    pub fn observations(&self) -> Vec<TimedObservation> {
        gp::sorted(&self.observations.values().cloned().collect::<Vec<_>>())
    }

    pub fn previous(&self) -> Option<&BlendResult> {
        self.previous.as_ref()
    }

    /// Incorporates `delivered` (any subset, any order) and replans on the
    /// grid starting at `now`. Invalid observations reject the whole batch
    /// without touching the session. Inference failures repeat the previous
    /// action with `diagnostics.fallback` set.
    pub fn step(
        &mut self,
        now: f64,
        delivered: &[TimedObservation],
    ) -> Result<BlendResult, PlannerError> {
        if !now.is_finite() {
            return Err(PlannerError::InvalidConfig(format!("now must be finite, got {now}")));
        }
        for o in delivered {
            let dim = expected_dim(o.source);
            if o.value.len() != dim {
                return Err(GpError::DimensionMismatch {
                    expected: dim,
                    found: o.value.len(),
                }
                .into());
            }
            if !o.timestamp.is_finite() || o.value.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFiniteObservation {
                    origin: o.source,
                    timestamp: o.timestamp,
                }
                .into());
            }
        }
        for o in delivered {
            self.observations
                .entry((o.source, o.sequence))
                .or_insert_with(|| o.clone());
        }
        let cutoff = now - self.config.history_s;
        self.observations.retain(|_, o| o.timestamp >= cutoff);

        let seed = tick_seed(self.config.planner.seed, self.tick);
        self.tick += 1;
        let grid = TimeGrid::new(now, self.config.planner.horizon, self.config.planner.dt)?;
        let result = self
            .posteriors(&grid)
            .and_then(|(posteriors, allocation)| {
                let config = PlannerConfig {
                    seed,
                    ..self.config.planner.clone()
                };
                let mut r = map_infer(&posteriors, &self.config.interaction, &config)?;
                if let Some(a) = allocation {
                    r.autonomy = a;
                }
                Ok(r)
            });
        let result = match result {
            Ok(r) => r,
            Err(e) => {
                log::warn!("planner tick {} failed: {e}", self.tick - 1);
                self.fallback(&grid, e)
            }
        };
        self.previous = Some(result.clone());
        Ok(result)
    }

    /// Builds all posteriors on `grid`. The second value overrides the
    /// autonomy allocation when the operator factor is left out of the model
    /// but still has a (data-free) posterior.
    pub fn posteriors(
        &mut self,
        grid: &TimeGrid,
    ) -> Result<(Posteriors, Option<AutonomyAllocation>), PlannerError> {
        let robot = self.robot_posterior(grid)?;
        let agents = self.agent_posteriors(grid)?;
        let operator_obs: Vec<TimedObservation> = self
            .observations
            .values()
            .filter(|o| o.source == Source::Operator)
            .cloned()
            .collect();
        let (operator, allocation) = if self.config.autonomy_only {
            (None, None)
        } else {
            let op = OperatorPosterior::Single(gp::posterior(
                &self.config.operator_kernel,
                OPERATOR_DIM,
                &operator_obs,
                grid,
            )?);
            if operator_obs.is_empty() {
                let a = autonomy_measure(&op, &robot, grid.now)?;
                (None, Some(a))
            } else {
                (Some(op), None)
            }
        };
        Ok((
            Posteriors {
                operator,
                robot,
                agents,
            },
            allocation,
        ))
    }

    fn robot_posterior(&mut self, grid: &TimeGrid) -> Result<GpPosterior, PlannerError> {
        let robot_obs: Vec<&TimedObservation> = self
            .observations
            .values()
            .filter(|o| o.source == Source::Robot)
            .collect();
        let anchor = match latest(robot_obs.iter().copied()) {
            Some(o) => o.value.clone(),
            None => self.last_anchor.clone().unwrap_or_else(|| vec![0.0; ROBOT_DIM]),
        };
        self.last_anchor = Some(anchor.clone());
        let relative: Vec<TimedObservation> = robot_obs
            .iter()
            .map(|o| {
                let mut r = (*o).clone();
                r.value[0] -= anchor[0];
                r.value[1] -= anchor[1];
                r.value[2] = wrap_angle(r.value[2] - anchor[2]);
                r
            })
            .collect();
        let posterior = match self.config.goal {
            None => gp::posterior(&self.config.robot_kernel, ROBOT_DIM, &relative, grid)?,
            Some(goal) => {
                let (dx, dy) = (goal[0] - anchor[0], goal[1] - anchor[1]);
                let dist = dx.hypot(dy);
                let reach = self.config.cruise_speed * grid.horizon as f64 * grid.dt;
                let carrot = if dist > 0.0 {
                    let s = dist.min(reach) / dist;
                    vec![dx * s, dy * s, wrap_angle(dy.atan2(dx) - anchor[2])]
                } else {
                    vec![0.0, 0.0, 0.0]
                };
                let mix = gp::mixture_posterior(
                    &self.config.robot_kernel,
                    &relative,
                    &[carrot],
                    grid,
                    self.config.goal_variance,
                )?;
                let mut p = mix.components.into_iter().next().expect("one goal").posterior;
                p.conditioning_set.push(TimedObservation::new(
                    Source::Robot,
                    GOAL_SEQUENCE,
                    grid.last_time(),
                    vec![goal[0], goal[1], anchor[2]],
                ));
                p
            }
        };
        Ok(posterior.shifted(&anchor))
    }

    fn agent_posteriors(&self, grid: &TimeGrid) -> Result<Vec<GpPosterior>, PlannerError> {
        let ids: BTreeSet<u32> = self
            .observations
            .keys()
            .filter_map(|(s, _)| match s {
                Source::Agent(i) => Some(*i),
                _ => None,
            })
            .collect();
        ids.into_iter()
            .map(|id| {
                let obs: Vec<&TimedObservation> = self
                    .observations
                    .values()
                    .filter(|o| o.source == Source::Agent(id))
                    .collect();
                let anchor = latest(obs.iter().copied()).expect("id came from an observation").value.clone();
                let relative: Vec<TimedObservation> = obs
                    .iter()
                    .map(|o| {
                        let mut r = (*o).clone();
                        r.value[0] -= anchor[0];
                        r.value[1] -= anchor[1];
                        r
                    })
                    .collect();
                Ok(gp::posterior(&self.config.agent_kernel, AGENT_DIM, &relative, grid)?.shifted(&anchor))
            })
            .collect()
    }

    fn fallback(&self, grid: &TimeGrid, error: PlannerError) -> BlendResult {
        let mut r = match &self.previous {
            Some(prev) => prev.clone(),
            None => {
                let anchor = self.last_anchor.clone().unwrap_or_else(|| vec![0.0; ROBOT_DIM]);
                let f_r = DMatrix::from_fn(grid.len(), ROBOT_DIM, |_, d| anchor[d]);
                BlendResult {
                    map_sample: JointSample {
                        h: None,
                        f_r,
                        agents: Vec::new(),
                        unnormalized_log_density: f64::NEG_INFINITY,
                    },
                    next_action: anchor,
                    velocity: [0.0, 0.0],
                    autonomy: AutonomyAllocation::from_traces(f64::INFINITY, 1.0),
                    diagnostics: Diagnostics::default(),
                }
            }
        };
        let message = error.to_string();
        r.diagnostics = match error {
            PlannerError::InferenceFailure { diagnostics } => *diagnostics,
            _ => Diagnostics::default(),
        };
        r.diagnostics.fallback = true;
        if r.diagnostics.failure.is_none() {
            r.diagnostics.failure = Some(message);
        }
        r
    }
}

#[cfg(test)]
mod tests;
