//! Discrete-time ground truth: a holonomic robot, goal-seeking agents and
//! scripted stand-ins for the human operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::session::wrap_angle;

/// Below this speed the heading is left unchanged.
pub const HEADING_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("non-finite command ({0}, {1})")]
    NonFiniteCommand(f64, f64),
    #[error("invalid world parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    /// Heading in (−π, π].
    pub theta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn pose(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub goal: [f64; 2],
    /// m/s, ≥ 0.
    pub speed: f64,
}

impl AgentState {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance_to_goal(&self) -> f64 {
        (self.goal[0] - self.x).hypot(self.goal[1] - self.y)
    }
}

/// Scales `v` down to at most `v_max` in norm.
pub fn clamp_speed(v: [f64; 2], v_max: f64) -> [f64; 2] {
    let s = v[0].hypot(v[1]);
    if s > v_max && s > 0.0 {
        [v[0] * v_max / s, v[1] * v_max / s]
    } else {
        v
    }
}

/// One Euler step with the command clamped to `v_max`.
pub fn step_robot(
    state: RobotState,
    command: [f64; 2],
    dt: f64,
    v_max: f64,
) -> Result<RobotState, WorldError> {
    if !command.iter().all(|c| c.is_finite()) {
        return Err(WorldError::NonFiniteCommand(command[0], command[1]));
    }
    if !(dt > 0.0) || !(v_max >= 0.0) {
        return Err(WorldError::InvalidParams(format!("dt {dt}, v_max {v_max}")));
    }
    let [vx, vy] = clamp_speed(command, v_max);
    let theta = if vx.hypot(vy) > HEADING_EPS {
        vy.atan2(vx)
    } else {
        state.theta
    };
    Ok(RobotState::new(state.x + vx * dt, state.y + vy * dt, theta))
}

/// Moves every agent toward its goal at its speed (never overshooting),
/// then adds isotropic Gaussian position noise of std `noise_std`.
pub fn step_agents<R: Rng + ?Sized>(
    agents: &[AgentState],
    dt: f64,
    noise_std: f64,
    rng: &mut R,
) -> Vec<AgentState> {
    agents
        .iter()
        .map(|a| {
            let mut next = *a;
            let dist = a.distance_to_goal();
            if dist > 0.0 {
                let step = (a.speed * dt).min(dist);
                next.x += (a.goal[0] - a.x) / dist * step;
                next.y += (a.goal[1] - a.y) / dist * step;
            }
            if noise_std > 0.0 {
                next.x += noise_std * rng.sample::<f64, _>(StandardNormal);
                next.y += noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            next
        })
        .collect()
}

fn default_arrival_radius() -> f64 {
    0.1
}

/// Scripted operator models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorScript {
    /// Steers at full speed along a polyline.
    WaypointFollower {
        waypoints: Vec<[f64; 2]>,
        #[serde(default = "default_arrival_radius")]
        arrival_radius: f64,
        /// `[start, end)` times (s) during which the operator is silent.
        #[serde(default)]
        dropouts: Vec<[f64; 2]>,
    },
    /// The follower plus Gaussian noise on each command component.
    NoisyJoystick {
        waypoints: Vec<[f64; 2]>,
        noise_std: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_arrival_radius")]
        arrival_radius: f64,
        #[serde(default)]
        dropouts: Vec<[f64; 2]>,
    },
    /// Never sends anything.
    Silent {},
}

impl OperatorScript {
    pub fn validate(&self) -> Result<(), WorldError> {
        let (waypoints, radius, dropouts) = match self {
            Self::Silent {} => return Ok(()),
            Self::WaypointFollower {
                waypoints,
                arrival_radius,
                dropouts,
            } => (waypoints, *arrival_radius, dropouts),
            Self::NoisyJoystick {
                waypoints,
                noise_std,
                arrival_radius,
                dropouts,
                ..
            } => {
                if !(*noise_std >= 0.0 && noise_std.is_finite()) {
                    return Err(WorldError::InvalidParams(format!("noise_std must be >= 0, got {noise_std}")));
                }
                (waypoints, *arrival_radius, dropouts)
            }
        };
        if waypoints.is_empty() {
            return Err(WorldError::InvalidParams("waypoints must not be empty".into()));
        }
        if waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(WorldError::InvalidParams("waypoints must be finite".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(WorldError::InvalidParams(format!("arrival_radius must be > 0, got {radius}")));
        }
        if dropouts.iter().any(|w| !(w[0] <= w[1])) {
            return Err(WorldError::InvalidParams("dropout windows need start <= end".into()));
        }
        Ok(())
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - s * dx).hypot(p[1] - a[1] - s * dy)
}

/// The waypoint to head for from `p`: the end of the closest polyline
/// segment (later segments win ties), skipping waypoints already within
/// `radius`. `None` once the final waypoint is reached.
fn target_waypoint(waypoints: &[[f64; 2]], p: [f64; 2], radius: f64) -> Option<[f64; 2]> {
    let mut idx = 0;
    let mut best = (p[0] - waypoints[0][0]).hypot(p[1] - waypoints[0][1]);
    for i in 1..waypoints.len() {
        let d = segment_distance(p, waypoints[i - 1], waypoints[i]);
        if d <= best {
            best = d;
            idx = i;
        }
    }
    while idx < waypoints.len() {
        let w = waypoints[idx];
        if (p[0] - w[0]).hypot(p[1] - w[1]) >= radius {
            return Some(w);
        }
        idx += 1;
    }
    None
}

fn follow(waypoints: &[[f64; 2]], radius: f64, robot: &RobotState, v_max: f64) -> [f64; 2] {
    let p = [robot.x, robot.y];
    match target_waypoint(waypoints, p, radius) {
        None => [0.0, 0.0],
        Some(w) => {
            let (dx, dy) = (w[0] - p[0], w[1] - p[1]);
            let d = dx.hypot(dy);
            [v_max * dx / d, v_max * dy / d]
        }
    }
}

fn in_dropout(dropouts: &[[f64; 2]], now: f64) -> bool {
    dropouts.iter().any(|w| now >= w[0] && now < w[1])
}

/// Seed for per-tick script noise.
fn noise_seed(seed: u64, tick: u64) -> u64 {
    let mut z = seed ^ tick.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Command the script issues at `now`/`tick` given the robot pose it was
/// shown. A pure function of its arguments.
pub fn scripted_command(
    script: &OperatorScript,
    believed: &RobotState,
    now: f64,
    tick: u64,
    v_max: f64,
) -> Option<[f64; 2]> {
    match script {
        OperatorScript::Silent {} => None,
        OperatorScript::WaypointFollower {
            waypoints,
            arrival_radius,
            dropouts,
        } => (!in_dropout(dropouts, now)).then(|| follow(waypoints, *arrival_radius, believed, v_max)),
        OperatorScript::NoisyJoystick {
            waypoints,
            noise_std,
            seed,
            arrival_radius,
            dropouts,
        } => {
            if in_dropout(dropouts, now) {
                return None;
            }
            let v = follow(waypoints, *arrival_radius, believed, v_max);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(*seed, tick));
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            Some([v[0] + noise_std * nx, v[1] + noise_std * ny])
        }
    }
}
