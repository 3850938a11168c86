//! Headless closed loop: world, both channel directions, a scripted (or
//! externally driven) operator and the planner session.
//!
//! Tick `k` at `t = k·dt`:
//! 1. the world snapshot is published on the downlink;
//! 2. the operator acts on whatever snapshots have reached it and its
//!    command, stamped `t`, enters the uplink;
//! 3. the vehicle collects delivered commands and its own measurements,
//!    replans and executes the first step; agents move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelConfig, ChannelError, Direction, Link, PacketEvent};
use crate::gp::{Source, TimedObservation};
use crate::planner::{BlendResult, PlannerError, PlannerSession, SessionConfig};
use crate::world::{
    scripted_command, step_agents, step_robot, AgentState, OperatorScript, RobotState, WorldError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("tick protocol violated: {0}")]
    TickOrder(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    /// `[x, y, θ]`.
    pub robot_start: [f64; 3],
    pub goal: Option<[f64; 2]>,
    /// The run completes once the robot is this close to the goal (m).
    pub goal_radius: f64,
    pub v_max: f64,
    pub agents: Vec<AgentSpec>,
    pub agent_noise_std: f64,
    pub robot_measurement_std: f64,
    pub agent_measurement_std: f64,
    pub operator: OperatorScript,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            robot_start: [0.0, 0.0, 0.0],
            goal: None,
            goal_radius: 0.2,
            v_max: 1.0,
            agents: Vec::new(),
            agent_noise_std: 0.0,
            robot_measurement_std: 0.0,
            agent_measurement_std: 0.0,
            operator: OperatorScript::Silent {},
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.robot_start.iter().any(|v| !v.is_finite()) {
            return bad("robot_start must be finite".into());
        }
        if self.goal.is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return bad("goal must be finite".into());
        }
        for (name, v) in [("goal_radius", self.goal_radius), ("v_max", self.v_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("agent_noise_std", self.agent_noise_std),
            ("robot_measurement_std", self.robot_measurement_std),
            ("agent_measurement_std", self.agent_measurement_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.speed >= 0.0 && a.speed.is_finite()) {
                return bad(format!("agents[{i}].speed must be >= 0, got {}", a.speed));
            }
        }
        self.operator.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Execute the joint MAP plan.
    #[default]
    Blended,
    /// Execute the latest delivered operator command verbatim.
    OperatorOnly,
    /// Plan without the operator factor.
    AutonomyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub session: SessionConfig,
    pub uplink: ChannelConfig,
    pub downlink: ChannelConfig,
    pub mode: ControlMode,
    pub max_ticks: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            session: SessionConfig::default(),
            uplink: ChannelConfig::identity(Direction::Uplink),
            downlink: ChannelConfig::identity(Direction::Downlink),
            mode: ControlMode::Blended,
            max_ticks: 2000,
        }
    }
}

/// What the vehicle publishes each tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub tick: u64,
    pub time: f64,
    pub robot: RobotState,
    pub agents: Vec<AgentState>,
    pub goal: Option<[f64; 2]>,
    pub operator_weight: f64,
    pub robot_weight: f64,
    pub planned_path: Vec<[f64; 2]>,
    /// The plan behind the weights, absent before the first plan.
    pub plan: Option<PlanDiagnostics>,
}

/// Compact view of one planner tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub tick: u64,
    pub operator_trace: f64,
    pub robot_trace: f64,
    pub log_density: f64,
    pub finite_candidates: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorCommand {
    pub sequence: u64,
    pub sent_at: f64,
    pub velocity: [f64; 2],
}

/// One per-tick metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    /// Pose after executing this tick's action.
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub operator_weight: f64,
    pub robot_weight: f64,
    /// Operator posterior std at `time` (mean over command dimensions).
    pub operator_std: Option<f64>,
    /// Command the operator issued this tick.
    pub commanded: Option<[f64; 2]>,
    /// Velocity actually executed (after the speed limit).
    pub executed: [f64; 2],
    pub tracking_error: Option<f64>,
    /// Distance to the nearest agent after the step.
    pub min_clearance: Option<f64>,
    /// Age of the newest snapshot the operator had seen.
    pub staleness_s: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: u64,
    pub completed: bool,
    pub completion_tick: Option<u64>,
    pub path_length: f64,
    pub mean_clearance: Option<f64>,
    pub min_clearance: Option<f64>,
    pub mean_operator_weight: f64,
    pub mean_tracking_error: Option<f64>,
    pub fallback_ticks: u64,
    /// More than half of the ticks fell back.
    pub failed: bool,
}

impl RunSummary {
    pub fn from_records(records: &[TickRecord], start: [f64; 2], completion_tick: Option<u64>) -> Self {
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mut path_length = 0.0;
        let mut prev = start;
        for r in records {
            path_length += (r.x - prev[0]).hypot(r.y - prev[1]);
            prev = [r.x, r.y];
        }
        let clearances: Vec<f64> = records.iter().filter_map(|r| r.min_clearance).collect();
        let fallback_ticks = records.iter().filter(|r| r.fallback).count() as u64;
        Self {
            ticks: records.len() as u64,
            completed: completion_tick.is_some(),
            completion_tick,
            path_length,
            min_clearance: clearances.iter().copied().reduce(f64::min),
            mean_clearance: mean(clearances),
            mean_operator_weight: mean(records.iter().map(|r| r.operator_weight).collect()).unwrap_or(0.0),
            mean_tracking_error: mean(records.iter().filter_map(|r| r.tracking_error).collect()),
            fallback_ticks,
            failed: 2 * fallback_ticks > records.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<TickRecord>,
    pub summary: RunSummary,
}

/// splitmix64 of `seed` salted per component.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_PLANNER: u64 = 1;
const SALT_UPLINK: u64 = 2;
const SALT_DOWNLINK: u64 = 3;
const SALT_AGENTS: u64 = 4;
const SALT_SENSORS: u64 = 5;
const SALT_SCRIPT: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Begun,
    Commanded,
}

pub struct Simulation {
    config: SimConfig,
    dt: f64,
    tick: u64,
    phase: Phase,
    robot: RobotState,
    agents: Vec<AgentState>,
    session: PlannerSession,
    uplink: Link<OperatorCommand>,
    downlink: Link<WorldSnapshot>,
    agent_rng: ChaCha8Rng,
    sensor_rng: ChaCha8Rng,
    operator_view: Option<WorldSnapshot>,
    command_sequence: u64,
    commanded: Option<[f64; 2]>,
    last_delivered: Option<OperatorCommand>,
    last_result: Option<BlendResult>,
    last_plan: Option<PlanDiagnostics>,
    records: Vec<TickRecord>,
    completion_tick: Option<u64>,
}

impl Simulation {
    /// Every random stream is derived from `seed` (mixed with the seeds in
    /// the config), so `(config, seed)` fixes the whole run.
    pub fn new(mut config: SimConfig, seed: u64) -> Result<Self, SimError> {
        config.scenario.validate()?;
        config.session.planner.seed = derive_seed(seed ^ config.session.planner.seed, SALT_PLANNER);
        config.session.autonomy_only = config.mode == ControlMode::AutonomyOnly;
        config.session.goal = config.scenario.goal;
        config.uplink.seed = derive_seed(seed ^ config.uplink.seed, SALT_UPLINK);
        config.downlink.seed = derive_seed(seed ^ config.downlink.seed, SALT_DOWNLINK);
        if let OperatorScript::NoisyJoystick { seed: s, .. } = &mut config.scenario.operator {
            *s = derive_seed(seed ^ *s, SALT_SCRIPT);
        }
        let session = PlannerSession::new(config.session.clone())?;
        let sc = &config.scenario;
        let robot = RobotState::new(sc.robot_start[0], sc.robot_start[1], sc.robot_start[2]);
        let agents = sc
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| AgentState {
                id: i as u32,
                x: a.start[0],
                y: a.start[1],
                goal: a.goal,
                speed: a.speed,
            })
            .collect();
        Ok(Self {
            dt: config.session.planner.dt,
            uplink: Link::new(config.uplink.clone())?,
            downlink: Link::new(config.downlink.clone())?,
            agent_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_AGENTS)),
            sensor_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_SENSORS)),
            config,
            tick: 0,
            phase: Phase::Idle,
            robot,
            agents,
            session,
            operator_view: None,
            command_sequence: 0,
            commanded: None,
            last_delivered: None,
            last_result: None,
            last_plan: None,
            records: Vec::new(),
            completion_tick: None,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn now(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    /// Packets due within rounding error of the tick time count as arrived.
    fn poll_time(&self) -> f64 {
        self.now() + 1e-9 * self.dt
    }

    pub fn robot(&self) -> RobotState {
        self.robot
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.records
    }

    pub fn last_result(&self) -> Option<&BlendResult> {
        self.last_result.as_ref()
    }

    /// Goal reached or tick budget spent.
    pub fn finished(&self) -> bool {
        self.completion_tick.is_some() || self.tick >= self.config.max_ticks
    }

    /// Tick at which the robot reached the goal.
    pub fn completion_tick(&self) -> Option<u64> {
        self.completion_tick
    }

    /// Newest snapshot delivered to the operator so far.
    pub fn operator_view(&self) -> Option<&WorldSnapshot> {
        self.operator_view.as_ref()
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        let (ow, rw, path) = match (&self.last_result, self.config.mode) {
            (_, ControlMode::OperatorOnly) => (1.0, 0.0, Vec::new()),
            (Some(r), _) => (r.autonomy.operator_weight, r.autonomy.robot_weight, r.planned_path()),
            (None, _) => (0.0, 1.0, Vec::new()),
        };
        WorldSnapshot {
            tick: self.tick,
            time: self.now(),
            robot: self.robot,
            agents: self.agents.clone(),
            goal: self.config.scenario.goal,
            operator_weight: ow,
            robot_weight: rw,
            planned_path: path,
            plan: self.last_plan.clone(),
        }
    }

    /// Publishes this tick's snapshot and returns the downlink packets that
    /// reach the operator now.
    pub fn begin_tick(&mut self) -> Result<Vec<PacketEvent<WorldSnapshot>>, SimError> {
        if self.phase != Phase::Idle {
            return Err(SimError::TickOrder("begin_tick called twice"));
        }
        let now = self.now();
        self.downlink.send(self.snapshot(), now);
        let delivered = self.downlink.poll(self.poll_time());
        for p in &delivered {
            if self.operator_view.as_ref().is_none_or(|v| p.payload.tick > v.tick) {
                self.operator_view = Some(p.payload.clone());
            }
        }
        self.commanded = None;
        self.phase = Phase::Begun;
        Ok(delivered)
    }

    /// The operator's command for this tick, stamped with the current time.
    pub fn submit_command(&mut self, velocity: [f64; 2]) -> Result<(), SimError> {
        self.submit_command_at(velocity, self.now())
    }

    /// Like [`Simulation::submit_command`] with the sender's own timestamp,
    /// clamped to the current time.
    pub fn submit_command_at(&mut self, velocity: [f64; 2], sent_at: f64) -> Result<(), SimError> {
        if self.phase != Phase::Begun {
            return Err(SimError::TickOrder("submit_command outside a tick or twice"));
        }
        if !velocity.iter().chain([&sent_at]).all(|v| v.is_finite()) {
            return Err(SimError::InvalidCommand(format!("{velocity:?} at {sent_at}")));
        }
        let cmd = OperatorCommand {
            sequence: self.command_sequence,
            sent_at: sent_at.min(self.now()),
            velocity,
        };
        self.command_sequence += 1;
        self.uplink.send(cmd, cmd.sent_at);
        self.commanded = Some(velocity);
        self.phase = Phase::Commanded;
        Ok(())
    }

    /// Command the configured script issues from the operator's current view.
    pub fn scripted_command(&self) -> Option<[f64; 2]> {
        let view = self.operator_view.as_ref()?;
        scripted_command(
            &self.config.scenario.operator,
            &view.robot,
            self.now(),
            self.tick,
            self.config.scenario.v_max,
        )
    }

    fn measure(&mut self) -> Vec<TimedObservation> {
        let now = self.now();
        let sc = &self.config.scenario;
        let mut noise = |std: f64| std * self.sensor_rng.sample::<f64, _>(StandardNormal);
        let mut obs = Vec::with_capacity(1 + self.agents.len());
        let pose = [
            self.robot.x + noise(sc.robot_measurement_std),
            self.robot.y + noise(sc.robot_measurement_std),
            self.robot.theta + noise(sc.robot_measurement_std),
        ];
        obs.push(TimedObservation::new(Source::Robot, self.tick, now, pose.to_vec()));
        for a in &self.agents {
            let p = vec![a.x + noise(sc.agent_measurement_std), a.y + noise(sc.agent_measurement_std)];
            obs.push(TimedObservation::new(Source::Agent(a.id), self.tick, now, p));
        }
        obs
    }

    /// Delivers commands and measurements, plans, executes and records.
    pub fn finish_tick(&mut self) -> Result<TickRecord, SimError> {
        if self.phase == Phase::Idle {
            return Err(SimError::TickOrder("finish_tick before begin_tick"));
        }
        let now = self.now();
        let mut obs: Vec<TimedObservation> = Vec::new();
        for p in self.uplink.poll(self.poll_time()) {
            let c = p.payload;
            if self.last_delivered.is_none_or(|l| c.sent_at >= l.sent_at) {
                self.last_delivered = Some(c);
            }
            obs.push(
                TimedObservation::new(Source::Operator, c.sequence, c.sent_at, c.velocity.to_vec())
                    .received_at(p.delivery_time.unwrap_or(now)),
            );
        }
        obs.extend(self.measure());

        let (command, weights, operator_std, fallback) = match self.config.mode {
            ControlMode::OperatorOnly => {
                let v = self.last_delivered.map_or([0.0, 0.0], |c| c.velocity);
                (v, (1.0, 0.0), None, false)
            }
            _ => {
                let r = self.session.step(now, &obs)?;
                let a = r.autonomy;
                let std = (self.config.mode == ControlMode::Blended)
                    .then(|| (a.operator_trace / crate::planner::OPERATOR_DIM as f64).sqrt());
                let out = (r.velocity, (a.operator_weight, a.robot_weight), std, r.diagnostics.fallback);
                self.last_plan = Some(PlanDiagnostics {
                    tick: self.tick,
                    operator_trace: a.operator_trace,
                    robot_trace: a.robot_trace,
                    log_density: r.diagnostics.breakdown.total(),
                    finite_candidates: r.diagnostics.finite_candidates,
                    fallback: r.diagnostics.fallback,
                });
                self.last_result = Some(r);
                out
            }
        };
        let v_max = self.config.scenario.v_max;
        let before = self.robot;
        self.robot = step_robot(self.robot, command, self.dt, v_max)?;
        let executed = [(self.robot.x - before.x) / self.dt, (self.robot.y - before.y) / self.dt];
        self.agents = step_agents(&self.agents, self.dt, self.config.scenario.agent_noise_std, &mut self.agent_rng);

        let min_clearance = self
            .agents
            .iter()
            .map(|a| (a.x - self.robot.x).hypot(a.y - self.robot.y))
            .reduce(f64::min);
        let record = TickRecord {
            tick: self.tick,
            time: now,
            x: self.robot.x,
            y: self.robot.y,
            theta: self.robot.theta,
            operator_weight: weights.0,
            robot_weight: weights.1,
            operator_std,
            commanded: self.commanded,
            executed,
            tracking_error: self
                .commanded
                .map(|c| (executed[0] - c[0]).hypot(executed[1] - c[1])),
            min_clearance,
            staleness_s: self.operator_view.as_ref().map(|v| now - v.time),
            fallback,
        };
        self.records.push(record.clone());
        if let Some(goal) = self.config.scenario.goal {
            if self.completion_tick.is_none() && self.robot.distance_to(goal) <= self.config.scenario.goal_radius {
                self.completion_tick = Some(self.tick);
            }
        }
        self.tick += 1;
        self.phase = Phase::Idle;
        Ok(record)
    }

    /// One full tick driven by the scripted operator.
    pub fn step(&mut self) -> Result<TickRecord, SimError> {
        self.begin_tick()?;
        if let Some(v) = self.scripted_command() {
            self.submit_command(v)?;
        }
        self.finish_tick()
    }

    /// Runs to completion or the tick budget.
    pub fn run(mut self) -> Result<RunMetrics, SimError> {
        while !self.finished() {
            self.step()?;
        }
        Ok(self.into_metrics())
    }

    pub fn into_metrics(self) -> RunMetrics {
        let start = [self.config.scenario.robot_start[0], self.config.scenario.robot_start[1]];
        let summary = RunSummary::from_records(&self.records, start, self.completion_tick);
        RunMetrics {
            rows: self.records,
            summary,
        }
    }
}

/// Convenience wrapper for a whole headless run.
pub fn run(config: &SimConfig, seed: u64) -> Result<RunMetrics, SimError> {
    Simulation::new(config.clone(), seed)?.run()
}
