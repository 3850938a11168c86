//! One console's session: a simulation driven by wire messages.

use blendnav_core::planner::{OPERATOR_DIM, ROBOT_DIM};
use blendnav_core::sim::{RunMetrics, SimConfig, SimError, Simulation, TickRecord, WorldSnapshot};
use log::{debug, warn};

use crate::protocol::{
    AgentPose, BlendDiag, Body, Bye, ErrorBody, Pose, SessionInfo, WireMessage, WorldState,
    PROTOCOL_VERSION,
};

/// At most this many planned-path points go on the wire.
pub const MAX_PATH_POINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    sent_at: f64,
    seq: u64,
    velocity: [f64; 2],
}

pub struct SessionState {
    id: String,
    sim: Simulation,
    connected: bool,
    out_seq: u64,
    last_in_seq: Option<u64>,
    pending: Option<Pending>,
    in_tick: bool,
}

impl SessionState {
    pub fn new(id: impl Into<String>, config: SimConfig, seed: u64) -> Result<Self, SimError> {
        Ok(Self {
            id: id.into(),
            sim: Simulation::new(config, seed)?,
            connected: false,
            out_seq: 0,
            last_in_seq: None,
            pending: None,
            in_tick: false,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn connected(&self) -> bool {
        self.connected
    }

    pub fn finished(&self) -> bool {
        self.sim.finished()
    }

    pub fn into_metrics(self) -> RunMetrics {
        self.sim.into_metrics()
    }

    fn message(&mut self, body: Body) -> WireMessage {
        self.out_seq += 1;
        WireMessage::new(self.out_seq, self.sim.now(), body)
    }

    /// Attaches a console and returns the `config` greeting. A new console
    /// starts a fresh sequence; anything it missed counts as lost.
    pub fn connect(&mut self) -> WireMessage {
        self.connected = true;
        self.last_in_seq = None;
        let c = self.sim.config();
        let info = SessionInfo {
            session: self.id.clone(),
            dt: c.session.planner.dt,
            v_max: c.scenario.v_max,
            tick: self.sim.tick(),
            goal: c.scenario.goal,
        };
        self.message(Body::Config(info))
    }

    pub fn disconnect(&mut self) {
        self.connected = false;
    }

    /// Publishes this tick's state and returns whatever the downlink
    /// delivers now, as `world_state` / `blend_diag` pairs.
    pub fn begin_tick(&mut self) -> Result<Vec<WireMessage>, SimError> {
        let delivered = self.sim.begin_tick()?;
        self.in_tick = true;
        let now = self.sim.now();
        let mut out = Vec::with_capacity(2 * delivered.len());
        for p in delivered {
            let snap = p.payload;
            let diag = blend_diag(&snap);
            out.push(self.message(Body::WorldState(world_state(&snap, now))));
            if let Some(d) = diag {
                out.push(self.message(Body::BlendDiag(d)));
            }
        }
        Ok(out)
    }

    /// Handles one inbound message; returns a reply for the console, if any.
    /// Commands are thinned to the newest per tick (by sender timestamp).
    pub fn receive(&mut self, msg: &WireMessage) -> Option<WireMessage> {
        match &msg.body {
            Body::Command(c) => {
                if self.last_in_seq.is_some_and(|last| msg.seq <= last) {
                    warn!("session {}: command seq {} out of order, dropped", self.id, msg.seq);
                    return None;
                }
                self.last_in_seq = Some(msg.seq);
                let cmd = Pending {
                    sent_at: msg.sent_at,
                    seq: msg.seq,
                    velocity: [c.vx, c.vy],
                };
                if self
                    .pending
                    .is_none_or(|p| (cmd.sent_at, cmd.seq) > (p.sent_at, p.seq))
                {
                    self.pending = Some(cmd);
                }
                None
            }
            Body::Bye(_) => {
                self.disconnect();
                None
            }
            Body::Hello(_) => Some(self.error("unexpected_hello", "session already established")),
            other => {
                debug!("session {}: ignoring {} from console", self.id, other.type_name());
                None
            }
        }
    }

    /// Submits the newest pending command and advances the world one tick.
    pub fn finish_tick(&mut self) -> Result<TickRecord, SimError> {
        if !self.in_tick {
            self.begin_tick()?;
        }
        if let Some(p) = self.pending.take() {
            if let Err(e) = self.sim.submit_command_at(p.velocity, p.sent_at) {
                warn!("session {}: command rejected: {e}", self.id);
            }
        }
        self.in_tick = false;
        self.sim.finish_tick()
    }

    pub fn error(&mut self, code: &str, message: &str) -> WireMessage {
        self.message(Body::Error(ErrorBody {
            code: code.into(),
            message: message.into(),
        }))
    }

    /// Final message once the run is over.
    pub fn farewell(&mut self) -> WireMessage {
        let reason = if self.sim.completion_tick().is_some() {
            "goal_reached"
        } else {
            "timeout"
        };
        self.message(Body::Bye(Bye { reason: reason.into() }))
    }
}

/// Refusal for a hello with the wrong protocol version, if it is wrong.
pub fn check_version(version: &str) -> Result<(), ErrorBody> {
    if version == PROTOCOL_VERSION {
        Ok(())
    } else {
        Err(ErrorBody {
            code: "version_mismatch".into(),
            message: format!("server speaks {PROTOCOL_VERSION}, console sent {version:?}"),
        })
    }
}

/// Every `k`-th point plus the last, at most [`MAX_PATH_POINTS`].
pub fn downsample(path: &[[f64; 2]]) -> Vec<[f64; 2]> {
    if path.len() <= MAX_PATH_POINTS {
        return path.to_vec();
    }
    let stride = path.len().div_ceil(MAX_PATH_POINTS - 1);
    let mut out: Vec<[f64; 2]> = path.iter().step_by(stride).copied().collect();
    if (path.len() - 1) % stride != 0 {
        out.push(path[path.len() - 1]);
    }
    out
}

fn world_state(snap: &WorldSnapshot, now: f64) -> WorldState {
    WorldState {
        tick: snap.tick,
        time: snap.time,
        robot: Pose {
            x: snap.robot.x,
            y: snap.robot.y,
            theta: snap.robot.theta,
        },
        agents: snap
            .agents
            .iter()
            .map(|a| AgentPose { id: a.id, x: a.x, y: a.y })
            .collect(),
        goal: snap.goal,
        operator_weight: snap.operator_weight,
        robot_weight: snap.robot_weight,
        planned_path: downsample(&snap.planned_path),
        staleness_s: now - snap.time,
    }
}

fn blend_diag(snap: &WorldSnapshot) -> Option<BlendDiag> {
    let plan = snap.plan.as_ref()?;
    let finite = |v: f64| v.is_finite().then_some(v);
    Some(BlendDiag {
        tick: plan.tick,
        operator_weight: snap.operator_weight,
        robot_weight: snap.robot_weight,
        operator_std: finite((plan.operator_trace / OPERATOR_DIM as f64).sqrt()),
        robot_std: finite((plan.robot_trace / ROBOT_DIM as f64).sqrt()),
        log_density: finite(plan.log_density),
        finite_candidates: plan.finite_candidates as u64,
        fallback: plan.fallback,
    })
}
