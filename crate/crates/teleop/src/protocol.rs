//! Newline-delimited canonical JSON wire format.
//!
//! Every message is one line `{"type":…,"seq":…,"sent_at":…,"body":{…}}`
//! with keys in a fixed order and every float printed with exactly six
//! decimals, so equal messages always encode to equal bytes.

use std::io;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;
use thiserror::Error;

pub const PROTOCOL_VERSION: &str = "blendnav/1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error at byte {offset}: {message}")]
pub struct ProtocolError {
    pub offset: usize,
    pub message: String,
}

impl ProtocolError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    /// Strictly increasing per sender.
    pub seq: u64,
    /// Simulated clock (s) at which the sender emitted the message.
    pub sent_at: f64,
    pub body: Body,
}

impl WireMessage {
    pub fn new(seq: u64, sent_at: f64, body: Body) -> Self {
        Self { seq, sent_at, body }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Hello(Hello),
    Config(SessionInfo),
    Command(Command),
    WorldState(WorldState),
    BlendDiag(BlendDiag),
    Error(ErrorBody),
    Bye(Bye),
}

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Self::Hello(_) => "hello",
            Self::Config(_) => "config",
            Self::Command(_) => "command",
            Self::WorldState(_) => "world_state",
            Self::BlendDiag(_) => "blend_diag",
            Self::Error(_) => "error",
            Self::Bye(_) => "bye",
        }
    }
}

/// First message on a connection; `session` resumes an existing session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub version: String,
    pub session: Option<String>,
}

/// Server's reply to a successful hello.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionInfo {
    pub session: String,
    pub dt: f64,
    pub v_max: f64,
    pub tick: u64,
    pub goal: Option<[f64; 2]>,
}

/// Operator velocity command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPose {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

/// The vehicle's state as the operator sees it, `staleness_s` old.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldState {
    pub tick: u64,
    pub time: f64,
    pub robot: Pose,
    pub agents: Vec<AgentPose>,
    pub goal: Option<[f64; 2]>,
    pub operator_weight: f64,
    pub robot_weight: f64,
    pub planned_path: Vec<[f64; 2]>,
    pub staleness_s: f64,
}

/// Planner diagnostics behind a world state's autonomy weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendDiag {
    pub tick: u64,
    pub operator_weight: f64,
    pub robot_weight: f64,
    pub operator_std: Option<f64>,
    pub robot_std: Option<f64>,
    pub log_density: Option<f64>,
    pub finite_candidates: u64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bye {
    pub reason: String,
}

/// Compact JSON with every float at six decimals and no negative zero.
struct Canonical;

impl Formatter for Canonical {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_float(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

fn format_float(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn write_canonical<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    let mut ser = serde_json::Serializer::with_formatter(out, Canonical);
    value.serialize(&mut ser).expect("plain data always serializes");
}

fn floats(body: &Body) -> Vec<f64> {
    match body {
        Body::Hello(_) | Body::Error(_) | Body::Bye(_) => vec![],
        Body::Config(c) => [c.dt, c.v_max].into_iter().chain(c.goal.into_iter().flatten()).collect(),
        Body::Command(c) => vec![c.vx, c.vy],
        Body::WorldState(w) => [w.time, w.robot.x, w.robot.y, w.robot.theta]
            .into_iter()
            .chain(w.agents.iter().flat_map(|a| [a.x, a.y]))
            .chain(w.goal.into_iter().flatten())
            .chain([w.operator_weight, w.robot_weight, w.staleness_s])
            .chain(w.planned_path.iter().flatten().copied())
            .collect(),
        Body::BlendDiag(d) => [d.operator_weight, d.robot_weight]
            .into_iter()
            .chain(d.operator_std)
            .chain(d.robot_std)
            .chain(d.log_density)
            .collect(),
    }
}

/// One canonical line, newline included. Non-finite floats are rejected
/// because they have no six-decimal form.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    if !msg.sent_at.is_finite() || floats(&msg.body).iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::new(0, format!("non-finite number in {} message", msg.body.type_name())));
    }
    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(b"{\"type\":\"");
    out.extend_from_slice(msg.body.type_name().as_bytes());
    out.extend_from_slice(format!("\",\"seq\":{},\"sent_at\":{},\"body\":", msg.seq, format_float(msg.sent_at)).as_bytes());
    match &msg.body {
        Body::Hello(b) => write_canonical(&mut out, b),
        Body::Config(b) => write_canonical(&mut out, b),
        Body::Command(b) => write_canonical(&mut out, b),
        Body::WorldState(b) => write_canonical(&mut out, b),
        Body::BlendDiag(b) => write_canonical(&mut out, b),
        Body::Error(b) => write_canonical(&mut out, b),
        Body::Bye(b) => write_canonical(&mut out, b),
    }
    out.extend_from_slice(b"}\n");
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    #[serde(rename = "type")]
    kind: String,
    seq: u64,
    sent_at: f64,
    body: serde_json::Value,
}

/// Byte offset of a serde_json error inside a single line.
fn json_offset(e: &serde_json::Error, line: &[u8]) -> usize {
    if e.line() <= 1 {
        e.column().saturating_sub(1).min(line.len())
    } else {
        line.len()
    }
}

fn body_as<T: DeserializeOwned>(value: serde_json::Value, at: usize, kind: &str) -> Result<T, ProtocolError> {
    serde_json::from_value(value).map_err(|e| ProtocolError::new(at, format!("invalid {kind} body: {e}")))
}

/// Parses exactly one newline-terminated line.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
    let Some(end) = bytes.iter().position(|&b| b == b'\n') else {
        return Err(ProtocolError::new(bytes.len(), "truncated line: missing newline"));
    };
    if end + 1 != bytes.len() {
        return Err(ProtocolError::new(end + 1, "trailing data after newline"));
    }
    let line = &bytes[..end];
    let env: Envelope = serde_json::from_slice(line).map_err(|e| ProtocolError::new(json_offset(&e, line), e.to_string()))?;
    if !env.sent_at.is_finite() {
        return Err(ProtocolError::new(0, "sent_at is not finite"));
    }
    let at = find(line, b"\"body\":").map_or(0, |i| i + 7);
    let kind = env.kind.as_str();
    let body = match kind {
        "hello" => Body::Hello(body_as(env.body, at, kind)?),
        "config" => Body::Config(body_as(env.body, at, kind)?),
        "command" => Body::Command(body_as(env.body, at, kind)?),
        "world_state" => Body::WorldState(body_as(env.body, at, kind)?),
        "blend_diag" => Body::BlendDiag(body_as(env.body, at, kind)?),
        "error" => Body::Error(body_as(env.body, at, kind)?),
        "bye" => Body::Bye(body_as(env.body, at, kind)?),
        other => {
            let at = find(line, b"\"type\":").map_or(0, |i| i + 7);
            return Err(ProtocolError::new(at, format!("unknown message type {other:?}")));
        }
    };
    Ok(WireMessage::new(env.seq, env.sent_at, body))
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests;
