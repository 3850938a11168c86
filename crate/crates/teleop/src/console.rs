//! Headless stand-in for the browser console.

use blendnav_core::world::{scripted_command, OperatorScript, RobotState};

use crate::protocol::{Body, Command, Hello, WireMessage, PROTOCOL_VERSION};

/// Answers each `world_state` with the command its script issues from the
/// (stale) pose it was shown, stamped with the echoed clock.
#[derive(Debug, Clone)]
pub struct ScriptedConsole {
    script: OperatorScript,
    v_max: f64,
    seq: u64,
}

impl ScriptedConsole {
    pub fn new(script: OperatorScript, v_max: f64) -> Self {
        Self { script, v_max, seq: 0 }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn hello(&mut self, session: Option<String>) -> WireMessage {
        let seq = self.next_seq();
        WireMessage::new(
            seq,
            0.0,
            Body::Hello(Hello {
                version: PROTOCOL_VERSION.into(),
                session,
            }),
        )
    }

    /// Skips `n` sequence numbers, as if those commands were lost.
    pub fn skip(&mut self, n: u64) {
        self.seq += n;
    }

    pub fn respond(&mut self, msg: &WireMessage) -> Option<WireMessage> {
        let Body::WorldState(ws) = &msg.body else {
            return None;
        };
        let believed = RobotState::new(ws.robot.x, ws.robot.y, ws.robot.theta);
        let [vx, vy] = scripted_command(&self.script, &believed, msg.sent_at, ws.tick, self.v_max)?;
        let seq = self.next_seq();
        Some(WireMessage::new(seq, msg.sent_at, Body::Command(Command { vx, vy })))
    }
}
