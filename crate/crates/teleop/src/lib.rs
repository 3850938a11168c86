//! Live operator sessions over a line-oriented wire protocol.
//!
//! A console connects, says `hello`, and from then on receives the
//! vehicle's (downlink-delayed) `world_state` and `blend_diag` messages
//! while its `command` messages travel the impaired uplink into the
//! planner. See `PROTOCOL.md` at the repository root.

pub mod console;
pub mod protocol;
pub mod server;
pub mod session;

pub use console::ScriptedConsole;
pub use protocol::{decode, encode, Body, ProtocolError, WireMessage, PROTOCOL_VERSION};
pub use server::{Server, ServerConfig, ServerError, ServerHandle};
pub use session::SessionState;
