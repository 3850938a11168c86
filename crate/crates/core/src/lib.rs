//! Shared-autonomy navigation by MAP inference over interacting
//! Gaussian-process trajectories.
//!
//! The operator's velocity commands and the robot's own measurements each
//! condition a GP over future trajectories. An interaction potential couples
//! the two (and any nearby crowd agents), and the receding-horizon planner
//! executes the first step of the joint MAP trajectory. How much the
//! operator is trusted falls out of the relative posterior uncertainty.

pub mod gp;
mod linalg;
pub mod interaction;
pub mod planner;
pub mod channel;
pub mod world;
pub mod sim;
