//! Coordination of automated vehicles through an intersection under a fixed
//! crossing order.
//!
//! Each vehicle solves its own optimal-control problem for a candidate pair of
//! entry/exit times ([`agent`]). A central sequential-quadratic-programming loop
//! ([`sqp`]) optimizes all times jointly, talking to the agents through
//! [`protocol`] messages carried over a simulated lossy channel ([`runtime`]).
//! [`sim`] validates the outcome in closed loop and [`scenario`] reads scenario files.

// Negated comparisons reject NaN parameters along with out-of-range ones.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod agent;
pub mod convex;
pub mod dynamics;
pub mod error;
pub mod protocol;
pub mod runtime;
pub mod scenario;
pub mod sim;
pub mod sqp;

pub use agent::{Agent, AgentConfig, LocalEvaluation, Mode, TimeBounds, TimePair};
pub use convex::{ConvexProgram, SolveResult, SolveStatus, Tolerances};
pub use dynamics::{discretize_zoh, StateTrajectory, VehicleParams};
pub use error::{Error, Result};
pub use protocol::{Backend, Direct, FeasibilityMode};
pub use runtime::{ChannelConfig, Fabric, Message, MessageKind};
pub use scenario::ScenarioConfig;
pub use sim::{run_scenario, SimulationResult};
pub use sqp::{coordinate, CoordinationResult, CoordinationStatus, SqpConfig, TimesVector};
