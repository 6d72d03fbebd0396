//! Distributed real-time nonlinear receding horizon control for multi-agent
//! consensus and leader-following problems.
//!
//! Each agent minimizes a local quadratic disagreement cost over a growing
//! horizon. Instead of iterating an optimizer, the optimality residual is
//! tracked in real time by a stabilized continuation method realized with a
//! backward Riccati sweep, so every control update costs one forward and one
//! backward pass over the horizon.

pub mod costs;
pub mod dynamics;
pub mod metrics;
pub mod ode;
pub mod output;
pub mod scenario;
pub mod simulator;
pub mod sweep;
pub mod topology;
pub mod tpbvp;
