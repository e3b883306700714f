//! Distributed secondary frequency control of lossless power networks with
//! delayed communication.
//!
//! The crate couples a swing-equation plant with several primal-dual
//! controllers, simulates the resulting delay differential-algebraic system on a
//! fixed grid, and provides an optimization oracle plus storage-function
//! diagnostics to check what the simulations converge to.

pub mod channel;
pub mod controller;
pub mod cost;
pub mod dde;
pub mod fivebus;
pub mod lyapunov;
pub mod network;
pub mod opt;
pub mod plant;

pub use controller::{ControllerConfig, ControllerKind};
pub use dde::{run, RunSpec, SimConfig, SimError, Trajectory};
pub use network::{NetworkModel, Topology};
