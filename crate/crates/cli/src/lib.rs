//! Scenario files and the commands of the `freqsync` binary.

pub mod commands;
pub mod scenario;

pub use commands::{evaluate, execute, Verdict};
pub use scenario::{parse_scenario, parse_scenario_str, serialize_scenario, ConfigError, Scenario};
