//! Desk-scale stand-ins for a real fleet: simulated agents, an in-process
//! server and the query and control benchmarks.

pub mod bench;
pub mod client;
pub mod fleet;
pub mod profile;
pub mod testbed;

use thiserror::Error;

use crate::agent::AgentError;
use crate::control::ControlError;
pub use client::{ApiClient, ClientError};
pub use fleet::{FleetOptions, SimFleet, VirtualFleet};
pub use profile::{ProfileKind, SimProfile};
pub use testbed::{Testbed, TestbedOptions};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("agent count must be at least 1")]
    NoAgents,
    #[error("duplicate simulated host {0}")]
    DuplicateHost(String),
    #[error("no simulated agent named {0}")]
    UnknownAgent(String),
    #[error("cloudlet size {count} is not in 1..={available}")]
    BadCount { count: usize, available: usize },
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("no data yet for {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
