//! Ensemble workflow execution built on the pipeline-stage-task model.
//!
//! A [`WorkflowSpec`](pst::WorkflowSpec) is an ordered list of stages, each a
//! set of independent tasks. The [`engine`] runs one allocation ("batch job")
//! either through a discrete-event cluster simulator or as real local
//! subprocesses, and records everything it does in an append-only
//! [`EventLog`](engine::EventLog). The [`resilience`] and [`metrics`] modules
//! are pure functions over that log.

pub mod cli;
pub mod engine;
pub mod generate;
pub mod metrics;
pub mod platform;
pub mod pst;
pub mod resilience;
pub mod scheduler;

pub use engine::{Event, EventKind, EventLog};
pub use platform::{NodeSpec, PlatformConfig, WalltimePolicy};
pub use pst::{Pipeline, StageSpec, TaskDescription, TaskState, WorkflowSpec};
