//! Event-driven orchestration of what-if test scenarios.
//!
//! A scenario is a DAG of actions (services, clusters, calls, chaos faults
//! and checkpoints). The [`engine`] walks it one reconciliation cycle at a
//! time, driving an [`executors::Executor`] and recording everything in a
//! [`engine::RunTrace`].

pub mod dsl;
pub mod engine;
pub mod executors;
pub mod expressions;
pub mod lifecycle;
pub mod telemetry;
pub mod time;
