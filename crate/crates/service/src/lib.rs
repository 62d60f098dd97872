//! Orchestration for the wordsmith pipeline: interactive sessions that turn
//! commands into trained policies, a content-addressed checkpoint registry,
//! an HTTP API with an event stream, and the blocking CLI pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod events;
pub mod http;
pub mod journal;
pub mod pipeline;
pub mod registry;
pub mod service;

pub use config::Config;
pub use pipeline::{run_pipeline_sync, RunError, RunManifest, Stage, StageFailure};
pub use service::{Service, ServiceError};
