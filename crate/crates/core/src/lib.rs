//! Discrete-event simulator for co-located MoE prefill/decode serving.
//!
//! A run generates (or loads) a request trace, replays it through one of the
//! prefill schedulers and prices every iteration with a roofline cost model
//! whose MoE term depends on how many distinct experts the batch touches.

pub mod config;
pub mod cost;
pub mod coverage;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod scheduler;
pub mod state;
pub mod types;
pub mod workload;

pub use config::RunConfig;
pub use engine::{run, Engine, IterationRecord, RunOptions, RunOutput};
pub use error::{Error, Result};
pub use experiment::{simulate, RunResult};
pub use metrics::RunSummary;
pub use types::{
    HardwareSpec, ModelSpec, Phase, Policy, Request, RequestId, SchedulerConfig, SloSpec,
};
