//! The discrete-event engine and everything around a run: scenarios, the
//! event queue, per-label randomness, traces and metrics.

pub mod engine;
pub mod metrics;
pub mod queue;
pub mod rng;
pub mod scenario;
pub mod trace;

pub use engine::{run, run_detailed, RunResult};
pub use metrics::{metrics, Metrics};
pub use queue::EventQueue;
pub use rng::{rng_stream, RngStreams};
pub use scenario::{Scenario, ScenarioError};
pub use trace::{Trace, TraceEvent, TransferOutcome};
