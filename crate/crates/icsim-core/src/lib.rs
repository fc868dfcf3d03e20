//! Deterministic discrete-event simulator of an edge-cloud compute continuum
//! coupled to an intent-driven management loop.
//!
//! The crate models a small Kubernetes-style cluster (nodes, a switch fabric,
//! a chain of service pods) under a closed-loop user workload. Response times
//! feed an exponential moving average; when the average leaves the intent band
//! a decision maker (LLM-backed, fixture replay, rule-based heuristic, or an
//! HPA-style autoscaler) proposes corrective actions that an actuator applies
//! to the running deployment: pod placement, horizontal/vertical scaling, and
//! flow rescheduling.
//!
//! Everything is single-threaded and seeded; two runs with the same scenario,
//! seed, and decider produce byte-identical traces.

pub mod actuator;
pub mod decision;
pub mod engine;
pub mod harness;
pub mod jsonfmt;
pub mod mano;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod snapshot;
pub mod synth;
pub mod telemetry;
