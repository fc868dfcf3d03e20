//! Scenario configuration: a single YAML document describing the topology,
//! the service chain, the intent, the workload and any injected events.
//! Everything a run needs besides the decider choice and the seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::ActionBounds;
use crate::model::{
    validate_pods, validate_state, validate_topology, ContinuumTopology, DeploymentState,
    ModelError, PodSpec,
};
use crate::telemetry::TelemetryConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// The response-time objective and the control loop's timing constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    pub upper_s: f64,
    pub lower_s: f64,
    #[serde(default = "default_waiting")]
    pub waiting_s: f64,
    /// Simulated seconds charged per decider consultation (live or replayed
    /// model calls). The built-in heuristic always answers instantly.
    #[serde(default = "default_decision_latency")]
    pub decision_latency_s: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_min_requests")]
    pub min_requests: u64,
}

fn default_waiting() -> f64 {
    60.0
}
fn default_decision_latency() -> f64 {
    13.4
}
fn default_alpha() -> f64 {
    0.02
}
fn default_min_requests() -> u64 {
    5
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub users: u32,
    pub duration_s: f64,
}

/// Closed-loop workload: each active user issues a request, waits for the
/// response, thinks, repeats. Phase boundaries activate fresh users (ramped
/// at `spawn_rate_per_s`) or retire the newest ones; retired users never
/// come back.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSchedule {
    pub phases: Vec<Phase>,
    #[serde(default = "default_spawn_rate")]
    pub spawn_rate_per_s: f64,
    #[serde(default = "default_think")]
    pub think_time_s: f64,
    #[serde(default = "default_jitter")]
    pub think_jitter_s: f64,
    pub payload_kb: f64,
}

fn default_spawn_rate() -> f64 {
    1.0
}
fn default_think() -> f64 {
    1.0
}
fn default_jitter() -> f64 {
    0.2
}

impl LoadSchedule {
    pub fn duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundFlowSpec {
    pub a: String,
    pub b: String,
    pub rate_mbps: f64,
}

/// One congestion injection: all listed flows start and stop together.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundEvent {
    pub at_s: f64,
    pub until_s: f64,
    pub flows: Vec<BackgroundFlowSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEvent {
    pub at_s: f64,
    pub a: String,
    pub b: String,
    pub up: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueingMode {
    Fifo,
    ProcessorSharing,
}

fn default_queueing() -> QueueingMode {
    QueueingMode::Fifo
}

fn default_telemetry() -> TelemetryConfig {
    TelemetryConfig { window_len_s: 10.0, windows_before_breach: 3, cpu_duty: 0.65 }
}

fn default_bounds() -> ActionBounds {
    ActionBounds { max_replicas: 5, cpu_floor: 0.2 }
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub topology: ContinuumTopology,
    pub pods: Vec<PodSpec>,
    /// Pod id -> initial replica nodes.
    pub placement: BTreeMap<String, Vec<String>>,
    pub intent: IntentSpec,
    pub load: LoadSchedule,
    #[serde(default = "default_telemetry")]
    pub telemetry: TelemetryConfig,
    #[serde(default)]
    pub background_events: Vec<BackgroundEvent>,
    #[serde(default)]
    pub link_events: Vec<LinkEvent>,
    #[serde(default = "default_bounds")]
    pub bounds: ActionBounds,
    #[serde(default = "default_queueing")]
    pub queueing: QueueingMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_yaml::Error),
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    SchemaVersion(u32),
    #[error("invalid model: {0}")]
    Model(#[from] ModelError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl Scenario {
    pub fn from_yaml(text: &str) -> Result<Scenario, ScenarioError> {
        let sc: Scenario = serde_yaml::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_file(path: &Path) -> Result<Scenario, ScenarioError> {
        Scenario::from_yaml(&std::fs::read_to_string(path)?)
    }

    pub fn initial_state(&self) -> DeploymentState {
        DeploymentState::initial(&self.pods, self.placement.clone())
    }

    /// Runs the same checks `from_yaml` applies, for scenarios built in code.
    pub fn into_validated(self) -> Result<Scenario, ScenarioError> {
        self.validate()?;
        Ok(self)
    }

    pub fn duration(&self) -> f64 {
        self.load.duration()
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(self.schema_version));
        }
        validate_topology(&self.topology)?;
        validate_pods(&self.pods, &self.topology)?;
        validate_state(&self.initial_state(), &self.pods, &self.topology)?;

        let it = &self.intent;
        if !(0.0 <= it.lower_s && it.lower_s < it.upper_s) {
            return Err(ScenarioError::Invalid("thresholds must satisfy 0 <= lower < upper".into()));
        }
        if it.waiting_s < 0.0 || it.decision_latency_s < 0.0 {
            return Err(ScenarioError::Invalid("waiting and latency must be non-negative".into()));
        }
        if !(it.alpha > 0.0 && it.alpha <= 1.0) {
            return Err(ScenarioError::Invalid("alpha must be in (0, 1]".into()));
        }

        let ld = &self.load;
        if ld.phases.is_empty() {
            return Err(ScenarioError::Invalid("load needs at least one phase".into()));
        }
        if ld.phases.iter().any(|p| p.duration_s <= 0.0) {
            return Err(ScenarioError::Invalid("phase durations must be positive".into()));
        }
        if ld.payload_kb <= 0.0 {
            return Err(ScenarioError::Invalid("payload must be positive".into()));
        }
        if ld.spawn_rate_per_s <= 0.0 || ld.think_time_s < 0.0 || ld.think_jitter_s < 0.0 {
            return Err(ScenarioError::Invalid("bad load timing constants".into()));
        }
        if ld.think_jitter_s > ld.think_time_s {
            return Err(ScenarioError::Invalid("think jitter exceeds think time".into()));
        }

        let horizon = self.duration();
        for ev in &self.background_events {
            if !(ev.at_s < ev.until_s) {
                return Err(ScenarioError::Invalid("background event must have at < until".into()));
            }
            if ev.at_s < 0.0 || ev.until_s > horizon {
                return Err(ScenarioError::Invalid("background event outside horizon".into()));
            }
            for f in &ev.flows {
                if f.rate_mbps < 0.0 {
                    return Err(ScenarioError::Invalid("background rate must be >= 0".into()));
                }
                self.require_link(&f.a, &f.b)?;
            }
        }
        for ev in &self.link_events {
            if ev.at_s < 0.0 || ev.at_s > horizon {
                return Err(ScenarioError::Invalid("link event outside horizon".into()));
            }
            self.require_link(&ev.a, &ev.b)?;
        }

        if self.bounds.max_replicas < 1 {
            return Err(ScenarioError::Invalid("max_replicas must be >= 1".into()));
        }
        if self.bounds.cpu_floor <= 0.0 {
            return Err(ScenarioError::Invalid("cpu_floor must be positive".into()));
        }
        if self.telemetry.window_len_s <= 0.0
            || !(0.0 < self.telemetry.cpu_duty && self.telemetry.cpu_duty <= 1.0)
        {
            return Err(ScenarioError::Invalid("bad telemetry config".into()));
        }
        Ok(())
    }

    fn require_link(&self, a: &str, b: &str) -> Result<(), ScenarioError> {
        let key = crate::model::LinkKey::new(a, b);
        if self.topology.link(&key).is_none() {
            return Err(ScenarioError::Invalid(format!("no link {}", key.label())));
        }
        Ok(())
    }
}

/// Smallest valid scenario, shared by unit tests across the crate.
#[cfg(test)]
pub(crate) const MINIMAL: &str = r#"
schema_version: 1
name: minimal
topology:
  switches: [S1, S2]
  links:
    - {a: S1, b: S2, capacity_mbps: 100.0, latency_s: 0.001, up: true}
  nodes:
    - {id: M, cpu_capacity: 4.0, mem_capacity: 4096.0, attached_switch: S1}
    - {id: W, cpu_capacity: 4.0, mem_capacity: 4096.0, attached_switch: S2}
  ingress_host: M
pods:
  - {id: p1, chain_index: 0, cpu_limit: 0.3, mem_limit: 312.0, work_demand: 0.1}
placement:
  p1: [W]
intent:
  upper_s: 3.0
  lower_s: 1.0
load:
  phases:
    - {users: 2, duration_s: 60.0}
  payload_kb: 499.69
"#;
