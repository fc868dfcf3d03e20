//! Decision layer: the corrective-action schema, a strict parser for
//! decision bodies, and the pluggable deciders that produce them.
//!
//! Every decider returns a raw text body; the management loop pushes each
//! body through [`parse_decision`] so live replies, replayed fixtures and
//! the built-in heuristic all exercise the same validation path. The parser
//! is tolerant about where the JSON sits (models like to wrap it in prose
//! or code fences) but strict about its content: unknown fields, unknown
//! action types and out-of-bounds values are all rejected.

pub mod fixture;
pub mod heuristic;
pub mod hpa;
pub mod llm;
pub mod prompt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::snapshot::StateSnapshot;
use prompt::DecisionPrompt;

/// Root-cause bucket a decision claims to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCategory {
    CpuShortage,
    MemoryShortage,
    LinkCongestion,
    LinkFailure,
    OverProvisioning,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionSource {
    pub category: IssueCategory,
    #[serde(default)]
    pub detail: String,
}

/// Corrective action in the decision schema. `path` is a switch sequence
/// from the source host's switch to the destination host's switch.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    ServicePlacement { pod: String, target_node: String },
    HorizontalScaling { pod: String, replicas: u32 },
    VerticalScaling { pod: String, cpu_limit: f64, mem_limit: f64 },
    FlowScheduling { src_host: String, dst_host: String, path: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub source: DecisionSource,
    pub actions: Vec<Action>,
}

impl Decision {
    /// Canonical body text; feeding it back through [`parse_decision`]
    /// yields the same decision.
    pub fn to_body(&self) -> String {
        crate::jsonfmt::to_stable_string(self).expect("decision serializes")
    }
}

/// Limits a decision must respect to be applicable at all.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActionBounds {
    pub max_replicas: u32,
    pub cpu_floor: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("no JSON object found in reply")]
    NoJson,
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
}

/// First balanced `{...}` region of `text`, brace counting aware of JSON
/// strings and escapes.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn as_object<'v>(
    v: &'v Value,
    what: &str,
) -> Result<&'v serde_json::Map<String, Value>, SchemaError> {
    v.as_object().ok_or_else(|| SchemaError::Schema(format!("{what} must be an object")))
}

fn expect_keys(
    obj: &serde_json::Map<String, Value>,
    allowed: &[&str],
    what: &str,
) -> Result<(), SchemaError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(SchemaError::Schema(format!("unknown field `{k}` in {what}")));
        }
    }
    for k in allowed {
        if !obj.contains_key(*k) {
            return Err(SchemaError::Schema(format!("missing field `{k}` in {what}")));
        }
    }
    Ok(())
}

fn str_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String, SchemaError> {
    let s = obj
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| SchemaError::Schema(format!("field `{key}` must be a string")))?;
    if s.is_empty() {
        return Err(SchemaError::Schema(format!("field `{key}` must be non-empty")));
    }
    Ok(s.to_string())
}

fn f64_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64, SchemaError> {
    obj.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| SchemaError::Schema(format!("field `{key}` must be a number")))
}

fn u32_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<u32, SchemaError> {
    let n = obj
        .get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| SchemaError::Schema(format!("field `{key}` must be a non-negative integer")))?;
    u32::try_from(n).map_err(|_| SchemaError::Schema(format!("field `{key}` too large")))
}

fn action_from_value(v: &Value) -> Result<Action, SchemaError> {
    let obj = as_object(v, "action")?;
    let kind = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| SchemaError::Schema("action is missing a string `type`".into()))?;
    match kind {
        "service_placement" => {
            expect_keys(obj, &["type", "pod", "target_node"], "service_placement")?;
            Ok(Action::ServicePlacement {
                pod: str_field(obj, "pod")?,
                target_node: str_field(obj, "target_node")?,
            })
        }
        "horizontal_scaling" => {
            expect_keys(obj, &["type", "pod", "replicas"], "horizontal_scaling")?;
            Ok(Action::HorizontalScaling {
                pod: str_field(obj, "pod")?,
                replicas: u32_field(obj, "replicas")?,
            })
        }
        "vertical_scaling" => {
            expect_keys(obj, &["type", "pod", "cpu_limit", "mem_limit"], "vertical_scaling")?;
            Ok(Action::VerticalScaling {
                pod: str_field(obj, "pod")?,
                cpu_limit: f64_field(obj, "cpu_limit")?,
                mem_limit: f64_field(obj, "mem_limit")?,
            })
        }
        "flow_scheduling" => {
            expect_keys(obj, &["type", "src_host", "dst_host", "path"], "flow_scheduling")?;
            let path = obj
                .get("path")
                .and_then(Value::as_array)
                .ok_or_else(|| SchemaError::Schema("field `path` must be an array".into()))?
                .iter()
                .map(|e| {
                    e.as_str().map(str::to_string).ok_or_else(|| {
                        SchemaError::Schema("`path` entries must be strings".into())
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Action::FlowScheduling {
                src_host: str_field(obj, "src_host")?,
                dst_host: str_field(obj, "dst_host")?,
                path,
            })
        }
        other => Err(SchemaError::Schema(format!("unknown action type `{other}`"))),
    }
}

fn check_bounds(action: &Action, bounds: &ActionBounds) -> Result<(), SchemaError> {
    match action {
        Action::HorizontalScaling { pod, replicas } => {
            if *replicas < 1 || *replicas > bounds.max_replicas {
                return Err(SchemaError::Bounds(format!(
                    "replicas for `{pod}` must be in 1..={}",
                    bounds.max_replicas
                )));
            }
        }
        Action::VerticalScaling { pod, cpu_limit, mem_limit } => {
            if !cpu_limit.is_finite() || *cpu_limit < bounds.cpu_floor - 1e-9 {
                return Err(SchemaError::Bounds(format!(
                    "cpu_limit for `{pod}` must be >= {}",
                    bounds.cpu_floor
                )));
            }
            if !mem_limit.is_finite() || *mem_limit <= 0.0 {
                return Err(SchemaError::Bounds(format!("mem_limit for `{pod}` must be positive")));
            }
        }
        Action::FlowScheduling { path, .. } => {
            if path.is_empty() {
                return Err(SchemaError::Bounds("`path` must not be empty".into()));
            }
        }
        Action::ServicePlacement { .. } => {}
    }
    Ok(())
}

/// Parses a decision body: locate the JSON object, validate its shape
/// field-by-field, and check every action against `bounds`.
pub fn parse_decision(text: &str, bounds: &ActionBounds) -> Result<Decision, SchemaError> {
    let raw = extract_json_object(text).ok_or(SchemaError::NoJson)?;
    let value: Value =
        serde_json::from_str(raw).map_err(|e| SchemaError::Syntax(e.to_string()))?;
    let obj = as_object(&value, "decision")?;
    for k in obj.keys() {
        if k != "source" && k != "actions" {
            return Err(SchemaError::Schema(format!("unknown field `{k}` in decision")));
        }
    }

    let source_value =
        obj.get("source").ok_or_else(|| SchemaError::Schema("missing field `source`".into()))?;
    let source: DecisionSource = serde_json::from_value(source_value.clone())
        .map_err(|e| SchemaError::Schema(format!("bad source: {e}")))?;

    // A decision may omit `actions` entirely; that reads as "observed, but
    // nothing to do".
    let actions = match obj.get("actions") {
        None => Vec::new(),
        Some(v) => v
            .as_array()
            .ok_or_else(|| SchemaError::Schema("`actions` must be an array".into()))?
            .iter()
            .map(action_from_value)
            .collect::<Result<Vec<_>, _>>()?,
    };
    for a in &actions {
        check_bounds(a, bounds)?;
    }
    Ok(Decision { source, actions })
}

#[derive(Debug, Error)]
pub enum DeciderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("fixture exhausted after {0} replies")]
    Exhausted(usize),
}

/// A source of decision bodies. Implementations must be deterministic for a
/// given prompt sequence unless they talk to a live endpoint.
pub trait Decider {
    /// Stable name recorded in events and summaries.
    fn name(&self) -> String;
    /// Wall-clock seconds one consultation costs inside the simulation.
    fn latency_s(&self) -> f64;
    /// Whether a rejected body may be retried with the error appended.
    fn retryable(&self) -> bool;
    /// Produces a raw decision body for the prompt.
    fn decide(&mut self, prompt: &DecisionPrompt) -> Result<String, DeciderError>;
}

/// Closure-backed decider for tests.
pub struct FnDecider<F: FnMut(&StateSnapshot) -> String> {
    pub f: F,
    pub latency: f64,
}

impl<F: FnMut(&StateSnapshot) -> String> Decider for FnDecider<F> {
    fn name(&self) -> String {
        "fn".into()
    }
    fn latency_s(&self) -> f64 {
        self.latency
    }
    fn retryable(&self) -> bool {
        false
    }
    fn decide(&mut self, prompt: &DecisionPrompt) -> Result<String, DeciderError> {
        Ok((self.f)(&prompt.snapshot))
    }
}
