//! Replay decider: answers violations from a recorded file instead of a live
//! model, which makes whole runs reproducible byte for byte. The file holds
//! one JSON record per line; bodies are raw reply text and go through the
//! same parser as live replies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decision::prompt::DecisionPrompt;
use crate::decision::{Decider, DeciderError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub violation_index: usize,
    pub body: String,
}

#[derive(Debug, Clone)]
pub struct FixtureDecider {
    label: String,
    records: BTreeMap<usize, String>,
    consulted: usize,
    latency_s: f64,
}

impl FixtureDecider {
    /// Parses JSON-lines text. Blank lines and `#` comment lines are
    /// skipped; duplicate indices are an error because replay would become
    /// ambiguous.
    pub fn parse(label: &str, text: &str, latency_s: f64) -> Result<FixtureDecider, String> {
        let mut records = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(line)
                .map_err(|e| format!("{label} line {}: {e}", lineno + 1))?;
            if records.insert(rec.violation_index, rec.body).is_some() {
                return Err(format!(
                    "{label} line {}: duplicate violation_index {}",
                    lineno + 1,
                    rec.violation_index
                ));
            }
        }
        Ok(FixtureDecider { label: label.to_string(), records, consulted: 0, latency_s })
    }

    pub fn from_file(path: &Path, latency_s: f64) -> Result<FixtureDecider, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        FixtureDecider::parse(&label, &text, latency_s)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Raw body recorded for one violation.
    pub fn body_for(&self, violation_index: usize) -> Result<&str, DeciderError> {
        self.records
            .get(&violation_index)
            .map(String::as_str)
            .ok_or(DeciderError::Exhausted(self.records.len()))
    }

    /// Every recorded body in index order, for bulk validation.
    pub fn bodies(&self) -> impl Iterator<Item = (usize, &str)> {
        self.records.iter().map(|(i, b)| (*i, b.as_str()))
    }
}

impl Decider for FixtureDecider {
    fn name(&self) -> String {
        format!("fixture:{}", self.label)
    }
    fn latency_s(&self) -> f64 {
        self.latency_s
    }
    /// Replaying the same body again cannot fix a schema error.
    fn retryable(&self) -> bool {
        false
    }
    fn decide(&mut self, _prompt: &DecisionPrompt) -> Result<String, DeciderError> {
        let body = self.body_for(self.consulted)?.to_string();
        self.consulted += 1;
        Ok(body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{parse_decision, Action, ActionBounds};

    const SAMPLE: &str = r#"
# recorded replies
{"violation_index": 0, "body": "{\"source\":{\"category\":\"cpu_shortage\",\"detail\":\"x\"},\"actions\":[{\"type\":\"service_placement\",\"pod\":\"p3\",\"target_node\":\"W2\"}]}"}
{"violation_index": 1, "body": "{\"source\":{\"category\":\"cpu_shortage\"},\"actions\":[{\"type\":\"horizontal_scaling\",\"pod\":\"p3\",\"replicas\":2}]}"}
"#;

    #[test]
    fn replays_in_order_and_exhausts() {
        let f = FixtureDecider::parse("t", SAMPLE, 13.4).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.latency_s(), 13.4);
        assert!(!f.retryable());

        let bounds = ActionBounds { max_replicas: 5, cpu_floor: 0.2 };
        let d0 = parse_decision(f.body_for(0).unwrap(), &bounds).unwrap();
        assert_eq!(
            d0.actions,
            vec![Action::ServicePlacement { pod: "p3".into(), target_node: "W2".into() }]
        );
        assert!(f.body_for(2).is_err());
        // Replaying twice yields identical bodies.
        assert_eq!(f.body_for(1).unwrap(), f.body_for(1).unwrap());
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        let dup = r#"{"violation_index": 0, "body": "a"}
{"violation_index": 0, "body": "b"}"#;
        assert!(FixtureDecider::parse("t", dup, 0.0).unwrap_err().contains("duplicate"));
        assert!(FixtureDecider::parse("t", "not json", 0.0).is_err());
    }
}
