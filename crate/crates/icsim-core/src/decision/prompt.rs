//! Prompt construction for model-backed deciders.
//!
//! A prompt carries a static narrative (the system message) and one user
//! message assembled from the frozen snapshot: intent, cluster, network and
//! monitoring blocks, the action templates, and up to two worked examples.
//! Construction is fully deterministic so identical snapshots produce
//! byte-identical prompts, which keeps live-model runs auditable and replay
//! runs exact.

use serde::{Deserialize, Serialize};

use crate::scenario::IntentSpec;
use crate::snapshot::{StateSnapshot, ViolationInfo};

/// A worked example shown to the model: a compact situation description and
/// the decision that resolved it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotExample {
    pub id: String,
    /// Coarse root-cause family, `compute` or `network`; prompt assembly
    /// picks one example of each.
    pub kind: String,
    pub situation: serde_json::Value,
    pub decision: serde_json::Value,
}

#[derive(Debug, Clone, Default)]
pub struct FewShotLibrary {
    pub examples: Vec<FewShotExample>,
}

const SHIPPED_COMPUTE_EXAMPLE: &str = include_str!("../../fixtures/fewshot/compute_rooted.json");
const SHIPPED_NETWORK_EXAMPLE: &str = include_str!("../../fixtures/fewshot/network_rooted.json");

impl FewShotLibrary {
    pub fn empty() -> FewShotLibrary {
        FewShotLibrary::default()
    }

    /// The two examples bundled with the simulator.
    pub fn shipped() -> FewShotLibrary {
        let parse = |s: &str| -> FewShotExample {
            serde_json::from_str(s).expect("shipped example parses")
        };
        FewShotLibrary {
            examples: vec![parse(SHIPPED_COMPUTE_EXAMPLE), parse(SHIPPED_NETWORK_EXAMPLE)],
        }
    }

    /// Loads every `*.json` file of `dir` in file-name order.
    pub fn load_dir(dir: &std::path::Path) -> std::io::Result<FewShotLibrary> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut examples = Vec::new();
        for p in paths {
            let text = std::fs::read_to_string(&p)?;
            let ex: FewShotExample = serde_json::from_str(&text)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            examples.push(ex);
        }
        Ok(FewShotLibrary { examples })
    }

    /// One example per root-cause family, first match wins.
    fn pick(&self) -> Vec<&FewShotExample> {
        let mut out = Vec::new();
        for kind in ["compute", "network"] {
            if let Some(ex) = self.examples.iter().find(|e| e.kind == kind) {
                out.push(ex);
            }
        }
        out
    }
}

/// The assembled prompt. Section strings are stable JSON; `token_estimate`
/// approximates the model tokenizer as ceil(chars / 4).
#[derive(Debug, Clone, Serialize)]
pub struct PromptDocument {
    pub narrative: String,
    pub cluster_info: String,
    pub network_info: String,
    pub monitoring_data: String,
    pub intent_block: String,
    /// (situation, decision) pairs, serialized.
    pub few_shot: Vec<(String, String)>,
    /// Validator messages from rejected earlier attempts, newest last.
    pub retry_errors: Vec<String>,
    pub token_estimate: u64,
}

/// What a decider receives: the renderable document plus the structured
/// snapshot it came from (rule-based deciders skip the text entirely).
#[derive(Debug, Clone)]
pub struct DecisionPrompt {
    pub document: PromptDocument,
    pub snapshot: StateSnapshot,
}

impl DecisionPrompt {
    pub fn system(&self) -> &str {
        &self.document.narrative
    }

    pub fn user(&self) -> String {
        self.document.user_message()
    }

    /// Records a validator rejection so the next ask can show the model what
    /// was wrong with its previous reply.
    pub fn append_error(&mut self, message: &str) {
        self.document.retry_errors.push(message.to_string());
    }
}

const NARRATIVE: &str = "\
You are the decision maker of an intent-driven management loop operating a \
containerized application across a compute continuum that spans edge worker \
nodes and a small cloud. The application is a chain of services (pods); every \
request enters at the ingress host, visits each chain stage in order, and \
returns to the ingress. Stages may run several replicas spread over worker \
nodes, and consecutive stages exchange data across a switched network whose \
links have limited capacity. Requests therefore spend time queueing for a \
replica, being processed (inversely proportional to the stage's CPU limit), \
and moving payloads across network paths.\n\
\n\
The operator's intent is expressed as a response-time objective: an \
exponential moving average of end-to-end response times must stay inside a \
band. When the average leaves the band, the loop freezes a snapshot of the \
whole system and consults you. Your job is to identify the most plausible \
source of the violation and recommend corrective actions. You can relocate a \
service to another node, add or remove replicas, resize a service's CPU and \
memory limits, or pin a traffic flow to an explicit switch path. Actions you \
recommend are validated and applied by an actuator; infeasible actions are \
skipped, so prefer actions that respect the listed node capacities, link \
states and bounds.\n\
\n\
Ground your reasoning only in the data blocks of the request: the cluster \
block describes nodes and services, the network block describes switches, \
links and the active flow routes, and the monitoring block carries recent \
windowed measurements (utilizations are fractions of capacity or limit; a \
link utilization near or above 1.0 means saturation). Upper violations are \
usually rooted in an overloaded service (add capacity where utilization is \
high) or a congested or failed link on an active route (move the flow to a \
cleaner path, or move the service if no path helps). Lower violations mean \
over-provisioning: release replicas or trim limits of the least utilized \
service. Recommend the smallest set of actions that restores the objective.\n";

const TEMPLATES: &str = r#"Respond with exactly one JSON object and no other text. Schema:
{
  "source": {
    "category": "cpu_shortage | memory_shortage | link_congestion | link_failure | over_provisioning | other",
    "detail": "short free-text justification"
  },
  "actions": [
    {"type": "service_placement", "pod": "<pod-id>", "target_node": "<node-id>"},
    {"type": "horizontal_scaling", "pod": "<pod-id>", "replicas": <desired-count>},
    {"type": "vertical_scaling", "pod": "<pod-id>", "cpu_limit": <cores>, "mem_limit": <MiB>},
    {"type": "flow_scheduling", "src_host": "<host>", "dst_host": "<host>", "path": ["<switch>", "..."]}
  ]
}
The actions list may hold any number of entries (including zero) drawn from
those four templates. Unknown fields or action types are rejected. replicas
must stay within the listed bounds; cpu_limit must not drop below the floor."#;

/// Builds the full prompt for a violation. All sections derive from the
/// snapshot; `intent` and `violation` are passed separately so the caller
/// controls exactly what objective the model is told about.
pub fn build_prompt(
    snapshot: &StateSnapshot,
    intent: &IntentSpec,
    violation: &ViolationInfo,
    library: &FewShotLibrary,
) -> DecisionPrompt {
    let stable = |v: &serde_json::Value| -> String {
        crate::jsonfmt::to_stable_string(v).expect("prompt section serializes")
    };

    let cluster_info = stable(&serde_json::json!({
        "ingress_host": snapshot.ingress_host,
        "nodes": snapshot.nodes,
        "pods": snapshot.pods,
    }));
    let network_info = stable(&serde_json::json!({
        "switches": snapshot.switches,
        "links": snapshot.links,
        "flows": snapshot.flows,
        "route_version": snapshot.route_version,
    }));
    let monitoring_data = stable(&serde_json::json!({
        "time_s": snapshot.time_s,
        "windows": snapshot.windows,
        "short_history": snapshot.short_history,
    }));
    let intent_block = stable(&serde_json::json!({
        "objective": "avg_response_time_ema",
        "upper_s": intent.upper_s,
        "lower_s": intent.lower_s,
        "violation": violation,
        "bounds": snapshot.bounds,
    }));
    let few_shot: Vec<(String, String)> =
        library.pick().iter().map(|ex| (stable(&ex.situation), stable(&ex.decision))).collect();

    let mut doc = PromptDocument {
        narrative: NARRATIVE.to_string(),
        cluster_info,
        network_info,
        monitoring_data,
        intent_block,
        few_shot,
        retry_errors: Vec::new(),
        token_estimate: 0,
    };
    let chars = doc.narrative.chars().count() + doc.user_message().chars().count();
    doc.token_estimate = chars.div_ceil(4) as u64;
    DecisionPrompt { document: doc, snapshot: snapshot.clone() }
}

impl PromptDocument {
    /// Renders the user message: data blocks, templates, then examples.
    pub fn user_message(&self) -> String {
        let mut s = String::new();
        s.push_str("## Intent\n");
        s.push_str(&self.intent_block);
        s.push_str("\n\n## Cluster\n");
        s.push_str(&self.cluster_info);
        s.push_str("\n\n## Network\n");
        s.push_str(&self.network_info);
        s.push_str("\n\n## Monitoring\n");
        s.push_str(&self.monitoring_data);
        s.push_str("\n\n## Response format\n");
        s.push_str(TEMPLATES);
        if !self.few_shot.is_empty() {
            s.push_str("\n\n## Worked examples\n");
            for (i, (situation, decision)) in self.few_shot.iter().enumerate() {
                s.push_str(&format!("Example {} situation:\n{}\n", i + 1, situation));
                s.push_str(&format!("Example {} decision:\n{}\n", i + 1, decision));
            }
        }
        if !self.retry_errors.is_empty() {
            s.push_str("\n\n## Previous attempt rejected\n");
            for e in &self.retry_errors {
                s.push_str(&format!("- {e}\n"));
            }
            s.push_str("Correct the reply accordingly.\n");
        }
        s.push_str("\nNow give the decision for the situation above.\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::parse_decision;
    use crate::decision::ActionBounds;

    fn intent() -> IntentSpec {
        IntentSpec {
            upper_s: 3.0,
            lower_s: 1.0,
            waiting_s: 60.0,
            decision_latency_s: 13.4,
            alpha: 0.02,
            min_requests: 5,
        }
    }

    fn snapshot() -> StateSnapshot {
        let text = include_str!("../../fixtures/fewshot/compute_rooted.json");
        let ex: FewShotExample = serde_json::from_str(text).unwrap();
        // The shipped example situations are full snapshots, so they double
        // as test input here.
        serde_json::from_value(ex.situation).unwrap()
    }

    #[test]
    fn shipped_library_yields_one_example_per_family() {
        let lib = FewShotLibrary::shipped();
        assert_eq!(lib.examples.len(), 2);
        let snap = snapshot();
        let v = snap.violation.clone();
        let prompt = build_prompt(&snap, &intent(), &v, &lib);
        assert_eq!(prompt.document.few_shot.len(), 2);
        // Both example decisions must satisfy the schema we ask the model for.
        for (_, decision) in &prompt.document.few_shot {
            parse_decision(decision, &ActionBounds { max_replicas: 5, cpu_floor: 0.2 }).unwrap();
        }
    }

    #[test]
    fn empty_library_still_builds() {
        let snap = snapshot();
        let v = snap.violation.clone();
        let prompt = build_prompt(&snap, &intent(), &v, &FewShotLibrary::empty());
        assert!(prompt.document.few_shot.is_empty());
        assert!(prompt.document.token_estimate > 0);
        assert!(prompt.user().contains("## Monitoring"));
    }

    #[test]
    fn construction_is_deterministic() {
        let lib = FewShotLibrary::shipped();
        let snap = snapshot();
        let v = snap.violation.clone();
        let a = build_prompt(&snap, &intent(), &v, &lib);
        let b = build_prompt(&snap, &intent(), &v, &lib);
        assert_eq!(a.system(), b.system());
        assert_eq!(a.user(), b.user());
        assert_eq!(a.document.token_estimate, b.document.token_estimate);
    }

    #[test]
    fn token_estimate_is_chars_over_four() {
        let lib = FewShotLibrary::empty();
        let snap = snapshot();
        let v = snap.violation.clone();
        let p = build_prompt(&snap, &intent(), &v, &lib);
        let chars = p.system().chars().count() + p.user().chars().count();
        assert_eq!(p.document.token_estimate, chars.div_ceil(4) as u64);
    }

    #[test]
    fn estimate_grows_with_snapshot_size() {
        let lib = FewShotLibrary::shipped();
        let snap = snapshot();
        let v = snap.violation.clone();
        let small = build_prompt(&snap, &intent(), &v, &lib).document.token_estimate;
        let mut bigger = snap.clone();
        for i in 0..50 {
            bigger.nodes.push(bigger.nodes[0].clone());
            bigger.nodes.last_mut().unwrap().id = format!("extra{i:03}");
        }
        let big = build_prompt(&bigger, &intent(), &v, &lib).document.token_estimate;
        assert!(big > small);
    }
}
