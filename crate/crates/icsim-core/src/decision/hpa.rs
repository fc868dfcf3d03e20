//! Horizontal autoscaler baseline. No intent, no prompt: each pod is scaled
//! toward a CPU utilization target the way a stock Kubernetes autoscaler
//! would, with immediate scale-up and a cooldown-gated scale-down.

use std::collections::BTreeMap;

/// Seconds between controller evaluations.
pub const EVAL_INTERVAL_S: f64 = 15.0;
/// Trailing horizon the utilization figure is averaged over.
pub const UTIL_WINDOW_S: f64 = 60.0;
/// A pod scaled in either direction may not scale down again before this.
pub const COOLDOWN_S: f64 = 300.0;

/// Replica count the target-tracking rule asks for:
/// `clamp(ceil(current * util / target), 1, max)`.
pub fn desired_replicas(current: u32, util: f64, target: f64, max_replicas: u32) -> u32 {
    assert!(target > 0.0 && target <= 1.0, "target must be in (0, 1]");
    let util = if util.is_finite() { util.max(0.0) } else { 0.0 };
    // The epsilon keeps division noise at exact integer ratios (for example
    // 3 * 0.2 / 0.6) from manufacturing an extra replica.
    let raw = (current as f64 * util / target - 1e-9).ceil();
    (raw.max(0.0) as u32).clamp(1, max_replicas.max(1))
}

/// One controller pass over every pod. Scale-ups apply immediately;
/// scale-downs only when `now - last_scale_change >= cooldown_s` (a pod
/// never scaled before has no cooldown). Returns the full desired map.
pub fn hpa_decide(
    pod_utilizations: &BTreeMap<String, f64>,
    target: f64,
    current_replicas: &BTreeMap<String, u32>,
    now: f64,
    last_scale_change: &BTreeMap<String, f64>,
    max_replicas: u32,
    cooldown_s: f64,
) -> BTreeMap<String, u32> {
    let mut out = BTreeMap::new();
    for (pod, &current) in current_replicas {
        let util = pod_utilizations.get(pod).copied().unwrap_or(0.0);
        let desired = desired_replicas(current, util, target, max_replicas);
        let pick = if desired >= current {
            desired
        } else {
            let last = last_scale_change.get(pod).copied().unwrap_or(f64::NEG_INFINITY);
            if now - last >= cooldown_s {
                desired
            } else {
                current
            }
        };
        out.insert(pod.clone(), pick);
    }
    out
}

/// Stateful wrapper the engine drives every [`EVAL_INTERVAL_S`].
#[derive(Debug, Clone)]
pub struct HpaBaseline {
    pub target: f64,
    pub max_replicas: u32,
    pub cooldown_s: f64,
    last_change: BTreeMap<String, f64>,
}

impl HpaBaseline {
    pub fn new(target: f64, max_replicas: u32) -> HpaBaseline {
        HpaBaseline { target, max_replicas, cooldown_s: COOLDOWN_S, last_change: BTreeMap::new() }
    }

    pub fn name(&self) -> String {
        format!("hpa:{:.2}", self.target)
    }

    /// Evaluates every pod and returns `(pod, new_replicas)` for those that
    /// must change, recording the change times for future cooldowns.
    pub fn evaluate(
        &mut self,
        now: f64,
        pod_utilizations: &BTreeMap<String, f64>,
        current_replicas: &BTreeMap<String, u32>,
    ) -> Vec<(String, u32)> {
        let desired = hpa_decide(
            pod_utilizations,
            self.target,
            current_replicas,
            now,
            &self.last_change,
            self.max_replicas,
            self.cooldown_s,
        );
        let mut changes = Vec::new();
        for (pod, &want) in &desired {
            let have = current_replicas.get(pod).copied().unwrap_or(1);
            if want != have {
                self.last_change.insert(pod.clone(), now);
                changes.push((pod.clone(), want));
            }
        }
        changes
    }
}
