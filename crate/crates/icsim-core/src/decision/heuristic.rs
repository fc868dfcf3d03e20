//! Rule-based decider. Pure function of the snapshot: identical snapshots
//! yield identical decisions, with lexicographic tie-breaks everywhere a
//! choice is otherwise ambiguous. Utilization figures are read from the most
//! recent monitoring window embedded in the snapshot.

use crate::actuator::{compute_route, path_links, path_max_util};
use crate::decision::{Action, Decider, DeciderError, Decision, DecisionSource, IssueCategory};
use crate::snapshot::{FlowInfo, PodInfo, StateSnapshot};
use crate::telemetry::BreachKind;

/// Link utilization at or above this fraction counts as congested.
const HOT_LINK: f64 = 0.9;
/// Pod utilization at or above this fraction suggests resizing over scaling.
const HOT_POD: f64 = 0.8;
/// Pod utilization below this fraction marks an over-provisioned pod.
const COLD_POD: f64 = 0.4;
const CPU_STEP: f64 = 0.1;
const MEM_STEP: f64 = 100.0;

pub fn heuristic_decide(snapshot: &StateSnapshot) -> Decision {
    match snapshot.violation.kind {
        BreachKind::Upper => upper_decision(snapshot),
        BreachKind::Lower => lower_decision(snapshot),
    }
}

/// Max-utilization pod; ties fall to the lexicographically first id.
fn hottest_pod(snapshot: &StateSnapshot) -> &PodInfo {
    snapshot
        .pods
        .iter()
        .max_by(|a, b| {
            a.cpu_utilization
                .total_cmp(&b.cpu_utilization)
                .then_with(|| b.id.cmp(&a.id))
        })
        .expect("snapshot has pods")
}

fn coldest_pod(snapshot: &StateSnapshot) -> &PodInfo {
    snapshot
        .pods
        .iter()
        .min_by(|a, b| {
            a.cpu_utilization
                .total_cmp(&b.cpu_utilization)
                .then_with(|| a.id.cmp(&b.id))
        })
        .expect("snapshot has pods")
}

/// Free capacity of `node` if `pod` were lifted off it first.
fn free_after_vacating(snapshot: &StateSnapshot, node_id: &str, pod: &PodInfo) -> (f64, f64) {
    let node = snapshot.nodes.iter().find(|n| n.id == node_id).expect("node exists");
    let here = pod.nodes.iter().filter(|n| *n == node_id).count() as f64;
    (node.cpu_free + here * pod.cpu_limit, node.mem_free + here * pod.mem_limit_mib)
}

/// Feasible placement target with the most free CPU; never the ingress
/// host and never a node that already holds every replica (that placement
/// would change nothing), ties broken lexicographically. Feasible means all
/// replicas fit.
fn best_placement_target(snapshot: &StateSnapshot, pod: &PodInfo) -> Option<String> {
    let need = pod.replicas.max(1) as f64;
    snapshot
        .nodes
        .iter()
        .filter(|n| n.id != snapshot.ingress_host)
        .filter(|n| !pod.nodes.iter().all(|h| *h == n.id) || pod.nodes.is_empty())
        .filter(|n| {
            let (cpu, mem) = free_after_vacating(snapshot, &n.id, pod);
            cpu + 1e-9 >= need * pod.cpu_limit && mem + 1e-9 >= need * pod.mem_limit_mib
        })
        .max_by(|a, b| {
            let (fa, _) = free_after_vacating(snapshot, &a.id, pod);
            let (fb, _) = free_after_vacating(snapshot, &b.id, pod);
            fa.total_cmp(&fb).then_with(|| b.id.cmp(&a.id))
        })
        .map(|n| n.id.clone())
}

/// The chain stage a flow feeds: the first pod (chain order) with a replica
/// on the receiving host. Return flows end at the ingress, which hosts no
/// pod, so those fall back to the sending host's stage.
fn flow_pod<'s>(snapshot: &'s StateSnapshot, flow: &FlowInfo) -> Option<&'s PodInfo> {
    let on_host = |host: &str| {
        snapshot
            .pods
            .iter()
            .filter(|p| p.nodes.iter().any(|n| n == host))
            .min_by_key(|p| p.chain_index)
    };
    on_host(&flow.dst_host).or_else(|| on_host(&flow.src_host))
}

fn upper_decision(snapshot: &StateSnapshot) -> Decision {
    let topo = snapshot.topology();
    let utils = snapshot.link_utils();

    // Rule 1: congestion or failure on an active route dominates everything
    // else. Every affected flow gets one corrective action in this same
    // decision; rerouting one flow at a time would leave the rest pinned to
    // the bad link for another waiting window.
    let offending = |flow: &FlowInfo| {
        path_links(&flow.path).iter().any(|k| {
            let down = topo.link(k).is_some_and(|l| !l.up);
            down || utils.get(k).copied().unwrap_or(0.0) >= HOT_LINK
        })
    };
    let affected: Vec<&FlowInfo> = snapshot.flows.iter().filter(|f| offending(f)).collect();
    if !affected.is_empty() {
        let any_down = affected.iter().any(|f| {
            path_links(&f.path).iter().any(|k| topo.link(k).is_some_and(|l| !l.up))
        });
        let mut actions = Vec::new();
        let mut moved = Vec::new();
        for flow in &affected {
            let src_sw = topo.attachment(&flow.src_host).expect("host attached");
            let dst_sw = topo.attachment(&flow.dst_host).expect("host attached");
            let alternate = compute_route(&topo, &utils, src_sw, dst_sw, &Default::default());
            match alternate {
                Some(path)
                    if path != flow.path && path_max_util(&path, &utils) < HOT_LINK =>
                {
                    actions.push(Action::FlowScheduling {
                        src_host: flow.src_host.clone(),
                        dst_host: flow.dst_host.clone(),
                        path,
                    });
                }
                _ => {
                    // No cleaner path exists; move the stage the flow feeds
                    // so the flow itself disappears or re-derives elsewhere.
                    if let Some(pod) = flow_pod(snapshot, flow) {
                        if moved.contains(&pod.id) {
                            continue;
                        }
                        if let Some(target) = best_placement_target(snapshot, pod) {
                            moved.push(pod.id.clone());
                            actions.push(Action::ServicePlacement {
                                pod: pod.id.clone(),
                                target_node: target,
                            });
                        }
                    }
                }
            }
        }
        let category =
            if any_down { IssueCategory::LinkFailure } else { IssueCategory::LinkCongestion };
        let worst = affected
            .iter()
            .map(|f| f.max_link_utilization)
            .fold(0.0, f64::max);
        return Decision {
            source: DecisionSource {
                category,
                detail: format!(
                    "{} active flow(s) cross a congested or failed link (worst utilization {:.3})",
                    affected.len(),
                    worst
                ),
            },
            actions,
        };
    }

    let pod = hottest_pod(snapshot);

    // Rule 2: a pod pressing against its limit gets more of it.
    if pod.cpu_utilization >= HOT_POD {
        let headroom = pod.nodes.iter().all(|node_id| {
            let node = snapshot.nodes.iter().find(|n| n.id == *node_id).expect("node exists");
            let here = pod.nodes.iter().filter(|n| *n == node_id).count() as f64;
            node.cpu_free + 1e-9 >= CPU_STEP * here && node.mem_free + 1e-9 >= MEM_STEP * here
        });
        let source = DecisionSource {
            category: IssueCategory::CpuShortage,
            detail: format!("{} at {:.3} of its CPU limit", pod.id, pod.cpu_utilization),
        };
        if headroom {
            return Decision {
                source,
                actions: vec![Action::VerticalScaling {
                    pod: pod.id.clone(),
                    cpu_limit: pod.cpu_limit + CPU_STEP,
                    mem_limit: pod.mem_limit_mib + MEM_STEP,
                }],
            };
        }
        if (pod.replicas as u32) < snapshot.bounds.max_replicas {
            return Decision {
                source,
                actions: vec![Action::HorizontalScaling {
                    pod: pod.id.clone(),
                    replicas: pod.replicas as u32 + 1,
                }],
            };
        }
        if let Some(target) = best_placement_target(snapshot, pod) {
            return Decision {
                source,
                actions: vec![Action::ServicePlacement { pod: pod.id.clone(), target_node: target }],
            };
        }
    }

    // Rule 3: otherwise widen the chain at its busiest stage.
    let source = DecisionSource {
        category: IssueCategory::CpuShortage,
        detail: format!("chain slowest at {} ({:.3} of limit)", pod.id, pod.cpu_utilization),
    };
    if (pod.replicas as u32) < snapshot.bounds.max_replicas {
        Decision {
            source,
            actions: vec![Action::HorizontalScaling {
                pod: pod.id.clone(),
                replicas: pod.replicas as u32 + 1,
            }],
        }
    } else {
        // Replica bound reached; raising the limit is the remaining lever.
        Decision {
            source,
            actions: vec![Action::VerticalScaling {
                pod: pod.id.clone(),
                cpu_limit: pod.cpu_limit + CPU_STEP,
                mem_limit: pod.mem_limit_mib + MEM_STEP,
            }],
        }
    }
}

fn lower_decision(snapshot: &StateSnapshot) -> Decision {
    let pod = coldest_pod(snapshot);
    let source = DecisionSource {
        category: IssueCategory::OverProvisioning,
        detail: format!("{} at {:.3} of its CPU limit", pod.id, pod.cpu_utilization),
    };
    if pod.cpu_utilization < COLD_POD && pod.replicas > 1 {
        return Decision {
            source,
            actions: vec![Action::HorizontalScaling {
                pod: pod.id.clone(),
                replicas: pod.replicas as u32 - 1,
            }],
        };
    }
    let floor = snapshot.bounds.cpu_floor;
    if pod.cpu_limit > floor + 1e-9 {
        return Decision {
            source,
            actions: vec![Action::VerticalScaling {
                pod: pod.id.clone(),
                cpu_limit: (pod.cpu_limit - CPU_STEP).max(floor),
                mem_limit: pod.mem_limit_mib,
            }],
        };
    }
    // Nothing left to release.
    Decision { source, actions: Vec::new() }
}

/// [`Decider`] wrapper; answers instantly, and a schema retry would be
/// pointless because the function is deterministic.
pub struct HeuristicDecider;

impl Decider for HeuristicDecider {
    fn name(&self) -> String {
        "heuristic".into()
    }
    fn latency_s(&self) -> f64 {
        0.0
    }
    fn retryable(&self) -> bool {
        false
    }
    fn decide(
        &mut self,
        prompt: &crate::decision::prompt::DecisionPrompt,
    ) -> Result<String, DeciderError> {
        Ok(heuristic_decide(&prompt.snapshot).to_body())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::prompt::FewShotExample;

    fn compute_snapshot() -> StateSnapshot {
        let ex: FewShotExample =
            serde_json::from_str(include_str!("../../fixtures/fewshot/compute_rooted.json"))
                .unwrap();
        serde_json::from_value(ex.situation).unwrap()
    }

    fn network_snapshot() -> StateSnapshot {
        let ex: FewShotExample =
            serde_json::from_str(include_str!("../../fixtures/fewshot/network_rooted.json"))
                .unwrap();
        serde_json::from_value(ex.situation).unwrap()
    }

    #[test]
    fn matches_the_shipped_compute_example() {
        let snap = compute_snapshot();
        let d = heuristic_decide(&snap);
        assert_eq!(d.source.category, IssueCategory::CpuShortage);
        assert_eq!(
            d.actions,
            vec![Action::HorizontalScaling { pod: "p3".into(), replicas: 2 }]
        );
    }

    #[test]
    fn matches_the_shipped_network_example() {
        let snap = network_snapshot();
        let d = heuristic_decide(&snap);
        assert_eq!(d.source.category, IssueCategory::LinkCongestion);
        assert_eq!(
            d.actions,
            vec![Action::FlowScheduling {
                src_host: "W3".into(),
                dst_host: "M".into(),
                path: vec!["S3".into(), "S1".into(), "S2".into()],
            }]
        );
    }

    #[test]
    fn reroutes_every_affected_flow_at_once() {
        let mut snap = network_snapshot();
        // Second congestion pattern: the forward hop S3|S4 and the detour
        // S1|S2 both hot, S2|S3 clean again.
        for l in &mut snap.links {
            let label = format!("{}|{}", l.a, l.b);
            l.utilization = match label.as_str() {
                "S1|S2" | "S3|S4" => 0.99,
                _ => 0.01,
            };
        }
        for f in &mut snap.flows {
            if f.src_host == "W3" {
                f.path = vec!["S3".into(), "S1".into(), "S2".into()];
                f.max_link_utilization = 0.99;
            }
            if f.src_host == "W2" {
                f.max_link_utilization = 0.99;
            }
        }
        let d = heuristic_decide(&snap);
        assert_eq!(d.actions.len(), 2);
        assert_eq!(
            d.actions[0],
            Action::FlowScheduling {
                src_host: "W2".into(),
                dst_host: "W3".into(),
                path: vec!["S4".into(), "S2".into(), "S3".into()],
            }
        );
        assert_eq!(
            d.actions[1],
            Action::FlowScheduling {
                src_host: "W3".into(),
                dst_host: "M".into(),
                path: vec!["S3".into(), "S2".into()],
            }
        );
    }

    #[test]
    fn placement_fallback_when_no_clean_path_exists() {
        let mut snap = network_snapshot();
        // Every link into S2 is hot, so no flow ending at S2 can be saved by
        // rerouting; the stages feeding those flows must move instead.
        for l in &mut snap.links {
            let label = format!("{}|{}", l.a, l.b);
            l.utilization = match label.as_str() {
                "S1|S2" | "S2|S3" | "S2|S4" => 0.95,
                _ => 0.0,
            };
        }
        for f in &mut snap.flows {
            f.max_link_utilization = path_links(&f.path)
                .iter()
                .map(|k| {
                    snap.links
                        .iter()
                        .find(|l| crate::model::LinkKey::new(&l.a, &l.b) == *k)
                        .map(|l| l.utilization)
                        .unwrap_or(0.0)
                })
                .fold(0.0, f64::max);
        }
        let d = heuristic_decide(&snap);
        // Affected flows in order: (W1,W2) over S2|S4 and (W3,M) over S2|S3.
        // The first moves its receiving stage p2; the second ends at the
        // ingress, which hosts no pod, so its sending stage p4 moves.
        assert_eq!(d.actions.len(), 2);
        assert_eq!(
            d.actions[0],
            Action::ServicePlacement { pod: "p2".into(), target_node: "W1".into() }
        );
        assert_eq!(
            d.actions[1],
            Action::ServicePlacement { pod: "p4".into(), target_node: "W1".into() }
        );
    }

    #[test]
    fn down_link_is_a_failure_category() {
        let mut snap = network_snapshot();
        for l in &mut snap.links {
            l.utilization = 0.0;
            if l.a == "S2" && l.b == "S3" {
                l.up = false;
            }
        }
        let d = heuristic_decide(&snap);
        assert_eq!(d.source.category, IssueCategory::LinkFailure);
        assert_eq!(
            d.actions,
            vec![Action::FlowScheduling {
                src_host: "W3".into(),
                dst_host: "M".into(),
                path: vec!["S3".into(), "S1".into(), "S2".into()],
            }]
        );
    }

    #[test]
    fn hot_pod_with_headroom_gets_resized() {
        let mut snap = compute_snapshot();
        for l in &mut snap.links {
            l.utilization = 0.0;
        }
        snap.pods[2].cpu_utilization = 0.95;
        let d = heuristic_decide(&snap);
        assert_eq!(
            d.actions,
            vec![Action::VerticalScaling { pod: "p3".into(), cpu_limit: 0.6, mem_limit: 612.0 }]
        );
    }

    #[test]
    fn hot_pod_without_headroom_scales_out_then_moves() {
        let mut snap = compute_snapshot();
        for l in &mut snap.links {
            l.utilization = 0.0;
        }
        snap.pods[2].cpu_utilization = 0.95;
        let w3 = snap.nodes.iter_mut().find(|n| n.id == "W3").unwrap();
        w3.cpu_free = 0.05;
        let d = heuristic_decide(&snap);
        assert_eq!(
            d.actions,
            vec![Action::HorizontalScaling { pod: "p3".into(), replicas: 2 }]
        );
        // At the replica cap the pod moves to the roomiest node instead.
        snap.pods[2].replicas = 5;
        snap.pods[2].nodes = vec!["W3".into(); 5];
        let d = heuristic_decide(&snap);
        match &d.actions[0] {
            Action::ServicePlacement { pod, target_node } => {
                assert_eq!(pod, "p3");
                assert_eq!(target_node, "W1");
            }
            other => panic!("expected placement, got {other:?}"),
        }
    }

    #[test]
    fn saturated_chain_widens_hottest_stage_or_resizes_at_cap() {
        let mut snap = compute_snapshot();
        snap.pods[2].replicas = 5;
        snap.pods[2].nodes = vec!["W3".into(); 5];
        let d = heuristic_decide(&snap);
        assert_eq!(
            d.actions,
            vec![Action::VerticalScaling { pod: "p3".into(), cpu_limit: 0.6, mem_limit: 612.0 }]
        );
    }

    #[test]
    fn lower_violation_releases_replicas_then_limits_then_nothing() {
        let mut snap = compute_snapshot();
        snap.violation.kind = BreachKind::Lower;
        snap.violation.ema_s = 0.8;
        for p in &mut snap.pods {
            p.cpu_utilization = 0.5;
        }
        snap.pods[1].cpu_utilization = 0.2;
        snap.pods[1].replicas = 2;
        snap.pods[1].nodes = vec!["W2".into(), "W1".into()];
        let d = heuristic_decide(&snap);
        assert_eq!(d.source.category, IssueCategory::OverProvisioning);
        assert_eq!(
            d.actions,
            vec![Action::HorizontalScaling { pod: "p2".into(), replicas: 1 }]
        );

        snap.pods[1].replicas = 1;
        snap.pods[1].nodes = vec!["W2".into()];
        let d = heuristic_decide(&snap);
        assert_eq!(
            d.actions,
            vec![Action::VerticalScaling { pod: "p2".into(), cpu_limit: 0.2, mem_limit: 312.0 }]
        );

        snap.pods[1].cpu_limit = 0.2;
        let d = heuristic_decide(&snap);
        assert!(d.actions.is_empty());
        assert_eq!(d.source.category, IssueCategory::OverProvisioning);
    }

    #[test]
    fn deterministic_across_calls() {
        let snap = network_snapshot();
        assert_eq!(heuristic_decide(&snap), heuristic_decide(&snap));
        let snap2 = compute_snapshot();
        assert_eq!(heuristic_decide(&snap2).to_body(), heuristic_decide(&snap2).to_body());
    }
}
