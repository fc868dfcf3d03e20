//! The state snapshot frozen at violation detection and handed to whichever
//! decider is active. It is deliberately self-contained: topology, deployment,
//! active flows, recent monitoring windows and action bounds all travel in
//! one document, so a decider (or a person reading the event log) needs no
//! other context. Serialization is stable: keys are sorted, floats carry at
//! most six significant digits, and serialize -> parse -> serialize is the
//! identity on bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::actuator::RouteTable;
use crate::decision::ActionBounds;
use crate::model::{
    ContinuumTopology, DeploymentState, FlowId, LinkKey, LinkSpec, NodeSpec, PodSpec,
};
use crate::telemetry::{AggregateWindows, BreachKind, WindowMetrics};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationInfo {
    pub kind: BreachKind,
    pub ema_s: f64,
    pub upper_s: f64,
    pub lower_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: String,
    pub attached_switch: String,
    pub cpu_capacity: f64,
    pub mem_capacity: f64,
    pub cpu_committed: f64,
    pub mem_committed: f64,
    pub cpu_free: f64,
    pub mem_free: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkInfo {
    pub a: String,
    pub b: String,
    pub capacity_mbps: f64,
    pub latency_s: f64,
    pub up: bool,
    /// Utilization over the most recent monitoring window.
    pub utilization: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PodInfo {
    pub id: String,
    pub chain_index: usize,
    pub cpu_limit: f64,
    pub mem_limit_mib: f64,
    pub replicas: usize,
    pub nodes: Vec<String>,
    pub cpu_utilization: f64,
    pub mem_used_mib: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowInfo {
    pub src_host: String,
    pub dst_host: String,
    pub path: Vec<String>,
    /// Highest last-window utilization among the links the path crosses.
    pub max_link_utilization: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub time_s: f64,
    pub violation: ViolationInfo,
    pub ingress_host: String,
    pub switches: Vec<String>,
    pub nodes: Vec<NodeInfo>,
    pub links: Vec<LinkInfo>,
    pub pods: Vec<PodInfo>,
    pub flows: Vec<FlowInfo>,
    /// Recent complete windows plus the partial window the breach fell in.
    pub windows: Vec<WindowMetrics>,
    /// True when the breach came too early for the full pre-breach history.
    pub short_history: bool,
    pub route_version: u64,
    pub bounds: ActionBounds,
}

impl StateSnapshot {
    /// Freezes the current world. `aggregate` must be the window set computed
    /// at detection time; its last window supplies every "current" figure.
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        time_s: f64,
        violation: ViolationInfo,
        topo: &ContinuumTopology,
        pods: &[PodSpec],
        state: &DeploymentState,
        routes: &RouteTable,
        aggregate: &AggregateWindows,
        bounds: ActionBounds,
    ) -> StateSnapshot {
        let last = aggregate.windows.last();
        let link_util = |key: &LinkKey| -> f64 {
            last.and_then(|w| w.link_util.get(&key.label())).copied().unwrap_or(0.0)
        };

        let nodes = topo
            .nodes
            .iter()
            .map(|n| {
                let (cpu, mem) = state.committed(&n.id);
                NodeInfo {
                    id: n.id.clone(),
                    attached_switch: n.attached_switch.clone(),
                    cpu_capacity: n.cpu_capacity,
                    mem_capacity: n.mem_capacity,
                    cpu_committed: cpu,
                    mem_committed: mem,
                    cpu_free: n.cpu_capacity - cpu,
                    mem_free: n.mem_capacity - mem,
                }
            })
            .collect();

        let links = topo
            .links
            .iter()
            .map(|l| LinkInfo {
                a: l.a.clone(),
                b: l.b.clone(),
                capacity_mbps: l.capacity_mbps,
                latency_s: l.latency_s,
                up: l.up,
                utilization: link_util(&l.key()),
            })
            .collect();

        let pod_infos = pods
            .iter()
            .map(|p| {
                let nodes = state.placement.get(&p.id).cloned().unwrap_or_default();
                let lim = state.limits.get(&p.id).copied().unwrap_or(crate::model::Limits {
                    cpu: p.cpu_limit,
                    mem: p.mem_limit,
                });
                PodInfo {
                    id: p.id.clone(),
                    chain_index: p.chain_index,
                    cpu_limit: lim.cpu,
                    mem_limit_mib: lim.mem,
                    replicas: nodes.len(),
                    nodes,
                    cpu_utilization: last
                        .and_then(|w| w.pod_cpu_util.get(&p.id))
                        .copied()
                        .unwrap_or(0.0),
                    mem_used_mib: last
                        .and_then(|w| w.pod_mem_used_mib.get(&p.id))
                        .copied()
                        .unwrap_or(0.0),
                }
            })
            .collect();

        let flows = routes
            .routes
            .iter()
            .map(|(flow, path)| {
                let max = crate::actuator::path_links(path)
                    .iter()
                    .map(|k| link_util(k))
                    .fold(0.0, f64::max);
                FlowInfo {
                    src_host: flow.src_host.clone(),
                    dst_host: flow.dst_host.clone(),
                    path: path.clone(),
                    max_link_utilization: max,
                }
            })
            .collect();

        StateSnapshot {
            time_s,
            violation,
            ingress_host: topo.ingress_host.clone(),
            switches: topo.switches.clone(),
            nodes,
            links,
            pods: pod_infos,
            flows,
            windows: aggregate.windows.clone(),
            short_history: aggregate.short_history,
            route_version: routes.version,
            bounds,
        }
    }

    /// Rebuilds the topology the snapshot describes; route computations on it
    /// agree with the live engine because links carry the same up/down state.
    pub fn topology(&self) -> ContinuumTopology {
        ContinuumTopology {
            switches: self.switches.clone(),
            links: self
                .links
                .iter()
                .map(|l| LinkSpec {
                    a: l.a.clone(),
                    b: l.b.clone(),
                    capacity_mbps: l.capacity_mbps,
                    latency_s: l.latency_s,
                    up: l.up,
                })
                .collect(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    id: n.id.clone(),
                    cpu_capacity: n.cpu_capacity,
                    mem_capacity: n.mem_capacity,
                    attached_switch: n.attached_switch.clone(),
                })
                .collect(),
            ingress_host: self.ingress_host.clone(),
        }
    }

    /// Last-window link utilizations keyed for route computation.
    pub fn link_utils(&self) -> BTreeMap<LinkKey, f64> {
        self.links.iter().map(|l| (LinkKey::new(&l.a, &l.b), l.utilization)).collect()
    }

    pub fn pod(&self, id: &str) -> Option<&PodInfo> {
        self.pods.iter().find(|p| p.id == id)
    }

    pub fn flow(&self, src: &str, dst: &str) -> Option<&FlowInfo> {
        self.flows.iter().find(|f| f.src_host == src && f.dst_host == dst)
    }

    pub fn flow_id(info: &FlowInfo) -> FlowId {
        FlowId::new(&info.src_host, &info.dst_host)
    }

    pub fn to_stable_json(&self) -> String {
        crate::jsonfmt::to_stable_string(self).expect("snapshot serializes")
    }

    pub fn to_stable_json_pretty(&self) -> String {
        crate::jsonfmt::to_stable_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<StateSnapshot, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::initial_routes;
    use crate::model::Limits;
    use crate::telemetry::{TelemetryConfig, TelemetryLog};

    fn topo() -> ContinuumTopology {
        ContinuumTopology {
            switches: vec!["S1".into(), "S2".into(), "S3".into(), "S4".into()],
            links: vec![
                link("S1", "S2"),
                link("S1", "S3"),
                link("S2", "S3"),
                link("S2", "S4"),
                link("S3", "S4"),
            ],
            nodes: vec![
                node("M", "S2"),
                node("W1", "S2"),
                node("W2", "S4"),
                node("W3", "S3"),
            ],
            ingress_host: "M".into(),
        }
    }

    fn link(a: &str, b: &str) -> LinkSpec {
        LinkSpec { a: a.into(), b: b.into(), capacity_mbps: 100.0, latency_s: 0.001, up: true }
    }

    fn node(id: &str, sw: &str) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            cpu_capacity: 32.0,
            mem_capacity: 131072.0,
            attached_switch: sw.into(),
        }
    }

    fn pods() -> Vec<PodSpec> {
        ["p1", "p2", "p3", "p4"]
            .iter()
            .enumerate()
            .map(|(i, id)| PodSpec {
                id: (*id).into(),
                chain_index: i,
                cpu_limit: if i == 2 { 0.5 } else { 0.3 },
                mem_limit: if i == 2 { 512.0 } else { 312.0 },
                work_demand: 0.1,
                pinned_node: None,
            })
            .collect()
    }

    fn state() -> DeploymentState {
        DeploymentState {
            placement: [
                ("p1".to_string(), vec!["W1".to_string()]),
                ("p2".to_string(), vec!["W2".to_string()]),
                ("p3".to_string(), vec!["W3".to_string()]),
                ("p4".to_string(), vec!["W3".to_string()]),
            ]
            .into(),
            limits: [
                ("p1".to_string(), Limits { cpu: 0.3, mem: 312.0 }),
                ("p2".to_string(), Limits { cpu: 0.3, mem: 312.0 }),
                ("p3".to_string(), Limits { cpu: 0.5, mem: 512.0 }),
                ("p4".to_string(), Limits { cpu: 0.3, mem: 312.0 }),
            ]
            .into(),
        }
    }

    fn capture_at(t: f64) -> StateSnapshot {
        let topo = topo();
        let pods = pods();
        let state = state();
        let routes = initial_routes(&topo, &pods, &state);
        let mut log = TelemetryLog::new(TelemetryConfig {
            window_len_s: 10.0,
            windows_before_breach: 3,
            cpu_duty: 0.65,
        });
        for p in &pods {
            log.set_replicas(&p.id, &state.placement[&p.id], 0.0);
        }
        log.record_busy("p3", "W3", 0.5, 0.0, t);
        log.record_transfer(&LinkKey::new("S2", "S4"), 1.0, 3.99752);
        let agg = log.aggregate(t, &topo, &state);
        StateSnapshot::capture(
            t,
            ViolationInfo { kind: BreachKind::Upper, ema_s: 3.2, upper_s: 3.0, lower_s: 1.0 },
            &topo,
            &pods,
            &state,
            &routes,
            &agg,
            ActionBounds { max_replicas: 5, cpu_floor: 0.2 },
        )
    }

    #[test]
    fn counts_match_the_described_world() {
        let snap = capture_at(36.0);
        assert_eq!(snap.nodes.len(), 4);
        assert_eq!(snap.pods.len(), 4);
        assert_eq!(snap.links.len(), 5);
        assert_eq!(snap.flows.len(), 4);
        assert!(!snap.short_history);
        // Three complete windows plus the partial one the breach fell in.
        assert_eq!(snap.windows.len(), 4);
        assert_eq!(snap.windows.last().unwrap().index, 3);
    }

    #[test]
    fn early_breach_is_flagged_short() {
        let snap = capture_at(14.0);
        assert!(snap.short_history);
        assert_eq!(snap.windows.len(), 2);
    }

    #[test]
    fn serialization_is_a_byte_fixed_point() {
        let snap = capture_at(36.0);
        let s1 = snap.to_stable_json();
        let back = StateSnapshot::from_json(&s1).unwrap();
        let s2 = back.to_stable_json();
        assert_eq!(s1, s2);
        let pretty = snap.to_stable_json_pretty();
        let back2 = StateSnapshot::from_json(&pretty).unwrap();
        assert_eq!(back2.to_stable_json(), s1);
    }

    #[test]
    fn topology_round_trips_for_route_computation() {
        let snap = capture_at(36.0);
        let topo = snap.topology();
        assert_eq!(topo.switches.len(), 4);
        assert_eq!(topo.links.len(), 5);
        assert_eq!(topo.ingress_host, "M");
        let utils = snap.link_utils();
        assert_eq!(utils.len(), 5);
        // Busy p3 means a nonzero utilization on some figure in the last
        // window, and node data carries free capacity for placement logic.
        let w3 = snap.nodes.iter().find(|n| n.id == "W3").unwrap();
        assert!((w3.cpu_committed - 0.8).abs() < 1e-12);
        assert!((w3.cpu_free - 31.2).abs() < 1e-12);
        let p3 = snap.pod("p3").unwrap();
        assert_eq!(p3.replicas, 1);
        assert!(p3.cpu_utilization > 0.0);
    }

    #[test]
    fn flows_expose_worst_link_on_path() {
        let snap = capture_at(36.0);
        let f = snap.flow("W1", "W2").unwrap();
        assert_eq!(f.path, vec!["S2".to_string(), "S4".to_string()]);
        assert!(f.max_link_utilization >= 0.0);
        // Co-attached ingress hop has an empty link set.
        let co = snap.flow("M", "W1").unwrap();
        assert_eq!(co.path, vec!["S2".to_string()]);
        assert_eq!(co.max_link_utilization, 0.0);
    }
}
