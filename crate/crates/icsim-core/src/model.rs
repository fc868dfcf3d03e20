//! Cluster and network model: nodes, switch fabric, service chain, and the
//! mutable deployment state the control loop acts on.
//!
//! Conventions used throughout the crate:
//! * link capacities are Mb/s, latencies seconds, memory MiB, CPU cores;
//! * a link is an unordered switch pair, canonicalized via [`LinkKey`];
//! * hosts attach to exactly one switch and host pod replicas;
//! * the application is a linear chain `p_0 -> p_1 -> ... -> p_{K-1}`
//!   entered and left through the ingress host.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical unordered switch pair identifying a link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkKey(pub String, pub String);

impl LinkKey {
    pub fn new(a: &str, b: &str) -> Self {
        if a <= b {
            LinkKey(a.to_string(), b.to_string())
        } else {
            LinkKey(b.to_string(), a.to_string())
        }
    }

    /// Stable text form used as a map key in reports: `"A|B"`.
    pub fn label(&self) -> String {
        format!("{}|{}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    /// Schedulable CPU capacity in cores.
    pub cpu_capacity: f64,
    /// Schedulable memory in MiB.
    pub mem_capacity: f64,
    pub attached_switch: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub capacity_mbps: f64,
    /// One-way propagation delay in seconds.
    pub latency_s: f64,
    #[serde(default = "link_up")]
    pub up: bool,
}

fn link_up() -> bool {
    true
}

impl LinkSpec {
    pub fn key(&self) -> LinkKey {
        LinkKey::new(&self.a, &self.b)
    }
}

/// Static description of the continuum: compute nodes attached to a switch
/// fabric, plus the ingress host where requests enter and leave.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuumTopology {
    pub switches: Vec<String>,
    pub links: Vec<LinkSpec>,
    pub nodes: Vec<NodeSpec>,
    pub ingress_host: String,
}

impl ContinuumTopology {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn link(&self, key: &LinkKey) -> Option<&LinkSpec> {
        self.links.iter().find(|l| &l.key() == key)
    }

    /// Switch the given host (node) is attached to.
    pub fn attachment(&self, host: &str) -> Option<&str> {
        self.node(host).map(|n| n.attached_switch.as_str())
    }

    /// Up-link adjacency, switch -> sorted neighbor switches.
    pub fn adjacency(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut adj: BTreeMap<&str, Vec<&str>> =
            self.switches.iter().map(|s| (s.as_str(), Vec::new())).collect();
        for l in self.links.iter().filter(|l| l.up) {
            adj.entry(l.a.as_str()).or_default().push(l.b.as_str());
            adj.entry(l.b.as_str()).or_default().push(l.a.as_str());
        }
        for nbrs in adj.values_mut() {
            nbrs.sort_unstable();
            nbrs.dedup();
        }
        adj
    }
}

/// One stage of the service chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PodSpec {
    pub id: String,
    /// Position in the chain, 0-based and contiguous across the pod set.
    pub chain_index: usize,
    /// Initial CPU limit in cores.
    pub cpu_limit: f64,
    /// Initial memory limit in MiB.
    pub mem_limit: f64,
    /// CPU work one request costs, in core-seconds.
    pub work_demand: f64,
    /// Node this pod must stay on, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_node: Option<String>,
}

/// Current resource limits of a pod (vertical scaling changes these).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub cpu: f64,
    pub mem: f64,
}

/// Mutable deployment: replica placements (ordered, one node per replica)
/// and per-pod current limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentState {
    /// Pod id -> node of each replica, in creation order. Scale-in removes
    /// from the tail (newest first).
    pub placement: BTreeMap<String, Vec<String>>,
    pub limits: BTreeMap<String, Limits>,
}

impl DeploymentState {
    pub fn initial(pods: &[PodSpec], placement: BTreeMap<String, Vec<String>>) -> Self {
        let limits = pods
            .iter()
            .map(|p| (p.id.clone(), Limits { cpu: p.cpu_limit, mem: p.mem_limit }))
            .collect();
        DeploymentState { placement, limits }
    }

    pub fn replicas(&self, pod: &str) -> usize {
        self.placement.get(pod).map_or(0, Vec::len)
    }

    /// CPU and memory committed on `node` by current replica limits.
    pub fn committed(&self, node: &str) -> (f64, f64) {
        let mut cpu = 0.0;
        let mut mem = 0.0;
        for (pod, nodes) in &self.placement {
            let lim = self.limits[pod];
            let count = nodes.iter().filter(|n| n.as_str() == node).count() as f64;
            cpu += count * lim.cpu;
            mem += count * lim.mem;
        }
        (cpu, mem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Cpu,
    Mem,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown switch `{0}`")]
    UnknownSwitch(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("link {0}-{1} is a self loop")]
    SelfLoop(String, String),
    #[error("link {0}-{1} has non-positive capacity")]
    BadCapacity(String, String),
    #[error("link {0}-{1} has negative latency")]
    BadLatency(String, String),
    #[error("switch graph is not connected over up links")]
    Disconnected,
    #[error("pod `{0}` has invalid limits or work demand")]
    BadPod(String),
    #[error("chain indices are not a contiguous 0..K range")]
    BadChain,
    #[error("pod `{pod}` has no replicas")]
    EmptyPlacement { pod: String },
    #[error("pod `{pod}` pinned to `{pinned}` but placed on `{node}`")]
    PinViolation { pod: String, pinned: String, node: String },
    #[error("node `{node}` over capacity: {resource:?}")]
    OverCommitted { node: String, resource: Resource },
}

/// Checks structural invariants of the topology: unique ids, attachments and
/// link endpoints resolve, capacities positive, and the up-link switch graph
/// connected.
pub fn validate_topology(topo: &ContinuumTopology) -> Result<(), ModelError> {
    let mut seen = BTreeSet::new();
    for s in &topo.switches {
        if !seen.insert(s.clone()) {
            return Err(ModelError::DuplicateId(s.clone()));
        }
    }
    let switches: BTreeSet<&str> = topo.switches.iter().map(String::as_str).collect();

    let mut link_keys = BTreeSet::new();
    for l in &topo.links {
        if l.a == l.b {
            return Err(ModelError::SelfLoop(l.a.clone(), l.b.clone()));
        }
        for end in [&l.a, &l.b] {
            if !switches.contains(end.as_str()) {
                return Err(ModelError::UnknownSwitch(end.clone()));
            }
        }
        if !link_keys.insert(l.key()) {
            return Err(ModelError::DuplicateId(l.key().label()));
        }
        if l.capacity_mbps <= 0.0 {
            return Err(ModelError::BadCapacity(l.a.clone(), l.b.clone()));
        }
        if l.latency_s < 0.0 {
            return Err(ModelError::BadLatency(l.a.clone(), l.b.clone()));
        }
    }

    let mut node_ids = BTreeSet::new();
    for n in &topo.nodes {
        if !node_ids.insert(n.id.clone()) {
            return Err(ModelError::DuplicateId(n.id.clone()));
        }
        if !switches.contains(n.attached_switch.as_str()) {
            return Err(ModelError::UnknownSwitch(n.attached_switch.clone()));
        }
        if n.cpu_capacity <= 0.0 || n.mem_capacity <= 0.0 {
            return Err(ModelError::BadCapacity(n.id.clone(), "cpu/mem".into()));
        }
    }
    if !node_ids.contains(&topo.ingress_host) {
        return Err(ModelError::UnknownNode(topo.ingress_host.clone()));
    }

    // Connectivity over up links; singleton fabrics are trivially connected.
    if let Some(start) = topo.switches.first() {
        let adj = topo.adjacency();
        let mut visited = BTreeSet::new();
        let mut stack = vec![start.as_str()];
        while let Some(s) = stack.pop() {
            if visited.insert(s) {
                stack.extend(adj.get(s).into_iter().flatten());
            }
        }
        if visited.len() != topo.switches.len() {
            return Err(ModelError::Disconnected);
        }
    }
    Ok(())
}

/// Checks the chain definition: unique ids, contiguous chain indices,
/// positive limits, non-negative work.
pub fn validate_pods(pods: &[PodSpec], topo: &ContinuumTopology) -> Result<(), ModelError> {
    let mut ids = BTreeSet::new();
    let mut indices: Vec<usize> = Vec::new();
    for p in pods {
        if !ids.insert(p.id.clone()) {
            return Err(ModelError::DuplicateId(p.id.clone()));
        }
        if p.cpu_limit <= 0.0 || p.mem_limit <= 0.0 || p.work_demand < 0.0 {
            return Err(ModelError::BadPod(p.id.clone()));
        }
        if let Some(pin) = &p.pinned_node {
            if topo.node(pin).is_none() {
                return Err(ModelError::UnknownNode(pin.clone()));
            }
        }
        indices.push(p.chain_index);
    }
    indices.sort_unstable();
    if indices != (0..pods.len()).collect::<Vec<_>>() {
        return Err(ModelError::BadChain);
    }
    Ok(())
}

/// Checks a deployment against topology and pod specs: every pod has at least
/// one replica, replicas sit on known nodes, pins hold, and no node is over
/// committed by the current limits.
pub fn validate_state(
    state: &DeploymentState,
    pods: &[PodSpec],
    topo: &ContinuumTopology,
) -> Result<(), ModelError> {
    for p in pods {
        let nodes = state
            .placement
            .get(&p.id)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| ModelError::EmptyPlacement { pod: p.id.clone() })?;
        for node in nodes {
            if topo.node(node).is_none() {
                return Err(ModelError::UnknownNode(node.clone()));
            }
            if let Some(pin) = &p.pinned_node {
                if node != pin {
                    return Err(ModelError::PinViolation {
                        pod: p.id.clone(),
                        pinned: pin.clone(),
                        node: node.clone(),
                    });
                }
            }
        }
    }
    for n in &topo.nodes {
        let (cpu, mem) = state.committed(&n.id);
        if cpu > n.cpu_capacity + 1e-9 {
            return Err(ModelError::OverCommitted { node: n.id.clone(), resource: Resource::Cpu });
        }
        if mem > n.mem_capacity + 1e-9 {
            return Err(ModelError::OverCommitted { node: n.id.clone(), resource: Resource::Mem });
        }
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq)]
#[error("insufficient {resource:?} on `{node}`: residual {residual:.6}, requested {requested:.6}")]
pub struct CapacityError {
    pub node: String,
    pub resource: Resource,
    pub residual: f64,
    pub requested: f64,
}

/// Would `node` still fit `extra_cpu`/`extra_mem` on top of what the current
/// deployment commits? Admission control for placement and scaling.
pub fn capacity_check(
    topo: &ContinuumTopology,
    state: &DeploymentState,
    node: &str,
    extra_cpu: f64,
    extra_mem: f64,
) -> Result<(), CapacityError> {
    let spec = topo.node(node).unwrap_or_else(|| panic!("unknown node `{node}`"));
    let (cpu, mem) = state.committed(node);
    let free_cpu = spec.cpu_capacity - cpu;
    if extra_cpu > free_cpu + 1e-9 {
        return Err(CapacityError {
            node: node.to_string(),
            resource: Resource::Cpu,
            residual: free_cpu,
            requested: extra_cpu,
        });
    }
    let free_mem = spec.mem_capacity - mem;
    if extra_mem > free_mem + 1e-9 {
        return Err(CapacityError {
            node: node.to_string(),
            resource: Resource::Mem,
            residual: free_mem,
            requested: extra_mem,
        });
    }
    Ok(())
}

/// Directed host pair carrying application traffic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowId {
    pub src_host: String,
    pub dst_host: String,
}

impl FlowId {
    pub fn new(src: &str, dst: &str) -> Self {
        FlowId { src_host: src.to_string(), dst_host: dst.to_string() }
    }
}

/// Cross-node hops of the request journey under the current placement:
/// ingress -> stage 0 -> ... -> stage K-1 -> ingress. With multiple replicas
/// per stage every occurring node pair is a flow. Journey order, deduplicated,
/// pairs at the same stage ordered lexicographically. Same-node hops produce
/// no flow.
pub fn derive_flows(
    pods: &[PodSpec],
    state: &DeploymentState,
    topo: &ContinuumTopology,
) -> Vec<FlowId> {
    let mut chain: Vec<&PodSpec> = pods.iter().collect();
    chain.sort_by_key(|p| p.chain_index);

    let stage_nodes = |p: &PodSpec| -> Vec<String> {
        let mut v = state.placement.get(&p.id).cloned().unwrap_or_default();
        v.sort_unstable();
        v.dedup();
        v
    };

    let mut legs: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let ingress = vec![topo.ingress_host.clone()];
    if let Some(first) = chain.first() {
        legs.push((ingress.clone(), stage_nodes(first)));
    }
    for pair in chain.windows(2) {
        legs.push((stage_nodes(pair[0]), stage_nodes(pair[1])));
    }
    if let Some(last) = chain.last() {
        legs.push((stage_nodes(last), ingress));
    }

    let mut seen = BTreeSet::new();
    let mut flows = Vec::new();
    for (srcs, dsts) in legs {
        for s in &srcs {
            for d in &dsts {
                if s != d {
                    let f = FlowId::new(s, d);
                    if seen.insert(f.clone()) {
                        flows.push(f);
                    }
                }
            }
        }
    }
    flows
}
