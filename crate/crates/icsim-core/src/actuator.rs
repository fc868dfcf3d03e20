//! Applies corrective actions to the deployment and keeps the flow route
//! table consistent, playing the roles of both orchestrator and network
//! controller.
//!
//! Route selection is a deterministic total order: among simple paths over
//! up links, minimize (max link utilization, hop count, lexicographic
//! switch sequence). Congestion avoidance deliberately dominates path
//! length, so a longer clean detour beats a short congested hop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::decision::{Action, ActionBounds};
use crate::model::{
    capacity_check, derive_flows, ContinuumTopology, DeploymentState, FlowId, LinkKey, PodSpec,
};

/// Installed switch path per application flow. The version counter bumps on
/// every table change so audit logs can reference route generations.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTable {
    pub routes: BTreeMap<FlowId, Vec<String>>,
    pub version: u64,
}

impl RouteTable {
    pub fn path(&self, flow: &FlowId) -> Option<&[String]> {
        self.routes.get(flow).map(Vec::as_slice)
    }
}

/// Links along a switch path.
pub fn path_links(path: &[String]) -> Vec<LinkKey> {
    path.windows(2).map(|w| LinkKey::new(&w[0], &w[1])).collect()
}

/// Highest utilization over the path's links; 0 for a linkless path.
pub fn path_max_util(path: &[String], utils: &BTreeMap<LinkKey, f64>) -> f64 {
    path_links(path)
        .iter()
        .map(|k| utils.get(k).copied().unwrap_or(0.0))
        .fold(0.0, f64::max)
}

/// Best path from `src` to `dst` over up links excluding `avoid`, under the
/// order (max link utilization, hop count, lexicographic switch sequence).
/// `None` when no candidate subgraph connects the endpoints.
pub fn compute_route(
    topo: &ContinuumTopology,
    utils: &BTreeMap<LinkKey, f64>,
    src: &str,
    dst: &str,
    avoid: &BTreeSet<LinkKey>,
) -> Option<Vec<String>> {
    if !topo.switches.iter().any(|s| s == src) || !topo.switches.iter().any(|s| s == dst) {
        return None;
    }
    if src == dst {
        return Some(vec![src.to_string()]);
    }

    let candidates: Vec<(&str, &str, f64)> = topo
        .links
        .iter()
        .filter(|l| l.up && !avoid.contains(&l.key()))
        .map(|l| (l.a.as_str(), l.b.as_str(), utils.get(&l.key()).copied().unwrap_or(0.0)))
        .collect();

    let mut thresholds: Vec<f64> = candidates.iter().map(|&(_, _, u)| u).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    // The optimum's max utilization equals some link's utilization, so
    // scanning thresholds in ascending order finds it: the first subgraph
    // connecting the endpoints fixes the bottleneck value, BFS fixes the
    // hop count, and a greedy descent over distances fixes the lexicographic
    // tie-break (every admissible continuation has equal length).
    for &cap in &thresholds {
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for &(a, b, u) in &candidates {
            if u <= cap {
                adj.entry(a).or_default().push(b);
                adj.entry(b).or_default().push(a);
            }
        }
        for nbrs in adj.values_mut() {
            nbrs.sort_unstable();
        }

        let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
        dist.insert(dst, 0);
        let mut queue = VecDeque::from([dst]);
        while let Some(s) = queue.pop_front() {
            let d = dist[s];
            for &n in adj.get(s).into_iter().flatten() {
                if !dist.contains_key(n) {
                    dist.insert(n, d + 1);
                    queue.push_back(n);
                }
            }
        }
        let Some(&hops) = dist.get(src) else { continue };

        let mut path = vec![src.to_string()];
        let mut cur = src;
        for k in (0..hops).rev() {
            let next = adj[cur]
                .iter()
                .find(|n| dist.get(**n) == Some(&k))
                .expect("BFS distance admits a next hop");
            path.push(next.to_string());
            cur = next;
        }
        return Some(path);
    }
    None
}

/// Rebuilds the table for the current placement: derive the flow set, route
/// each flow between its endpoints' switches. Version bumps only if any
/// path actually changed.
pub fn recompute_all_routes(
    prev: &RouteTable,
    topo: &ContinuumTopology,
    pods: &[PodSpec],
    state: &DeploymentState,
    utils: &BTreeMap<LinkKey, f64>,
) -> RouteTable {
    let avoid = BTreeSet::new();
    let routes: BTreeMap<FlowId, Vec<String>> = derive_flows(pods, state, topo)
        .into_iter()
        .map(|f| {
            let s = topo.attachment(&f.src_host).expect("flow endpoints are known hosts");
            let d = topo.attachment(&f.dst_host).expect("flow endpoints are known hosts");
            let path =
                compute_route(topo, utils, s, d, &avoid).expect("up-link fabric is connected");
            (f, path)
        })
        .collect();
    let version = if routes == prev.routes { prev.version } else { prev.version + 1 };
    RouteTable { routes, version }
}

/// Route table for a fresh deployment.
pub fn initial_routes(
    topo: &ContinuumTopology,
    pods: &[PodSpec],
    state: &DeploymentState,
) -> RouteTable {
    let empty = RouteTable { routes: BTreeMap::new(), version: 0 };
    let t = recompute_all_routes(&empty, topo, pods, state, &BTreeMap::new());
    RouteTable { routes: t.routes, version: 0 }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Rejection {
    #[error("insufficient capacity: {0}")]
    InsufficientCapacity(String),
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("replica bounds: {0}")]
    ReplicaBounds(String),
    #[error("pod is pinned: {0}")]
    PinnedPod(String),
    #[error("limit bounds: {0}")]
    LimitBounds(String),
}

impl Rejection {
    /// Stable snake_case tag for event logs.
    pub fn kind(&self) -> &'static str {
        match self {
            Rejection::InsufficientCapacity(_) => "insufficient_capacity",
            Rejection::UnknownId(_) => "unknown_id",
            Rejection::InvalidPath(_) => "invalid_path",
            Rejection::ReplicaBounds(_) => "replica_bounds",
            Rejection::PinnedPod(_) => "pinned_pod",
            Rejection::LimitBounds(_) => "limit_bounds",
        }
    }
}

/// Everything `apply` needs besides the mutable state: static topology and
/// pod specs, action bounds, and the link utilizations steering any route
/// recomputation.
pub struct ApplyCtx<'a> {
    pub topo: &'a ContinuumTopology,
    pub pods: &'a [PodSpec],
    pub bounds: ActionBounds,
    pub utils: &'a BTreeMap<LinkKey, f64>,
}

impl ApplyCtx<'_> {
    fn pod(&self, id: &str) -> Result<&PodSpec, Rejection> {
        self.pods
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Rejection::UnknownId(format!("pod `{id}`")))
    }

    /// Feasible node with the most free CPU for one replica of `pod`,
    /// given limits in `state`. The ingress host only fronts traffic, so
    /// automatic picks skip it; ties go to the lexicographically smaller id.
    fn auto_pick_node(&self, state: &DeploymentState, pod: &PodSpec) -> Option<String> {
        let lim = state.limits[&pod.id];
        if let Some(pin) = &pod.pinned_node {
            return capacity_check(self.topo, state, pin, lim.cpu, lim.mem)
                .ok()
                .map(|_| pin.clone());
        }
        let mut best: Option<(f64, &str)> = None;
        for n in &self.topo.nodes {
            if n.id == self.topo.ingress_host {
                continue;
            }
            if capacity_check(self.topo, state, &n.id, lim.cpu, lim.mem).is_err() {
                continue;
            }
            let free = n.cpu_capacity - state.committed(&n.id).0;
            let better = match best {
                None => true,
                Some((bf, bid)) => free > bf + 1e-12 || (free > bf - 1e-12 && n.id.as_str() < bid),
            };
            if better {
                best = Some((free, n.id.as_str()));
            }
        }
        best.map(|(_, id)| id.to_string())
    }
}

fn validate_flow_path(
    ctx: &ApplyCtx,
    flow: &FlowId,
    path: &[String],
) -> Result<(), Rejection> {
    let src_sw = ctx
        .topo
        .attachment(&flow.src_host)
        .ok_or_else(|| Rejection::UnknownId(format!("host `{}`", flow.src_host)))?;
    let dst_sw = ctx
        .topo
        .attachment(&flow.dst_host)
        .ok_or_else(|| Rejection::UnknownId(format!("host `{}`", flow.dst_host)))?;
    if path.first().map(String::as_str) != Some(src_sw)
        || path.last().map(String::as_str) != Some(dst_sw)
    {
        return Err(Rejection::InvalidPath(format!(
            "path must run {src_sw} -> {dst_sw} for {} -> {}",
            flow.src_host, flow.dst_host
        )));
    }
    let mut seen = BTreeSet::new();
    for s in path {
        if !seen.insert(s) {
            return Err(Rejection::InvalidPath(format!("switch `{s}` repeats")));
        }
    }
    for pair in path.windows(2) {
        match ctx.topo.link(&LinkKey::new(&pair[0], &pair[1])) {
            Some(l) if l.up => {}
            Some(_) => {
                return Err(Rejection::InvalidPath(format!(
                    "link {}-{} is down",
                    pair[0], pair[1]
                )))
            }
            None => {
                return Err(Rejection::InvalidPath(format!(
                    "no link {}-{}",
                    pair[0], pair[1]
                )))
            }
        }
    }
    Ok(())
}

/// Applies one action. Returns the updated deployment and route table, or a
/// rejection with both inputs untouched: validation happens on scratch
/// copies, so a failed action cannot leave partial effects.
pub fn apply(
    action: &Action,
    ctx: &ApplyCtx,
    state: &DeploymentState,
    routes: &RouteTable,
) -> Result<(DeploymentState, RouteTable), Rejection> {
    match action {
        Action::ServicePlacement { pod, target_node } => {
            let spec = ctx.pod(pod)?;
            if ctx.topo.node(target_node).is_none() {
                return Err(Rejection::UnknownId(format!("node `{target_node}`")));
            }
            if let Some(pin) = &spec.pinned_node {
                if pin != target_node {
                    return Err(Rejection::PinnedPod(format!("`{pod}` stays on `{pin}`")));
                }
            }
            let mut next = state.clone();
            let replicas = next.placement.get_mut(pod).expect("validated state");
            let count = replicas.len();
            *replicas = vec![target_node.clone(); count];
            // Capacity check against a state where this pod's replicas are
            // already gone from their old nodes, so moves within a node and
            // swaps of its own usage stay feasible.
            let lim = next.limits[pod];
            let mut vacated = next.clone();
            vacated.placement.get_mut(pod).expect("validated state").clear();
            capacity_check(ctx.topo, &vacated, target_node, count as f64 * lim.cpu, count as f64 * lim.mem)
                .map_err(|e| Rejection::InsufficientCapacity(e.to_string()))?;
            let table = recompute_all_routes(routes, ctx.topo, ctx.pods, &next, ctx.utils);
            Ok((next, table))
        }
        Action::HorizontalScaling { pod, replicas } => {
            let spec = ctx.pod(pod)?;
            let target = *replicas as usize;
            if target < 1 || target > ctx.bounds.max_replicas as usize {
                return Err(Rejection::ReplicaBounds(format!(
                    "`{pod}` to {target}, allowed 1..={}",
                    ctx.bounds.max_replicas
                )));
            }
            let current = state.replicas(pod);
            if target == current {
                return Ok((state.clone(), routes.clone()));
            }
            let mut next = state.clone();
            if target < current {
                next.placement.get_mut(pod).expect("validated state").truncate(target);
            } else {
                for _ in current..target {
                    let node = ctx.auto_pick_node(&next, spec).ok_or_else(|| {
                        Rejection::InsufficientCapacity(format!(
                            "no node fits another replica of `{pod}`"
                        ))
                    })?;
                    next.placement.get_mut(pod).expect("validated state").push(node);
                }
            }
            let table = recompute_all_routes(routes, ctx.topo, ctx.pods, &next, ctx.utils);
            Ok((next, table))
        }
        Action::VerticalScaling { pod, cpu_limit, mem_limit } => {
            ctx.pod(pod)?;
            if *cpu_limit < ctx.bounds.cpu_floor - 1e-9 {
                return Err(Rejection::LimitBounds(format!(
                    "cpu_limit {cpu_limit} below floor {}",
                    ctx.bounds.cpu_floor
                )));
            }
            if *mem_limit <= 0.0 {
                return Err(Rejection::LimitBounds("mem_limit must be positive".into()));
            }
            let mut next = state.clone();
            let lim = next.limits.get_mut(pod).expect("validated state");
            lim.cpu = *cpu_limit;
            lim.mem = *mem_limit;
            for n in &ctx.topo.nodes {
                let (cpu, mem) = next.committed(&n.id);
                if cpu > n.cpu_capacity + 1e-9 || mem > n.mem_capacity + 1e-9 {
                    return Err(Rejection::InsufficientCapacity(format!(
                        "new limits of `{pod}` overflow node `{}`",
                        n.id
                    )));
                }
            }
            Ok((next, routes.clone()))
        }
        Action::FlowScheduling { src_host, dst_host, path } => {
            let flow = FlowId::new(src_host, dst_host);
            if !routes.routes.contains_key(&flow) {
                return Err(Rejection::UnknownId(format!(
                    "no active flow {src_host} -> {dst_host}"
                )));
            }
            validate_flow_path(ctx, &flow, path)?;
            if routes.path(&flow) == Some(path.as_slice()) {
                return Ok((state.clone(), routes.clone()));
            }
            let mut table = routes.clone();
            table.routes.insert(flow, path.clone());
            table.version += 1;
            Ok((state.clone(), table))
        }
    }
}
