//! Deterministic discrete-event engine that plays a scenario forward.
//!
//! A single binary heap drives everything: closed-loop users, payload
//! transfers, replica service queues, background traffic windows, link
//! failures, the management loop's consultation delays and the autoscaler
//! grid. Event order is total (time, then insertion sequence), maps are
//! ordered, and the only randomness is the think-time jitter drawn from a
//! counter-based generator seeded by the scenario, so a run is a pure
//! function of its inputs.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use serde_json::json;

use crate::actuator::{
    apply, compute_route, initial_routes, path_links, ApplyCtx, RouteTable,
};
use crate::decision::hpa::{HpaBaseline, EVAL_INTERVAL_S, UTIL_WINDOW_S};
use crate::decision::Action;
use crate::mano::{ApplyReport, EventLog, Mano, ResolveOutcome, WorldView};
use crate::model::{ContinuumTopology, DeploymentState, FlowId, LinkKey, LinkSpec};
use crate::scenario::{QueueingMode, Scenario};
use crate::telemetry::EmaState;
use crate::telemetry::TelemetryLog;

/// Bandwidth a flow still gets on a saturated or failed link. Keeping it
/// above zero turns outages into crawling transfers instead of lost work.
pub const RESIDUAL_FLOOR_MBPS: f64 = 0.1;

/// Work seconds one stage needs divided by the CPU limit its replica holds
/// when service begins.
pub fn service_time(work_demand: f64, cpu_limit: f64) -> f64 {
    assert!(cpu_limit > 0.0, "cpu limit must be positive");
    work_demand / cpu_limit
}

/// Bandwidth left for application payloads on a link at one instant.
pub fn residual_mbps(link: &LinkSpec, background_mbps: f64) -> f64 {
    if !link.up {
        return RESIDUAL_FLOOR_MBPS;
    }
    (link.capacity_mbps - background_mbps).max(RESIDUAL_FLOOR_MBPS)
}

/// One background traffic window pinned to a link.
#[derive(Debug, Clone)]
pub struct BackgroundWindow {
    pub link: LinkKey,
    pub rate_mbps: f64,
    pub from_s: f64,
    pub until_s: f64,
}

/// Total background rate crossing `link` at time `t`.
pub fn background_mbps(bg: &[BackgroundWindow], link: &LinkKey, t: f64) -> f64 {
    bg.iter()
        .filter(|w| &w.link == link && w.from_s <= t && t < w.until_s)
        .map(|w| w.rate_mbps)
        .sum()
}

/// Time for one payload to traverse a switch path, evaluated against the
/// residual bandwidth each link has when the transfer starts, plus per-link
/// propagation latency. A path without links (same switch) costs nothing.
pub fn transfer_time(
    topo: &ContinuumTopology,
    path: &[String],
    bg: &[BackgroundWindow],
    payload_megabits: f64,
    t: f64,
) -> f64 {
    let mut total = 0.0;
    for key in path_links(path) {
        let link = topo.link(&key).expect("path uses known links");
        total += payload_megabits / residual_mbps(link, background_mbps(bg, &key, t));
        total += link.latency_s;
    }
    total
}

/// Per-pod committed resources (replicas times limit) at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourcePoint {
    pub time_s: f64,
    /// Pod id -> (CPU cores, memory MiB) committed across its replicas.
    pub committed: BTreeMap<String, (f64, f64)>,
}

/// One completed request, in completion order.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: u64,
    pub user: u64,
    pub arrival: f64,
    pub completion: f64,
    pub rt: f64,
    pub queue_s: f64,
    pub service_s: f64,
    pub transfer_s: f64,
    /// Smoothed response time right after this completion folded in.
    pub ema_after: f64,
}

/// Who closes the loop during the run.
pub enum Control {
    /// Intent-driven loop around a pluggable decision maker.
    Intent(Box<Mano>),
    /// Threshold autoscaler baseline; the intent loop stays off.
    Hpa(HpaBaseline),
}

impl Control {
    pub fn name(&self) -> String {
        match self {
            Control::Intent(m) => m.decider_name(),
            Control::Hpa(h) => h.name(),
        }
    }
}

/// Everything a finished run leaves behind.
pub struct RunResult {
    pub scenario: String,
    pub decider: String,
    pub seed: u64,
    pub duration_s: f64,
    pub requests: Vec<RequestRecord>,
    pub log: EventLog,
    pub telemetry: TelemetryLog,
    /// (completion time, smoothed value) per completed request.
    pub ema_series: Vec<(f64, f64)>,
    /// Committed resources at start and after every deployment change.
    pub resource_series: Vec<ResourcePoint>,
    pub admitted: u64,
    pub completed: u64,
    pub violations: usize,
    pub state: DeploymentState,
    pub routes: RouteTable,
    pub topo: ContinuumTopology,
}

enum Ev {
    Phase { index: usize },
    Spawn { phase: usize },
    UserReady { user: usize },
    TransferDone { req: usize },
    ServiceDone { req: usize, pod: String, slot: usize, node: String, cpu_limit: f64, started: f64 },
    PsDeparture { pod: String, slot: usize, gen: u64 },
    BackgroundStart { index: usize },
    LinkChange { index: usize },
    DecisionDue,
    HpaEval,
}

struct Entry {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // Reversed so the std max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct User {
    retired: bool,
}

struct Req {
    user: usize,
    arrival: f64,
    stage: usize,
    host: String,
    dest: Option<(String, usize)>,
    arrived_at_server: f64,
    queue_s: f64,
    service_s: f64,
    transfer_s: f64,
    done: bool,
}

struct PsJob {
    req: usize,
    remaining: f64,
}

#[derive(Default)]
struct Server {
    queue: VecDeque<usize>,
    /// Request currently in service (FIFO discipline).
    busy: Option<usize>,
    jobs: Vec<PsJob>,
    ps_last: f64,
    ps_gen: u64,
    /// Open busy interval (start, node) while any job is present (PS).
    busy_since: Option<(f64, String)>,
}

struct Engine<'a> {
    sc: &'a Scenario,
    chain: Vec<String>,
    work: BTreeMap<String, f64>,
    topo: ContinuumTopology,
    state: DeploymentState,
    routes: RouteTable,
    telemetry: TelemetryLog,
    ema: EmaState,
    control: Control,
    bg: Vec<BackgroundWindow>,
    payload_mb: f64,
    duration: f64,
    now: f64,
    heap: BinaryHeap<Entry>,
    seq: u64,
    ps_gen_counter: u64,
    log: EventLog,
    servers: BTreeMap<String, Vec<Server>>,
    rr: BTreeMap<String, u64>,
    rng: ChaCha12Rng,
    users: Vec<User>,
    reqs: Vec<Req>,
    records: Vec<RequestRecord>,
    ema_series: Vec<(f64, f64)>,
    resource_series: Vec<ResourcePoint>,
    admitted: u64,
    completed: u64,
    current_phase: usize,
    spawn_budget: usize,
}

/// Plays the scenario to its horizon and returns the trace.
pub fn run(sc: &Scenario, control: Control) -> RunResult {
    Engine::new(sc, control).run()
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, control: Control) -> Engine<'a> {
        let mut chain: Vec<&crate::model::PodSpec> = sc.pods.iter().collect();
        chain.sort_by_key(|p| p.chain_index);
        let work = sc.pods.iter().map(|p| (p.id.clone(), p.work_demand)).collect();
        let state = sc.initial_state();
        let routes = initial_routes(&sc.topology, &sc.pods, &state);
        let mut telemetry = TelemetryLog::new(sc.telemetry);
        for (pod, nodes) in &state.placement {
            telemetry.set_replicas(pod, nodes, 0.0);
        }
        let servers = state
            .placement
            .iter()
            .map(|(pod, nodes)| {
                (pod.clone(), (0..nodes.len()).map(|_| Server::default()).collect())
            })
            .collect();
        let bg = sc
            .background_events
            .iter()
            .flat_map(|ev| {
                ev.flows.iter().map(|f| BackgroundWindow {
                    link: LinkKey::new(&f.a, &f.b),
                    rate_mbps: f.rate_mbps,
                    from_s: ev.at_s,
                    until_s: ev.until_s,
                })
            })
            .collect();
        let initial = ResourcePoint { time_s: 0.0, committed: committed_map(&state) };
        Engine {
            chain: chain.into_iter().map(|p| p.id.clone()).collect(),
            work,
            topo: sc.topology.clone(),
            state,
            routes,
            telemetry,
            ema: EmaState::new(sc.intent.alpha),
            control,
            bg,
            payload_mb: sc.load.payload_kb * 8.0 / 1000.0,
            duration: sc.duration(),
            now: 0.0,
            heap: BinaryHeap::new(),
            seq: 0,
            ps_gen_counter: 0,
            log: EventLog::new(),
            servers,
            rr: BTreeMap::new(),
            rng: ChaCha12Rng::seed_from_u64(sc.seed),
            users: Vec::new(),
            reqs: Vec::new(),
            records: Vec::new(),
            ema_series: Vec::new(),
            resource_series: vec![initial],
            admitted: 0,
            completed: 0,
            current_phase: 0,
            spawn_budget: 0,
            sc,
        }
    }

    fn schedule(&mut self, time: f64, ev: Ev) {
        self.heap.push(Entry { time, seq: self.seq, ev });
        self.seq += 1;
    }

    fn uniform(&mut self) -> f64 {
        // 53 uniformly random mantissa bits in [0, 1).
        (self.rng.next_u64() >> 11) as f64 * 2f64.powi(-53)
    }

    fn run(mut self) -> RunResult {
        // The deployment block lets reports rebuild the committed-resource
        // timeline from the event stream alone.
        let deployment = deployment_json(&self.state);
        self.log.push(
            0.0,
            "run_started",
            json!({
                "scenario": self.sc.name,
                "decider": self.control.name(),
                "seed": self.sc.seed,
                "duration_s": self.duration,
                "upper_s": self.sc.intent.upper_s,
                "lower_s": self.sc.intent.lower_s,
                "deployment": deployment,
            }),
        );
        let mut start = 0.0;
        for (i, phase) in self.sc.load.phases.iter().enumerate() {
            self.schedule(start, Ev::Phase { index: i });
            start += phase.duration_s;
        }
        for i in 0..self.sc.background_events.len() {
            self.schedule(self.sc.background_events[i].at_s, Ev::BackgroundStart { index: i });
        }
        for i in 0..self.sc.link_events.len() {
            self.schedule(self.sc.link_events[i].at_s, Ev::LinkChange { index: i });
        }
        if matches!(self.control, Control::Hpa(_)) {
            self.schedule(EVAL_INTERVAL_S, Ev::HpaEval);
        }

        while let Some(entry) = self.heap.pop() {
            if entry.time > self.duration {
                break;
            }
            self.now = entry.time;
            self.dispatch(entry.ev);
        }

        let open = self.admitted - self.completed;
        self.log.push(
            self.duration,
            "run_finished",
            json!({"admitted": self.admitted, "completed": self.completed, "open": open}),
        );
        debug_assert_eq!(open as usize, self.reqs.iter().filter(|r| !r.done).count());

        let violations = match &self.control {
            Control::Intent(m) => m.violations(),
            Control::Hpa(_) => 0,
        };
        RunResult {
            scenario: self.sc.name.clone(),
            decider: self.control.name(),
            seed: self.sc.seed,
            duration_s: self.duration,
            requests: self.records,
            log: self.log,
            telemetry: self.telemetry,
            ema_series: self.ema_series,
            resource_series: self.resource_series,
            admitted: self.admitted,
            completed: self.completed,
            violations,
            state: self.state,
            routes: self.routes,
            topo: self.topo,
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Phase { index } => self.handle_phase(index),
            Ev::Spawn { phase } => self.handle_spawn(phase),
            Ev::UserReady { user } => {
                if !self.users[user].retired {
                    self.admit(user);
                }
            }
            Ev::TransferDone { req } => self.arrive(req),
            Ev::ServiceDone { req, pod, slot, node, cpu_limit, started } => {
                self.handle_service_done(req, pod, slot, node, cpu_limit, started)
            }
            Ev::PsDeparture { pod, slot, gen } => self.handle_ps_departure(&pod, slot, gen),
            Ev::BackgroundStart { index } => self.handle_background(index),
            Ev::LinkChange { index } => self.handle_link_change(index),
            Ev::DecisionDue => self.handle_decision_due(),
            Ev::HpaEval => self.handle_hpa_eval(),
        }
    }

    fn handle_phase(&mut self, index: usize) {
        let target = self.sc.load.phases[index].users as usize;
        self.log.push(self.now, "phase_change", json!({"phase": index, "users": target}));
        self.current_phase = index;
        let active: Vec<usize> =
            (0..self.users.len()).filter(|&u| !self.users[u].retired).collect();
        if target > active.len() {
            self.spawn_budget = target - active.len();
            let interval = 1.0 / self.sc.load.spawn_rate_per_s;
            for k in 0..self.spawn_budget {
                self.schedule(self.now + k as f64 * interval, Ev::Spawn { phase: index });
            }
        } else {
            self.spawn_budget = 0;
            // Newest users leave first; whatever they have in flight finishes.
            for &u in active.iter().rev().take(active.len() - target) {
                self.users[u].retired = true;
            }
        }
    }

    fn handle_spawn(&mut self, phase: usize) {
        if phase != self.current_phase || self.spawn_budget == 0 {
            return; // a later phase superseded this ramp
        }
        self.spawn_budget -= 1;
        self.users.push(User { retired: false });
        self.admit(self.users.len() - 1);
    }

    fn admit(&mut self, user: usize) {
        let id = self.reqs.len();
        self.reqs.push(Req {
            user,
            arrival: self.now,
            stage: 0,
            host: self.topo.ingress_host.clone(),
            dest: None,
            arrived_at_server: 0.0,
            queue_s: 0.0,
            service_s: 0.0,
            transfer_s: 0.0,
            done: false,
        });
        self.admitted += 1;
        self.begin_hop(id);
    }

    /// Sends the request toward its next stage, or back to the ingress once
    /// the chain is done. The serving replica is picked round-robin when the
    /// transfer starts.
    fn begin_hop(&mut self, id: usize) {
        let stage = self.reqs[id].stage;
        if stage < self.chain.len() {
            let pod = self.chain[stage].clone();
            let n = self.state.replicas(&pod);
            debug_assert!(n > 0, "every chain stage keeps at least one replica");
            let ctr = self.rr.entry(pod.clone()).or_insert(0);
            let slot = (*ctr % n as u64) as usize;
            *ctr += 1;
            let dest = self.state.placement[&pod][slot].clone();
            self.reqs[id].dest = Some((pod, slot));
            self.transfer(id, dest);
        } else {
            self.reqs[id].dest = None;
            let ingress = self.topo.ingress_host.clone();
            self.transfer(id, ingress);
        }
    }

    fn transfer(&mut self, id: usize, dest: String) {
        let src = self.reqs[id].host.clone();
        self.reqs[id].host = dest.clone();
        if src == dest {
            self.arrive(id);
            return;
        }
        let flow = FlowId::new(&src, &dest);
        let path: Vec<String> = match self.routes.path(&flow) {
            Some(p) => p.to_vec(),
            // A request already in flight when placement changed can start a
            // hop no installed flow covers; route it fresh over up links.
            None => {
                let a = self.topo.attachment(&src).expect("known src host").to_string();
                let b = self.topo.attachment(&dest).expect("known dst host").to_string();
                compute_route(&self.topo, &BTreeMap::new(), &a, &b, &BTreeSet::new())
                    .expect("switch fabric stays connected")
            }
        };
        for key in path_links(&path) {
            self.telemetry.record_transfer(&key, self.now, self.payload_mb);
        }
        let dur = transfer_time(&self.topo, &path, &self.bg, self.payload_mb, self.now);
        self.reqs[id].transfer_s += dur;
        if dur == 0.0 {
            self.arrive(id);
        } else {
            self.schedule(self.now + dur, Ev::TransferDone { req: id });
        }
    }

    fn arrive(&mut self, id: usize) {
        let Some((pod, slot)) = self.reqs[id].dest.clone() else {
            self.complete(id);
            return;
        };
        // The bank may have shrunk while the payload was in flight.
        let n = self.servers[&pod].len();
        let slot = slot % n;
        self.reqs[id].dest = Some((pod.clone(), slot));
        self.reqs[id].arrived_at_server = self.now;
        match self.sc.queueing {
            QueueingMode::Fifo => {
                let server = &self.servers[&pod][slot];
                if server.busy.is_none() && server.queue.is_empty() {
                    self.start_service(&pod, slot, id);
                } else {
                    self.servers.get_mut(&pod).unwrap()[slot].queue.push_back(id);
                }
            }
            QueueingMode::ProcessorSharing => self.ps_arrive(&pod, slot, id),
        }
    }

    fn start_service(&mut self, pod: &str, slot: usize, id: usize) {
        let node = self.state.placement[pod][slot].clone();
        let limit = self.state.limits[pod].cpu;
        let st = service_time(self.work[pod], limit);
        let r = &mut self.reqs[id];
        r.queue_s += self.now - r.arrived_at_server;
        r.service_s += st;
        self.servers.get_mut(pod).unwrap()[slot].busy = Some(id);
        self.schedule(
            self.now + st,
            Ev::ServiceDone {
                req: id,
                pod: pod.to_string(),
                slot,
                node,
                cpu_limit: limit,
                started: self.now,
            },
        );
    }

    fn handle_service_done(
        &mut self,
        req: usize,
        pod: String,
        slot: usize,
        node: String,
        cpu_limit: f64,
        started: f64,
    ) {
        self.telemetry.record_busy(&pod, &node, cpu_limit, started, self.now);
        // The slot may have been scaled away or re-created mid-service; only
        // a server still waiting on this exact request frees up and pulls.
        let mut next = None;
        if let Some(server) = self.servers.get_mut(&pod).and_then(|b| b.get_mut(slot)) {
            if server.busy == Some(req) {
                server.busy = None;
                next = server.queue.pop_front();
            }
        }
        if let Some(n) = next {
            self.start_service(&pod, slot, n);
        }
        self.reqs[req].stage += 1;
        self.begin_hop(req);
    }

    fn complete(&mut self, id: usize) {
        let (user, arrival, breakdown) = {
            let r = &mut self.reqs[id];
            r.done = true;
            (r.user, r.arrival, (r.queue_s, r.service_s, r.transfer_s))
        };
        let rt = self.now - arrival;
        debug_assert!(
            (breakdown.0 + breakdown.1 + breakdown.2 - rt).abs() < 1e-9,
            "queue + service + transfer must equal the response time"
        );
        self.completed += 1;
        self.telemetry.record_request(self.now, rt);
        let ema_after = self.ema.observe(rt);
        self.ema_series.push((self.now, ema_after));
        self.records.push(RequestRecord {
            id: id as u64 + 1,
            user: user as u64 + 1,
            arrival,
            completion: self.now,
            rt,
            queue_s: breakdown.0,
            service_s: breakdown.1,
            transfer_s: breakdown.2,
            ema_after,
        });

        let mut due = None;
        if let Control::Intent(mano) = &mut self.control {
            if let Some(kind) = mano.watch(self.now, &self.ema) {
                let world = WorldView {
                    topo: &self.topo,
                    pods: &self.sc.pods,
                    state: &self.state,
                    routes: &self.routes,
                    telemetry: &self.telemetry,
                };
                due = Some(mano.trigger(self.now, kind, ema_after, &world, &mut self.log));
            }
        }
        if let Some(at) = due {
            self.schedule(at, Ev::DecisionDue);
        }

        if !self.users[user].retired {
            let jitter = (2.0 * self.uniform() - 1.0) * self.sc.load.think_jitter_s;
            let think = (self.sc.load.think_time_s + jitter).max(0.0);
            self.schedule(self.now + think, Ev::UserReady { user });
        }
    }

    fn handle_background(&mut self, index: usize) {
        let ev = self.sc.background_events[index].clone();
        let mut flows = Vec::new();
        for f in &ev.flows {
            let key = LinkKey::new(&f.a, &f.b);
            self.telemetry.register_background(key.clone(), f.rate_mbps, ev.at_s, ev.until_s);
            flows.push(json!({"link": key.label(), "rate_mbps": f.rate_mbps}));
        }
        self.log.push(
            self.now,
            "background_injection",
            json!({"until_s": ev.until_s, "flows": flows}),
        );
    }

    fn handle_link_change(&mut self, index: usize) {
        let ev = self.sc.link_events[index].clone();
        let key = LinkKey::new(&ev.a, &ev.b);
        for l in &mut self.topo.links {
            if l.key() == key {
                l.up = ev.up;
            }
        }
        self.log.push(self.now, "link_event", json!({"link": key.label(), "up": ev.up}));
    }

    fn handle_decision_due(&mut self) {
        if self.sc.queueing == QueueingMode::ProcessorSharing {
            // Settle every sharing clock before limits can change under it.
            self.ps_touch_all();
        }
        let outcome = {
            let Control::Intent(mano) = &mut self.control else { return };
            if !mano.in_flight() {
                return;
            }
            mano.resolve(
                self.now,
                &self.topo,
                &self.sc.pods,
                &mut self.state,
                &mut self.routes,
                &mut self.telemetry,
                &mut self.log,
            )
        };
        match outcome {
            ResolveOutcome::Retry { resolve_at } => self.schedule(resolve_at, Ev::DecisionDue),
            ResolveOutcome::Done(report) => self.after_apply(&report),
        }
    }

    /// Reconciles the server banks with the placement a decision produced
    /// and re-arms sharing clocks under the possibly new limits.
    fn after_apply(&mut self, report: &ApplyReport) {
        self.sync_servers();
        if self.sc.queueing == QueueingMode::ProcessorSharing {
            for change in &report.placement_changes {
                self.ps_rebind_nodes(change.pod.clone());
            }
            self.ps_reschedule_all();
        }
        self.note_deployment_change();
    }

    /// Records the post-change deployment both in memory and in the event
    /// stream, so reports can rebuild the resource timeline from traces.
    fn note_deployment_change(&mut self) {
        self.resource_series
            .push(ResourcePoint { time_s: self.now, committed: committed_map(&self.state) });
        let deployment = deployment_json(&self.state);
        self.log.push(self.now, "deployment_changed", json!({ "deployment": deployment }));
    }

    /// Grows or shrinks each pod's server bank to match the placement.
    /// Queued requests from removed slots re-queue round-robin over the
    /// remainder; requests already in service finish where they started.
    fn sync_servers(&mut self) {
        let pods: Vec<String> = self.servers.keys().cloned().collect();
        for pod in pods {
            let want = self.state.replicas(&pod);
            let have = self.servers[&pod].len();
            if want > have {
                let bank = self.servers.get_mut(&pod).unwrap();
                bank.resize_with(want, Server::default);
                for s in bank.iter_mut().skip(have) {
                    s.ps_last = self.now;
                }
            } else if want < have {
                let mut queued: Vec<usize> = Vec::new();
                let mut jobs: Vec<PsJob> = Vec::new();
                for slot in want..have {
                    self.ps_advance(&pod, slot);
                    let limit = self.state.limits[&pod].cpu;
                    let server = &mut self.servers.get_mut(&pod).unwrap()[slot];
                    queued.extend(server.queue.drain(..));
                    jobs.extend(server.jobs.drain(..));
                    if let Some((since, node)) = server.busy_since.take() {
                        self.telemetry.record_busy(&pod, &node, limit, since, self.now);
                    }
                }
                self.servers.get_mut(&pod).unwrap().truncate(want);
                for (i, id) in queued.into_iter().enumerate() {
                    let slot = i % want;
                    self.reqs[id].dest = Some((pod.clone(), slot));
                    let server = &self.servers[&pod][slot];
                    if server.busy.is_none() && server.queue.is_empty() {
                        self.start_service(&pod, slot, id);
                    } else {
                        self.servers.get_mut(&pod).unwrap()[slot].queue.push_back(id);
                    }
                }
                for (i, job) in jobs.into_iter().enumerate() {
                    let slot = i % want;
                    self.reqs[job.req].dest = Some((pod.clone(), slot));
                    self.ps_advance(&pod, slot);
                    let node = self.state.placement[&pod][slot].clone();
                    let server = &mut self.servers.get_mut(&pod).unwrap()[slot];
                    if server.jobs.is_empty() {
                        server.busy_since = Some((self.now, node));
                    }
                    server.jobs.push(job);
                }
            }
        }
    }

    /// Drains elapsed sharing time on one slot under the current limit.
    fn ps_advance(&mut self, pod: &str, slot: usize) {
        let limit = self.state.limits[pod].cpu;
        let now = self.now;
        let Some(server) = self.servers.get_mut(pod).and_then(|b| b.get_mut(slot)) else {
            return;
        };
        let n = server.jobs.len();
        if n > 0 {
            let drain = (now - server.ps_last) * limit / n as f64;
            for j in &mut server.jobs {
                j.remaining = (j.remaining - drain).max(0.0);
            }
        }
        server.ps_last = now;
    }

    fn ps_reschedule(&mut self, pod: &str, slot: usize) {
        self.ps_gen_counter += 1;
        let gen = self.ps_gen_counter;
        let limit = self.state.limits[pod].cpu;
        let server = &mut self.servers.get_mut(pod).unwrap()[slot];
        server.ps_gen = gen;
        if server.jobs.is_empty() {
            return;
        }
        let least = server.jobs.iter().map(|j| j.remaining).fold(f64::INFINITY, f64::min);
        let due = server.ps_last + least * server.jobs.len() as f64 / limit;
        self.schedule(due, Ev::PsDeparture { pod: pod.to_string(), slot, gen });
    }

    fn ps_arrive(&mut self, pod: &str, slot: usize, id: usize) {
        self.ps_advance(pod, slot);
        let work = self.work[pod];
        let node = self.state.placement[pod][slot].clone();
        let server = &mut self.servers.get_mut(pod).unwrap()[slot];
        if server.jobs.is_empty() {
            server.busy_since = Some((self.now, node));
        }
        server.jobs.push(PsJob { req: id, remaining: work });
        self.ps_reschedule(pod, slot);
    }

    fn handle_ps_departure(&mut self, pod: &str, slot: usize, gen: u64) {
        match self.servers.get(pod).and_then(|b| b.get(slot)) {
            Some(server) if server.ps_gen == gen => {}
            _ => return, // superseded by an arrival, migration or rescale
        }
        self.ps_advance(pod, slot);
        let limit = self.state.limits[pod].cpu;
        let server = &mut self.servers.get_mut(pod).unwrap()[slot];
        let best = server
            .jobs
            .iter()
            .enumerate()
            .min_by(|(_, x), (_, y)| x.remaining.total_cmp(&y.remaining).then(x.req.cmp(&y.req)))
            .map(|(i, _)| i)
            .expect("departure fires only while jobs are present");
        let job = server.jobs.remove(best);
        if server.jobs.is_empty() {
            if let Some((since, node)) = server.busy_since.take() {
                self.telemetry.record_busy(pod, &node, limit, since, self.now);
            }
        }
        self.ps_reschedule(pod, slot);
        let id = job.req;
        let r = &mut self.reqs[id];
        r.service_s += self.now - r.arrived_at_server;
        r.stage += 1;
        self.begin_hop(id);
    }

    /// Settles all sharing clocks at the current instant.
    fn ps_touch_all(&mut self) {
        let pods: Vec<(String, usize)> = self
            .servers
            .iter()
            .flat_map(|(p, bank)| (0..bank.len()).map(move |s| (p.clone(), s)))
            .collect();
        for (pod, slot) in pods {
            self.ps_advance(&pod, slot);
        }
    }

    fn ps_reschedule_all(&mut self) {
        let pods: Vec<(String, usize)> = self
            .servers
            .iter()
            .flat_map(|(p, bank)| (0..bank.len()).map(move |s| (p.clone(), s)))
            .collect();
        for (pod, slot) in pods {
            self.ps_reschedule(&pod, slot);
        }
    }

    /// Closes the open busy interval of migrated sharing slots on the old
    /// node and reopens it on the new one.
    fn ps_rebind_nodes(&mut self, pod: String) {
        let slots = self.servers.get(&pod).map_or(0, Vec::len);
        for slot in 0..slots.min(self.state.replicas(&pod)) {
            let node = self.state.placement[&pod][slot].clone();
            let limit = self.state.limits[&pod].cpu;
            let server = &mut self.servers.get_mut(&pod).unwrap()[slot];
            if let Some((since, old)) = server.busy_since.clone() {
                if old != node {
                    self.telemetry.record_busy(&pod, &old, limit, since, self.now);
                    server.busy_since = Some((self.now, node));
                }
            }
        }
    }

    fn handle_hpa_eval(&mut self) {
        let changes = if let Control::Hpa(h) = &mut self.control {
            let mut utils = BTreeMap::new();
            let mut current = BTreeMap::new();
            for pod in self.state.placement.keys() {
                let n = self.state.replicas(pod);
                utils.insert(pod.clone(), self.telemetry.trailing_util(pod, self.now, UTIL_WINDOW_S, n));
                current.insert(pod.clone(), n as u32);
            }
            h.evaluate(self.now, &utils, &current)
        } else {
            return;
        };
        for (pod, replicas) in changes {
            let from = self.state.replicas(&pod) as u32;
            let action = Action::HorizontalScaling { pod: pod.clone(), replicas };
            let utils = self.current_link_utils();
            let ctx = ApplyCtx {
                topo: &self.topo,
                pods: &self.sc.pods,
                bounds: self.sc.bounds,
                utils: &utils,
            };
            match apply(&action, &ctx, &self.state, &self.routes) {
                Ok((state, routes)) => {
                    self.state = state;
                    self.routes = routes;
                    self.telemetry.set_replicas(&pod, &self.state.placement[&pod], self.now);
                    self.log.push(
                        self.now,
                        "hpa_scale",
                        json!({"pod": pod, "from": from, "to": replicas}),
                    );
                    self.sync_servers();
                    if self.sc.queueing == QueueingMode::ProcessorSharing {
                        self.ps_reschedule_all();
                    }
                    self.note_deployment_change();
                }
                Err(rej) => {
                    self.log.push(
                        self.now,
                        "hpa_skipped",
                        json!({"pod": pod, "to": replicas, "reason": rej.kind()}),
                    );
                }
            }
        }
        let next = self.now + EVAL_INTERVAL_S;
        if next <= self.duration {
            self.schedule(next, Ev::HpaEval);
        }
    }

    /// Link utilization of the newest telemetry window, keyed for routing.
    fn current_link_utils(&self) -> BTreeMap<LinkKey, f64> {
        let agg = self.telemetry.aggregate(self.now, &self.topo, &self.state);
        let mut out = BTreeMap::new();
        if let Some(w) = agg.windows.last() {
            for (label, util) in &w.link_util {
                let mut parts = label.splitn(2, '|');
                if let (Some(a), Some(b)) = (parts.next(), parts.next()) {
                    out.insert(LinkKey::new(a, b), *util);
                }
            }
        }
        out
    }
}

/// `{pod: {replicas, cpu_limit, mem_limit_mib}}` for the event stream.
fn deployment_json(state: &DeploymentState) -> serde_json::Value {
    let map: BTreeMap<&String, serde_json::Value> = state
        .placement
        .iter()
        .map(|(pod, nodes)| {
            let lim = state.limits[pod];
            (
                pod,
                json!({
                    "replicas": nodes.len(),
                    "cpu_limit": lim.cpu,
                    "mem_limit_mib": lim.mem,
                }),
            )
        })
        .collect();
    json!(map)
}

fn committed_map(state: &DeploymentState) -> BTreeMap<String, (f64, f64)> {
    state
        .placement
        .iter()
        .map(|(pod, nodes)| {
            let lim = state.limits[pod];
            let n = nodes.len() as f64;
            (pod.clone(), (n * lim.cpu, n * lim.mem))
        })
        .collect()
}
