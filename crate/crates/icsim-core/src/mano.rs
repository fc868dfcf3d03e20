//! The intent watch loop and its orchestration glue.
//!
//! On a threshold breach the loop freezes one snapshot of the world, consults
//! the configured decider (charging the decider's latency in simulated time,
//! with up to [`RETRY_LIMIT`] re-asks when a retryable decider returns an
//! invalid body), validates and applies each recommended action in order,
//! falls back to the built-in heuristic when the decider yields nothing
//! usable, and finally opens the waiting window that suppresses detection
//! while the correction settles. The loop is the single owner of deployment
//! mutation: the engine only calls [`Mano::watch`], [`Mano::trigger`] and
//! [`Mano::resolve`], and reacts to the report the last one returns.

use serde_json::{json, Map, Value};

use crate::actuator::{apply, ApplyCtx, RouteTable};
use crate::decision::heuristic::heuristic_decide;
use crate::decision::prompt::{build_prompt, DecisionPrompt, FewShotLibrary};
use crate::decision::{parse_decision, Action, ActionBounds, Decider, Decision};
use crate::model::{ContinuumTopology, DeploymentState, PodSpec};
use crate::scenario::IntentSpec;
use crate::snapshot::{StateSnapshot, ViolationInfo};
use crate::telemetry::{BreachKind, EmaState, SloPolicy, TelemetryLog};

/// Re-asks permitted after an invalid body from a retryable decider.
pub const RETRY_LIMIT: usize = 2;
/// Name of the built-in fallback; a primary decider with this name is never
/// asked to fall back to itself.
pub const FALLBACK_NAME: &str = "heuristic";

/// Append-only event stream shared by the loop and the engine. Every entry
/// is one JSON object with `seq`, `time_s` and `kind` plus the payload
/// fields; `seq` makes the order total even at equal times.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Vec<Value>,
    seq: u64,
}

impl EventLog {
    pub fn new() -> EventLog {
        EventLog::default()
    }

    pub fn push(&mut self, time_s: f64, kind: &str, payload: Value) {
        let mut obj = Map::new();
        obj.insert("seq".into(), json!(self.seq));
        obj.insert("time_s".into(), json!(time_s));
        obj.insert("kind".into(), json!(kind));
        if let Value::Object(m) = payload {
            obj.extend(m);
        }
        self.events.push(Value::Object(obj));
        self.seq += 1;
    }

    pub fn events(&self) -> &[Value] {
        &self.events
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.events.iter().map(|e| e["kind"].as_str().unwrap_or("")).collect()
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e["kind"] == kind).count()
    }

    /// One stable JSON line per event.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&crate::jsonfmt::to_stable_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}

/// Immutable view of the world handed to the loop at detection time.
pub struct WorldView<'a> {
    pub topo: &'a ContinuumTopology,
    pub pods: &'a [PodSpec],
    pub state: &'a DeploymentState,
    pub routes: &'a RouteTable,
    pub telemetry: &'a TelemetryLog,
}

#[derive(Debug, Clone)]
pub struct PlacementChange {
    pub pod: String,
    pub before: Vec<String>,
    pub after: Vec<String>,
}

/// What one violation episode did to the world.
#[derive(Debug)]
pub struct ApplyReport {
    pub violation_index: usize,
    pub detected_at: f64,
    pub decided_by: String,
    pub fell_back: bool,
    pub applied: Vec<Action>,
    pub skipped: Vec<(Action, String)>,
    pub placement_changes: Vec<PlacementChange>,
    pub suppressed_until: f64,
}

#[derive(Debug)]
pub enum ResolveOutcome {
    /// The body was invalid and a re-ask is in flight; the caller schedules
    /// another [`Mano::resolve`] at the given time.
    Retry { resolve_at: f64 },
    /// The episode is over and the waiting window has started.
    Done(Box<ApplyReport>),
}

struct Pending {
    index: usize,
    detected_at: f64,
    resolve_at: f64,
    /// Consultations issued so far (first ask plus any re-asks).
    asks: usize,
    prompt: DecisionPrompt,
}

pub struct Mano {
    pub intent: IntentSpec,
    pub bounds: ActionBounds,
    decider: Box<dyn Decider>,
    library: FewShotLibrary,
    suppressed_until: f64,
    pending: Option<Pending>,
    violations: usize,
}

impl Mano {
    pub fn new(
        intent: IntentSpec,
        bounds: ActionBounds,
        decider: Box<dyn Decider>,
        library: FewShotLibrary,
    ) -> Mano {
        Mano {
            intent,
            bounds,
            decider,
            library,
            suppressed_until: 0.0,
            pending: None,
            violations: 0,
        }
    }

    pub fn decider_name(&self) -> String {
        self.decider.name()
    }

    pub fn suppressed_until(&self) -> f64 {
        self.suppressed_until
    }

    pub fn in_flight(&self) -> bool {
        self.pending.is_some()
    }

    /// Violations detected so far.
    pub fn violations(&self) -> usize {
        self.violations
    }

    pub fn resolve_time(&self) -> Option<f64> {
        self.pending.as_ref().map(|p| p.resolve_at)
    }

    fn policy(&self) -> SloPolicy {
        SloPolicy {
            upper_s: self.intent.upper_s,
            lower_s: self.intent.lower_s,
            min_requests: self.intent.min_requests,
        }
    }

    /// Breach check with the episode guards: at most one trigger per episode,
    /// never while a decision is in flight, never before the waiting window
    /// has elapsed.
    pub fn watch(&self, now: f64, ema: &EmaState) -> Option<BreachKind> {
        if self.pending.is_some() || now < self.suppressed_until {
            return None;
        }
        self.policy().check(ema)
    }

    /// Freezes the snapshot and issues the first consultation. Returns the
    /// simulated arrival time of the reply; the caller runs [`Mano::resolve`]
    /// then. Everything the decider (and any later actuation) sees is frozen
    /// here, at detection time.
    pub fn trigger(
        &mut self,
        now: f64,
        kind: BreachKind,
        ema_s: f64,
        world: &WorldView,
        log: &mut EventLog,
    ) -> f64 {
        assert!(self.pending.is_none(), "violation while a decision is in flight");
        let index = self.violations;
        self.violations += 1;

        let violation = ViolationInfo {
            kind,
            ema_s,
            upper_s: self.intent.upper_s,
            lower_s: self.intent.lower_s,
        };
        let aggregate = world.telemetry.aggregate(now, world.topo, world.state);
        let snapshot = StateSnapshot::capture(
            now,
            violation.clone(),
            world.topo,
            world.pods,
            world.state,
            world.routes,
            &aggregate,
            self.bounds,
        );
        let prompt = build_prompt(&snapshot, &self.intent, &violation, &self.library);

        log.push(
            now,
            "violation",
            json!({
                "index": index,
                "breach": kind,
                "ema_s": ema_s,
                "upper_s": self.intent.upper_s,
                "lower_s": self.intent.lower_s,
            }),
        );
        log.push(
            now,
            "decision_requested",
            json!({
                "index": index,
                "decider": self.decider.name(),
                "ask": 0,
                "token_estimate": prompt.document.token_estimate,
            }),
        );

        let resolve_at = now + self.decider.latency_s();
        self.pending = Some(Pending { index, detected_at: now, resolve_at, asks: 1, prompt });
        resolve_at
    }

    /// Collects the decider's reply. Invalid bodies are re-asked (for
    /// retryable deciders, with the validator's message appended) until
    /// [`RETRY_LIMIT`] is spent, then the heuristic takes over. A decision
    /// that applies nothing also falls back. Ends by opening the waiting
    /// window.
    #[allow(clippy::too_many_arguments)]
    pub fn resolve(
        &mut self,
        now: f64,
        topo: &ContinuumTopology,
        pods: &[PodSpec],
        state: &mut DeploymentState,
        routes: &mut RouteTable,
        telemetry: &mut TelemetryLog,
        log: &mut EventLog,
    ) -> ResolveOutcome {
        let mut pending = self.pending.take().expect("resolve without a pending decision");
        let index = pending.index;

        let parsed: Result<Decision, String> = match self.decider.decide(&pending.prompt) {
            Ok(body) => {
                log.push(
                    now,
                    "decision_received",
                    json!({
                        "index": index,
                        "ask": pending.asks - 1,
                        "decider": self.decider.name(),
                        "body": body,
                    }),
                );
                parse_decision(&body, &self.bounds).map_err(|e| e.to_string())
            }
            Err(e) => {
                let msg = e.to_string();
                log.push(
                    now,
                    "decision_received",
                    json!({
                        "index": index,
                        "ask": pending.asks - 1,
                        "decider": self.decider.name(),
                        "error": msg,
                    }),
                );
                Err(msg)
            }
        };

        match parsed {
            Ok(decision) => ResolveOutcome::Done(Box::new(self.conclude(
                now, pending, decision, false, topo, pods, state, routes, telemetry, log,
            ))),
            Err(msg) if self.decider.retryable() && pending.asks <= RETRY_LIMIT => {
                pending.prompt.append_error(&msg);
                pending.asks += 1;
                pending.resolve_at = now + self.decider.latency_s();
                log.push(
                    now,
                    "decision_requested",
                    json!({
                        "index": index,
                        "decider": self.decider.name(),
                        "ask": pending.asks - 1,
                        "token_estimate": pending.prompt.document.token_estimate,
                    }),
                );
                let resolve_at = pending.resolve_at;
                self.pending = Some(pending);
                ResolveOutcome::Retry { resolve_at }
            }
            Err(msg) => {
                log.push(now, "fallback", json!({ "index": index, "reason": msg }));
                let decision = heuristic_decide(&pending.prompt.snapshot);
                ResolveOutcome::Done(Box::new(self.conclude(
                    now, pending, decision, true, topo, pods, state, routes, telemetry, log,
                )))
            }
        }
    }

    /// Applies a decision action by action, falling back to the heuristic at
    /// most once if the primary decider applied nothing, then opens the
    /// waiting window.
    #[allow(clippy::too_many_arguments)]
    fn conclude(
        &mut self,
        now: f64,
        pending: Pending,
        decision: Decision,
        fell_back_already: bool,
        topo: &ContinuumTopology,
        pods: &[PodSpec],
        state: &mut DeploymentState,
        routes: &mut RouteTable,
        telemetry: &mut TelemetryLog,
        log: &mut EventLog,
    ) -> ApplyReport {
        let index = pending.index;
        let snapshot = pending.prompt.snapshot;
        // Route recomputation steers by the utilizations the decider saw:
        // frozen at detection, not re-measured mid-episode.
        let utils = snapshot.link_utils();
        let ctx = ApplyCtx { topo, pods, bounds: self.bounds, utils: &utils };

        let mut fell_back = fell_back_already;
        let mut applied = Vec::new();
        let mut skipped = Vec::new();
        let mut placement_changes = Vec::new();
        let mut decision = decision;

        loop {
            for action in &decision.actions {
                let action_json = serde_json::to_value(action).expect("action serializes");
                match apply(action, &ctx, state, routes) {
                    Ok((next_state, next_routes)) => {
                        for (pod, after) in &next_state.placement {
                            let before = &state.placement[pod];
                            if before != after {
                                telemetry.set_replicas(pod, after, now);
                                placement_changes.push(PlacementChange {
                                    pod: pod.clone(),
                                    before: before.clone(),
                                    after: after.clone(),
                                });
                            }
                        }
                        let route_bump = next_routes.version != routes.version;
                        *state = next_state;
                        *routes = next_routes;
                        log.push(
                            now,
                            "action_applied",
                            json!({
                                "index": index,
                                "action": action_json,
                                "category": decision.source.category,
                            }),
                        );
                        if route_bump {
                            log.push(
                                now,
                                "routes_recomputed",
                                json!({ "index": index, "version": routes.version }),
                            );
                        }
                        applied.push(action.clone());
                    }
                    Err(rej) => {
                        log.push(
                            now,
                            "action_skipped",
                            json!({
                                "index": index,
                                "action": action_json,
                                "reason": rej.kind(),
                                "detail": rej.to_string(),
                            }),
                        );
                        skipped.push((action.clone(), rej.to_string()));
                    }
                }
            }
            if !applied.is_empty() || fell_back || self.decider.name() == FALLBACK_NAME {
                break;
            }
            log.push(
                now,
                "fallback",
                json!({
                    "index": index,
                    "reason": if decision.actions.is_empty() {
                        "empty decision"
                    } else {
                        "no applicable action"
                    },
                }),
            );
            decision = heuristic_decide(&snapshot);
            fell_back = true;
        }

        self.suppressed_until = self.suppressed_until.max(now + self.intent.waiting_s);
        log.push(
            now,
            "waiting_started",
            json!({ "index": index, "until_s": self.suppressed_until }),
        );

        ApplyReport {
            violation_index: index,
            detected_at: pending.detected_at,
            decided_by: if fell_back { FALLBACK_NAME.into() } else { self.decider.name() },
            fell_back,
            applied,
            skipped,
            placement_changes,
            suppressed_until: self.suppressed_until,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::initial_routes;
    use crate::decision::{DeciderError, FnDecider};
    use crate::model::{ContinuumTopology, Limits, LinkSpec, NodeSpec, PodSpec};
    use crate::telemetry::TelemetryConfig;

    fn topo() -> ContinuumTopology {
        let link = |a: &str, b: &str| LinkSpec {
            a: a.into(),
            b: b.into(),
            capacity_mbps: 100.0,
            latency_s: 0.001,
            up: true,
        };
        let node = |id: &str, sw: &str, cpu: f64| NodeSpec {
            id: id.into(),
            cpu_capacity: cpu,
            mem_capacity: 131072.0,
            attached_switch: sw.into(),
        };
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
                node("M", "S2", 32.0),
                node("W1", "S2", 32.0),
                node("W2", "S4", 32.0),
                node("W3", "S3", 32.0),
                // Too small for any pod: placements here are always rejected.
                node("W4", "S4", 0.1),
            ],
            ingress_host: "M".into(),
        }
    }

    fn pods() -> Vec<PodSpec> {
        ["p1", "p2", "p3", "p4"]
            .iter()
            .enumerate()
            .map(|(i, id)| PodSpec {
                id: (*id).into(),
                chain_index: i,
                cpu_limit: 0.3,
                mem_limit: 312.0,
                work_demand: 0.1,
                pinned_node: None,
            })
            .collect()
    }

    fn state() -> DeploymentState {
        let lim = Limits { cpu: 0.3, mem: 312.0 };
        DeploymentState {
            placement: [
                ("p1".to_string(), vec!["W1".to_string()]),
                ("p2".to_string(), vec!["W2".to_string()]),
                ("p3".to_string(), vec!["W3".to_string()]),
                ("p4".to_string(), vec!["W3".to_string()]),
            ]
            .into(),
            limits: [
                ("p1".to_string(), lim),
                ("p2".to_string(), lim),
                ("p3".to_string(), lim),
                ("p4".to_string(), lim),
            ]
            .into(),
        }
    }

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

    fn bounds() -> ActionBounds {
        ActionBounds { max_replicas: 5, cpu_floor: 0.2 }
    }

    /// Telemetry where p3 is clearly the hottest pod (but under the
    /// vertical-scaling threshold), so the heuristic proposes one more
    /// replica of p3.
    fn warm_telemetry(state: &DeploymentState, until: f64) -> TelemetryLog {
        let mut log = TelemetryLog::new(TelemetryConfig {
            window_len_s: 10.0,
            windows_before_breach: 3,
            cpu_duty: 0.65,
        });
        for (pod, nodes) in &state.placement {
            log.set_replicas(pod, nodes, 0.0);
        }
        log.record_busy("p3", "W3", 0.3, until - 6.0, until - 2.0);
        log
    }

    struct World {
        topo: ContinuumTopology,
        pods: Vec<PodSpec>,
        state: DeploymentState,
        routes: RouteTable,
        telemetry: TelemetryLog,
        log: EventLog,
    }

    fn world(at: f64) -> World {
        let topo = topo();
        let pods = pods();
        let state = state();
        let routes = initial_routes(&topo, &pods, &state);
        let telemetry = warm_telemetry(&state, at);
        World { topo, pods, state, routes, telemetry, log: EventLog::new() }
    }

    fn breached_ema(value: f64) -> EmaState {
        let mut ema = EmaState::new(0.02);
        ema.value = Some(value);
        ema.count = 10;
        ema
    }

    fn trigger(mano: &mut Mano, w: &mut World, at: f64) -> f64 {
        let view = WorldView {
            topo: &w.topo,
            pods: &w.pods,
            state: &w.state,
            routes: &w.routes,
            telemetry: &w.telemetry,
        };
        mano.trigger(at, BreachKind::Upper, 3.4, &view, &mut w.log)
    }

    fn resolve(mano: &mut Mano, w: &mut World, at: f64) -> ResolveOutcome {
        mano.resolve(
            at,
            &w.topo,
            &w.pods,
            &mut w.state,
            &mut w.routes,
            &mut w.telemetry,
            &mut w.log,
        )
    }

    fn body_decider(body: &str, latency: f64) -> Box<dyn Decider> {
        let body = body.to_string();
        Box::new(FnDecider { f: move |_: &StateSnapshot| body.clone(), latency })
    }

    /// Retryable decider with a scripted list of bodies; the user messages it
    /// was shown stay reachable through the shared handle.
    struct Scripted {
        bodies: Vec<String>,
        seen: std::rc::Rc<std::cell::RefCell<Vec<String>>>,
    }

    impl Scripted {
        fn boxed(bodies: &[&str]) -> (Box<dyn Decider>, std::rc::Rc<std::cell::RefCell<Vec<String>>>) {
            let seen = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
            let s = Scripted {
                bodies: bodies.iter().map(|b| b.to_string()).collect(),
                seen: seen.clone(),
            };
            (Box::new(s), seen)
        }
    }

    impl Decider for Scripted {
        fn name(&self) -> String {
            "scripted".into()
        }
        fn latency_s(&self) -> f64 {
            13.4
        }
        fn retryable(&self) -> bool {
            true
        }
        fn decide(&mut self, prompt: &DecisionPrompt) -> Result<String, DeciderError> {
            self.seen.borrow_mut().push(prompt.user());
            let n = self.seen.borrow().len();
            if n > self.bodies.len() {
                return Err(DeciderError::Exhausted(self.bodies.len()));
            }
            Ok(self.bodies[n - 1].clone())
        }
    }

    const VALID_BODY: &str = r#"{"source":{"category":"cpu_shortage","detail":"p3 hot"},"actions":[{"type":"horizontal_scaling","pod":"p3","replicas":2}]}"#;

    #[test]
    fn watch_respects_guards() {
        let w = world(36.0);
        let mut mano = Mano::new(intent(), bounds(), body_decider(VALID_BODY, 13.4), FewShotLibrary::empty());

        // Not enough samples yet.
        let mut young = EmaState::new(0.02);
        young.value = Some(9.0);
        young.count = 4;
        assert_eq!(mano.watch(36.0, &young), None);

        assert_eq!(mano.watch(36.0, &breached_ema(3.4)), Some(BreachKind::Upper));
        assert_eq!(mano.watch(36.0, &breached_ema(0.4)), Some(BreachKind::Lower));
        assert_eq!(mano.watch(36.0, &breached_ema(2.0)), None);

        // In flight: no second trigger.
        let mut w2 = w;
        trigger(&mut mano, &mut w2, 36.0);
        assert!(mano.in_flight());
        assert_eq!(mano.watch(40.0, &breached_ema(3.4)), None);
    }

    #[test]
    fn happy_path_applies_and_opens_waiting_window() {
        let mut w = world(36.0);
        let mut mano = Mano::new(intent(), bounds(), body_decider(VALID_BODY, 13.4), FewShotLibrary::empty());

        let resolve_at = trigger(&mut mano, &mut w, 36.0);
        assert!((resolve_at - 49.4).abs() < 1e-9);
        assert_eq!(mano.resolve_time(), Some(resolve_at));

        let out = resolve(&mut mano, &mut w, resolve_at);
        let report = match out {
            ResolveOutcome::Done(r) => r,
            other => panic!("expected Done, got {other:?}"),
        };
        assert!(!report.fell_back);
        assert_eq!(report.applied.len(), 1);
        assert_eq!(w.state.replicas("p3"), 2);
        assert_eq!(report.placement_changes.len(), 1);
        assert_eq!(report.placement_changes[0].pod, "p3");
        assert!((report.suppressed_until - (49.4 + 60.0)).abs() < 1e-9);
        assert!(!mano.in_flight());

        // Episode shape: violation, ask, reply, effect, waiting.
        let kinds = w.log.kinds();
        assert_eq!(kinds[0], "violation");
        assert_eq!(kinds[1], "decision_requested");
        assert_eq!(kinds[2], "decision_received");
        assert!(kinds.contains(&"action_applied"));
        assert_eq!(*kinds.last().unwrap(), "waiting_started");
        assert_eq!(w.log.count("fallback"), 0);

        // Suppressed until the window ends, open again at its boundary.
        let until = mano.suppressed_until();
        assert_eq!(mano.watch(until - 0.1, &breached_ema(3.4)), None);
        assert_eq!(mano.watch(until, &breached_ema(3.4)), Some(BreachKind::Upper));
    }

    #[test]
    fn invalid_bodies_retry_with_error_feedback_then_succeed() {
        let mut w = world(36.0);
        let (script, seen) = Scripted::boxed(&[
            "no json here",
            r#"{"source":{"category":"cpu_shortage"},"actions":[{"type":"teleport"}]}"#,
            VALID_BODY,
        ]);
        let mut mano = Mano::new(intent(), bounds(), script, FewShotLibrary::empty());

        let t1 = trigger(&mut mano, &mut w, 36.0);
        let t2 = match resolve(&mut mano, &mut w, t1) {
            ResolveOutcome::Retry { resolve_at } => resolve_at,
            other => panic!("expected Retry, got {other:?}"),
        };
        assert!((t2 - (t1 + 13.4)).abs() < 1e-9);
        let t3 = match resolve(&mut mano, &mut w, t2) {
            ResolveOutcome::Retry { resolve_at } => resolve_at,
            other => panic!("expected Retry, got {other:?}"),
        };
        let report = match resolve(&mut mano, &mut w, t3) {
            ResolveOutcome::Done(r) => r,
            other => panic!("expected Done, got {other:?}"),
        };

        assert!(!report.fell_back);
        assert_eq!(report.applied.len(), 1);
        assert_eq!(w.log.count("decision_requested"), 3);
        assert_eq!(w.log.count("decision_received"), 3);
        assert_eq!(w.log.count("fallback"), 0);
        assert_eq!(w.state.replicas("p3"), 2);

        // Re-asks showed the validator's complaints; the first ask did not.
        let prompts = seen.borrow();
        assert_eq!(prompts.len(), 3);
        assert!(!prompts[0].contains("Previous attempt rejected"));
        assert!(prompts[1].contains("Previous attempt rejected"));
        assert!(prompts[1].contains("no JSON object"));
        assert!(prompts[2].contains("teleport"));
    }

    #[test]
    fn exhausted_retries_fall_back_to_the_heuristic() {
        let mut w = world(36.0);
        let (script, _) = Scripted::boxed(&["garbage", "garbage", "garbage"]);
        let mut mano = Mano::new(intent(), bounds(), script, FewShotLibrary::empty());

        let mut t = trigger(&mut mano, &mut w, 36.0);
        let report = loop {
            match resolve(&mut mano, &mut w, t) {
                ResolveOutcome::Retry { resolve_at } => t = resolve_at,
                ResolveOutcome::Done(r) => break r,
            }
        };

        assert!(report.fell_back);
        assert_eq!(report.decided_by, "heuristic");
        // First ask plus two re-asks, then the heuristic fixed it.
        assert_eq!(w.log.count("decision_requested"), 1 + RETRY_LIMIT);
        assert_eq!(w.log.count("fallback"), 1);
        assert_eq!(w.state.replicas("p3"), 2);
        assert_eq!(*w.log.kinds().last().unwrap(), "waiting_started");
    }

    #[test]
    fn received_events_carry_the_body_verbatim() {
        let mut w = world(36.0);
        let (script, _) = Scripted::boxed(&["word salad", VALID_BODY]);
        let mut mano = Mano::new(intent(), bounds(), script, FewShotLibrary::empty());
        let t1 = trigger(&mut mano, &mut w, 36.0);
        let t2 = match resolve(&mut mano, &mut w, t1) {
            ResolveOutcome::Retry { resolve_at } => resolve_at,
            other => panic!("expected Retry, got {other:?}"),
        };
        match resolve(&mut mano, &mut w, t2) {
            ResolveOutcome::Done(r) => assert!(!r.fell_back),
            other => panic!("expected Done, got {other:?}"),
        }
        let received: Vec<&Value> =
            w.log.events().iter().filter(|e| e["kind"] == "decision_received").collect();
        assert_eq!(received.len(), 2);
        assert_eq!(received[0]["body"].as_str().unwrap(), "word salad");
        assert_eq!(received[1]["body"].as_str().unwrap(), VALID_BODY);
    }

    #[test]
    fn empty_decision_falls_back() {
        let mut w = world(36.0);
        let mut mano = Mano::new(
            intent(),
            bounds(),
            body_decider(r#"{"source":{"category":"other"}}"#, 13.4),
            FewShotLibrary::empty(),
        );
        let t = trigger(&mut mano, &mut w, 36.0);
        let report = match resolve(&mut mano, &mut w, t) {
            ResolveOutcome::Done(r) => r,
            other => panic!("expected Done, got {other:?}"),
        };
        assert!(report.fell_back);
        assert_eq!(w.log.count("fallback"), 1);
        assert_eq!(w.state.replicas("p3"), 2);
    }

    #[test]
    fn infeasible_action_is_skipped_but_the_rest_apply() {
        let mut w = world(36.0);
        let body = r#"{"source":{"category":"cpu_shortage"},"actions":[
            {"type":"service_placement","pod":"p1","target_node":"W4"},
            {"type":"horizontal_scaling","pod":"p3","replicas":2}]}"#;
        let mut mano =
            Mano::new(intent(), bounds(), body_decider(body, 13.4), FewShotLibrary::empty());
        let t = trigger(&mut mano, &mut w, 36.0);
        let report = match resolve(&mut mano, &mut w, t) {
            ResolveOutcome::Done(r) => r,
            other => panic!("expected Done, got {other:?}"),
        };
        assert!(!report.fell_back);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.applied.len(), 1);
        assert_eq!(w.log.count("action_skipped"), 1);
        assert_eq!(w.log.count("fallback"), 0);
        assert_eq!(w.state.replicas("p3"), 2);
        // The skipped placement left p1 where it was.
        assert_eq!(w.state.placement["p1"], vec!["W1".to_string()]);
    }

    #[test]
    fn all_actions_infeasible_falls_back() {
        let mut w = world(36.0);
        let body = r#"{"source":{"category":"cpu_shortage"},"actions":[
            {"type":"service_placement","pod":"p1","target_node":"W4"}]}"#;
        let mut mano =
            Mano::new(intent(), bounds(), body_decider(body, 13.4), FewShotLibrary::empty());
        let t = trigger(&mut mano, &mut w, 36.0);
        let report = match resolve(&mut mano, &mut w, t) {
            ResolveOutcome::Done(r) => r,
            other => panic!("expected Done, got {other:?}"),
        };
        assert!(report.fell_back);
        assert_eq!(w.log.count("action_skipped"), 1);
        assert_eq!(w.log.count("fallback"), 1);
        assert_eq!(w.state.replicas("p3"), 2);
    }

    #[test]
    fn heuristic_primary_never_falls_back_to_itself() {
        let mut w = world(36.0);
        // A heuristic-named decider that returns an empty decision stands in
        // for the real heuristic producing no actions (lower breach at the
        // scaling floor).
        struct EmptyHeuristic;
        impl Decider for EmptyHeuristic {
            fn name(&self) -> String {
                FALLBACK_NAME.into()
            }
            fn latency_s(&self) -> f64 {
                0.0
            }
            fn retryable(&self) -> bool {
                false
            }
            fn decide(&mut self, _p: &DecisionPrompt) -> Result<String, DeciderError> {
                Ok(r#"{"source":{"category":"over_provisioning"}}"#.into())
            }
        }
        let mut mano =
            Mano::new(intent(), bounds(), Box::new(EmptyHeuristic), FewShotLibrary::empty());
        let t = trigger(&mut mano, &mut w, 36.0);
        let report = match resolve(&mut mano, &mut w, t) {
            ResolveOutcome::Done(r) => r,
            other => panic!("expected Done, got {other:?}"),
        };
        assert!(!report.fell_back);
        assert!(report.applied.is_empty());
        assert_eq!(w.log.count("fallback"), 0);
        assert_eq!(*w.log.kinds().last().unwrap(), "waiting_started");
    }

    #[test]
    fn suppression_is_non_decreasing() {
        let mut w = world(36.0);
        let mut mano = Mano::new(intent(), bounds(), body_decider(VALID_BODY, 13.4), FewShotLibrary::empty());
        let t = trigger(&mut mano, &mut w, 36.0);
        match resolve(&mut mano, &mut w, t) {
            ResolveOutcome::Done(_) => {}
            other => panic!("expected Done, got {other:?}"),
        }
        let first = mano.suppressed_until();

        // Second episode later; the window only moves forward.
        let body2 = r#"{"source":{"category":"cpu_shortage"},"actions":[{"type":"horizontal_scaling","pod":"p3","replicas":3}]}"#;
        let mut mano2 = Mano::new(intent(), bounds(), body_decider(body2, 13.4), FewShotLibrary::empty());
        mano2.suppressed_until = first;
        let t2 = trigger(&mut mano2, &mut w, first + 1.0);
        match resolve(&mut mano2, &mut w, t2) {
            ResolveOutcome::Done(r) => assert!(r.suppressed_until > first),
            other => panic!("expected Done, got {other:?}"),
        }
    }

    #[test]
    fn fixture_decider_plugs_in_end_to_end() {
        let mut w = world(36.0);
        let jsonl = format!(
            "{}\n",
            serde_json::json!({ "violation_index": 0, "body": VALID_BODY })
        );
        let fixture =
            crate::decision::fixture::FixtureDecider::parse("t", &jsonl, 13.4).unwrap();
        let mut mano = Mano::new(intent(), bounds(), Box::new(fixture), FewShotLibrary::empty());
        let t = trigger(&mut mano, &mut w, 36.0);
        assert!((t - 49.4).abs() < 1e-9);
        match resolve(&mut mano, &mut w, t) {
            ResolveOutcome::Done(r) => {
                assert_eq!(r.decided_by, "fixture:t");
                assert_eq!(w.state.replicas("p3"), 2);
            }
            other => panic!("expected Done, got {other:?}"),
        }
    }
}
