//! Synthetic continuum generator for prompt-size studies.
//!
//! Builds continuums of arbitrary node count with a fixed shape recipe, so
//! prompt size becomes a pure function of the count: switches grow as a ring
//! with a few cross-chords, worker nodes attach pseudo-randomly under a fixed
//! seed, and the application riding on top stays the same four-stage chain.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::actuator::initial_routes;
use crate::decision::prompt::{build_prompt, FewShotLibrary};
use crate::decision::ActionBounds;
use crate::model::{ContinuumTopology, LinkSpec, NodeSpec, PodSpec};
use crate::scenario::{IntentSpec, LoadSchedule, Phase, QueueingMode, Scenario};
use crate::snapshot::{StateSnapshot, ViolationInfo};
use crate::telemetry::{BreachKind, TelemetryConfig, TelemetryLog};

const ATTACH_SEED: u64 = 42;

fn switch_name(i: usize) -> String {
    format!("S{:03}", i + 1)
}

/// Continuum with `nodes` compute hosts: one ingress plus workers spread over
/// a ring-and-chord switch fabric. Same count, same topology, always.
pub fn synth_topology(nodes: usize) -> ContinuumTopology {
    assert!(nodes >= 5, "a synthetic continuum needs an ingress and four workers");
    let k = (nodes / 8).max(2);

    let switches: Vec<String> = (0..k).map(switch_name).collect();
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 0..k {
        let j = (i + 1) % k;
        if i != j {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    // Chords keep the diameter short as the ring grows.
    for i in (0..k).step_by(4) {
        let j = (i + k / 2) % k;
        if i != j {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let links = pairs
        .into_iter()
        .map(|(a, b)| LinkSpec {
            a: switch_name(a),
            b: switch_name(b),
            capacity_mbps: 100.0,
            latency_s: 0.001,
            up: true,
        })
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(ATTACH_SEED);
    let mut hosts = vec![NodeSpec {
        id: "M".to_string(),
        cpu_capacity: 8.0,
        mem_capacity: 16384.0,
        attached_switch: switch_name(0),
    }];
    for w in 1..nodes {
        let at = (rng.next_u64() % k as u64) as usize;
        hosts.push(NodeSpec {
            id: format!("W{w:04}"),
            cpu_capacity: 32.0,
            mem_capacity: 131072.0,
            attached_switch: switch_name(at),
        });
    }

    ContinuumTopology { switches, links, nodes: hosts, ingress_host: "M".to_string() }
}

/// The standard four-stage chain deployed on the first four workers of a
/// synthetic continuum, under a steady closed-loop load.
pub fn synth_scenario(nodes: usize) -> Scenario {
    let topology = synth_topology(nodes);
    let pod = |id: &str, chain_index: usize, cpu: f64, mem: f64, work: f64| PodSpec {
        id: id.to_string(),
        chain_index,
        cpu_limit: cpu,
        mem_limit: mem,
        work_demand: work,
        pinned_node: None,
    };
    let pods = vec![
        pod("p1", 0, 0.3, 312.0, 0.054),
        pod("p2", 1, 0.3, 312.0, 0.054),
        pod("p3", 2, 0.5, 512.0, 0.25),
        pod("p4", 3, 0.3, 312.0, 0.054),
    ];
    let placement: BTreeMap<String, Vec<String>> = (1..=4)
        .map(|i| (format!("p{i}"), vec![format!("W{i:04}")]))
        .collect();

    Scenario {
        schema_version: 1,
        name: format!("synthetic-{nodes}"),
        description: "generated continuum for prompt-size measurements".to_string(),
        topology,
        pods,
        placement,
        intent: IntentSpec {
            upper_s: 3.0,
            lower_s: 1.0,
            waiting_s: 60.0,
            decision_latency_s: 13.4,
            alpha: 0.02,
            min_requests: 5,
        },
        load: LoadSchedule {
            phases: vec![Phase { users: 10, duration_s: 900.0 }],
            spawn_rate_per_s: 1.0,
            think_time_s: 1.0,
            think_jitter_s: 0.2,
            payload_kb: 499.69,
        },
        telemetry: TelemetryConfig { window_len_s: 10.0, windows_before_breach: 3, cpu_duty: 0.65 },
        background_events: Vec::new(),
        link_events: Vec::new(),
        bounds: ActionBounds { max_replicas: 5, cpu_floor: 0.2 },
        queueing: QueueingMode::Fifo,
        seed: 42,
    }
    .into_validated()
    .expect("generated scenario is well formed")
}

/// Input-token estimate of the decision prompt a breach would produce on a
/// synthetic continuum of the given size, using a fixed mid-run situation so
/// the only thing varying between calls is the continuum itself.
pub fn prompt_token_estimate(nodes: usize, library: &FewShotLibrary) -> u64 {
    let sc = synth_scenario(nodes);
    let state = sc.initial_state();
    let routes = initial_routes(&sc.topology, &sc.pods, &state);

    let mut log = TelemetryLog::new(sc.telemetry);
    for (pod, on) in &state.placement {
        log.set_replicas(pod, on, 0.0);
    }
    // A plausible breached trace: slow completions trickling in while every
    // stage stays busy, so all window series carry data.
    for k in 0..4u64 {
        let t = 10.0 * k as f64;
        log.record_request(t + 4.0, 3.1 + 0.1 * k as f64);
        log.record_request(t + 8.0, 3.4);
    }
    for (pod, on) in &state.placement {
        let limit = state.limits[pod].cpu;
        log.record_busy(pod, &on[0], limit, 0.0, 38.0);
    }
    let agg = log.aggregate(40.0, &sc.topology, &state);

    let violation = ViolationInfo {
        kind: BreachKind::Upper,
        ema_s: 3.4,
        upper_s: sc.intent.upper_s,
        lower_s: sc.intent.lower_s,
    };
    let snap = StateSnapshot::capture(
        40.0,
        violation.clone(),
        &sc.topology,
        &sc.pods,
        &state,
        &routes,
        &agg,
        sc.bounds,
    );
    build_prompt(&snap, &sc.intent, &violation, library).document.token_estimate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinkKey;

    #[test]
    fn same_count_same_continuum() {
        let a = synth_topology(100);
        let b = synth_topology(100);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let lib = FewShotLibrary::shipped();
        assert_eq!(prompt_token_estimate(50, &lib), prompt_token_estimate(50, &lib));
    }

    #[test]
    fn fabric_shape_follows_the_recipe() {
        for n in [5, 10, 64, 200] {
            let topo = synth_topology(n);
            assert_eq!(topo.nodes.len(), n);
            assert_eq!(topo.switches.len(), (n / 8).max(2));
            for host in &topo.nodes {
                assert!(topo.switches.contains(&host.attached_switch), "{}", host.id);
            }
            // No duplicate links in either orientation.
            let keys: BTreeSet<String> =
                topo.links.iter().map(|l| LinkKey::new(&l.a, &l.b).label()).collect();
            assert_eq!(keys.len(), topo.links.len());
        }
    }

    #[test]
    fn fabric_is_connected() {
        let topo = synth_topology(200);
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for l in &topo.links {
            adj.entry(&l.a).or_default().push(&l.b);
            adj.entry(&l.b).or_default().push(&l.a);
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![topo.switches[0].as_str()];
        while let Some(s) = stack.pop() {
            if seen.insert(s) {
                stack.extend(adj.get(s).into_iter().flatten());
            }
        }
        assert_eq!(seen.len(), topo.switches.len());
    }

    #[test]
    fn prompts_grow_with_the_continuum() {
        let lib = FewShotLibrary::shipped();
        let sizes = [10, 40, 160];
        let tokens: Vec<u64> = sizes.iter().map(|&n| prompt_token_estimate(n, &lib)).collect();
        assert!(
            tokens.windows(2).all(|w| w[0] < w[1]),
            "token estimates must rise with node count: {tokens:?}"
        );
    }
}
