//! Experiment harness: runs a scenario under a chosen controller, writes the
//! trace artifacts, and derives every summary figure from those artifacts.
//!
//! `summary.json` is deliberately built by reading back `requests.csv`,
//! `telemetry.csv`, and `events.jsonl` rather than from in-memory state, so
//! an independent re-derivation over the same files reproduces it exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use crate::decision::fixture::FixtureDecider;
use crate::decision::heuristic::HeuristicDecider;
use crate::decision::hpa::HpaBaseline;
use crate::decision::llm::LlmDecider;
use crate::decision::prompt::FewShotLibrary;
use crate::engine::{run, Control, ResourcePoint, RunResult};
use crate::mano::Mano;
use crate::metrics::{
    normalized_resources, rt_stats, satisfaction, LatencyStats, PodResources, RunSummary,
    SUMMARY_SCHEMA_VERSION,
};
use crate::scenario::Scenario;

pub const REQUESTS_FILE: &str = "requests.csv";
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown decider `{0}`, expected llm | fixture:<file> | heuristic | hpa:<target>")]
    UnknownDecider(String),
    #[error("decider: {0}")]
    Decider(String),
    #[error("trace: {0}")]
    Trace(String),
}

/// Builds the controller a decider spec names: `heuristic`, `hpa:<target>`,
/// `fixture:<file>`, or `llm`. Intent-driven deciders take their latency and
/// bounds from the scenario.
pub fn make_control(
    spec: &str,
    sc: &Scenario,
    library: FewShotLibrary,
) -> Result<Control, HarnessError> {
    let latency = sc.intent.decision_latency_s;
    let intent_control = |d: Box<dyn crate::decision::Decider>| {
        Control::Intent(Box::new(Mano::new(sc.intent.clone(), sc.bounds, d, library)))
    };
    if spec == "heuristic" {
        return Ok(intent_control(Box::new(HeuristicDecider)));
    }
    if spec == "llm" {
        let d = LlmDecider::from_env(latency).map_err(|e| HarnessError::Decider(e.to_string()))?;
        return Ok(intent_control(Box::new(d)));
    }
    if let Some(path) = spec.strip_prefix("fixture:") {
        let d = FixtureDecider::from_file(Path::new(path), latency)
            .map_err(HarnessError::Decider)?;
        return Ok(intent_control(Box::new(d)));
    }
    if let Some(target) = spec.strip_prefix("hpa:") {
        let target: f64 = target
            .parse()
            .map_err(|_| HarnessError::UnknownDecider(spec.to_string()))?;
        if !(target > 0.0 && target <= 1.0) {
            return Err(HarnessError::UnknownDecider(spec.to_string()));
        }
        return Ok(Control::Hpa(HpaBaseline::new(target, sc.bounds.max_replicas)));
    }
    Err(HarnessError::UnknownDecider(spec.to_string()))
}

/// Runs `sc` under the given decider spec and writes all artifacts to `out`.
pub fn run_experiment(
    sc: &Scenario,
    decider_spec: &str,
    out: &Path,
    library: FewShotLibrary,
) -> Result<RunSummary, HarnessError> {
    let control = make_control(decider_spec, sc, library)?;
    let result = run(sc, control);
    write_artifacts(out, &result)
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes `requests.csv`, `telemetry.csv`, and `events.jsonl`, then builds
/// `summary.json` from those files.
pub fn write_artifacts(dir: &Path, result: &RunResult) -> Result<RunSummary, HarnessError> {
    fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join(REQUESTS_FILE))?;
    w.write_record(["request_id", "arrival", "completion", "rt", "ema_after"])?;
    for r in &result.requests {
        w.write_record([
            r.id.to_string(),
            f6(r.arrival),
            f6(r.completion),
            f6(r.rt),
            f6(r.ema_after),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(TELEMETRY_FILE))?;
    w.write_record(["window_index", "start_s", "end_s", "metric", "subject", "value"])?;
    for row in result.telemetry.rows(result.duration_s, &result.topo, &result.state) {
        w.write_record([
            row.window_index.to_string(),
            f6(row.start_s),
            f6(row.end_s),
            row.metric,
            row.subject,
            f6(row.value),
        ])?;
    }
    w.flush()?;

    fs::write(dir.join(EVENTS_FILE), result.log.to_jsonl())?;

    let summary = summarize_dir(dir)?;
    let mut text = crate::jsonfmt::to_stable_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

fn read_events(dir: &Path) -> Result<Vec<Value>, HarnessError> {
    let text = fs::read_to_string(dir.join(EVENTS_FILE))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| HarnessError::Trace(format!("events.jsonl line {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn field<'a>(ev: &'a Value, key: &str) -> Result<&'a Value, HarnessError> {
    ev.get(key).ok_or_else(|| {
        HarnessError::Trace(format!("event {} lacks `{key}`", ev["kind"].as_str().unwrap_or("?")))
    })
}

fn f64_field(ev: &Value, key: &str) -> Result<f64, HarnessError> {
    field(ev, key)?
        .as_f64()
        .ok_or_else(|| HarnessError::Trace(format!("`{key}` is not a number")))
}

fn u64_field(ev: &Value, key: &str) -> Result<u64, HarnessError> {
    field(ev, key)?
        .as_u64()
        .ok_or_else(|| HarnessError::Trace(format!("`{key}` is not an integer")))
}

fn str_field(ev: &Value, key: &str) -> Result<String, HarnessError> {
    Ok(field(ev, key)?
        .as_str()
        .ok_or_else(|| HarnessError::Trace(format!("`{key}` is not a string")))?
        .to_string())
}

/// `{pod: {replicas, cpu_limit, mem_limit_mib}}` -> per-pod committed totals.
fn committed_from_deployment(v: &Value) -> Result<BTreeMap<String, (f64, f64)>, HarnessError> {
    let obj = v
        .as_object()
        .ok_or_else(|| HarnessError::Trace("deployment block is not an object".into()))?;
    let mut out = BTreeMap::new();
    for (pod, entry) in obj {
        let n = entry["replicas"]
            .as_f64()
            .ok_or_else(|| HarnessError::Trace(format!("{pod}: bad replicas")))?;
        let cpu = entry["cpu_limit"]
            .as_f64()
            .ok_or_else(|| HarnessError::Trace(format!("{pod}: bad cpu_limit")))?;
        let mem = entry["mem_limit_mib"]
            .as_f64()
            .ok_or_else(|| HarnessError::Trace(format!("{pod}: bad mem_limit_mib")))?;
        out.insert(pod.clone(), (n * cpu, n * mem));
    }
    Ok(out)
}

/// Recomputes the full run summary from the trace files in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<RunSummary, HarnessError> {
    let events = read_events(dir)?;
    let of_kind = |k: &'static str| events.iter().filter(move |e| e["kind"] == k);
    let started = of_kind("run_started")
        .next()
        .ok_or_else(|| HarnessError::Trace("missing run_started event".into()))?;
    let finished = of_kind("run_finished")
        .next()
        .ok_or_else(|| HarnessError::Trace("missing run_finished event".into()))?;

    let duration_s = f64_field(started, "duration_s")?;
    let upper = f64_field(started, "upper_s")?;
    let lower = f64_field(started, "lower_s")?;

    let mut rts: Vec<f64> = Vec::new();
    let mut ema_series: Vec<(f64, f64)> = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join(REQUESTS_FILE))?;
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64, HarnessError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| HarnessError::Trace(format!("requests.csv: bad column {i}")))
        };
        let completion = get(2)?;
        rts.push(get(3)?);
        ema_series.push((completion, get(4)?));
    }

    let (pct, violated_s) = satisfaction(&ema_series, upper, lower, duration_s);

    // Committed-resource timeline: the starting deployment plus every change.
    let mut resources = vec![ResourcePoint {
        time_s: 0.0,
        committed: committed_from_deployment(field(started, "deployment")?)?,
    }];
    for ev in of_kind("deployment_changed") {
        resources.push(ResourcePoint {
            time_s: f64_field(ev, "time_s")?,
            committed: committed_from_deployment(field(ev, "deployment")?)?,
        });
    }
    let norm = normalized_resources(&resources, duration_s)
        .into_iter()
        .map(|(pod, (cpu, mem))| (pod, PodResources { cpu_cores: cpu, mem_mib: mem }))
        .collect();

    let token_in_total = of_kind("decision_requested")
        .map(|e| u64_field(e, "token_estimate"))
        .sum::<Result<u64, _>>()?;
    let token_out_total: u64 = of_kind("decision_received")
        .filter_map(|e| e.get("body").and_then(Value::as_str))
        .map(|body| (body.chars().count() as u64).div_ceil(4))
        .sum();

    // Each consultation's round trip: the received event against the
    // requested event with the same (index, ask).
    let mut asked: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for e in of_kind("decision_requested") {
        asked.insert((u64_field(e, "index")?, u64_field(e, "ask")?), f64_field(e, "time_s")?);
    }
    let mut latencies = Vec::new();
    for e in of_kind("decision_received") {
        let key = (u64_field(e, "index")?, u64_field(e, "ask")?);
        let at = asked.get(&key).ok_or_else(|| {
            HarnessError::Trace(format!("decision_received without request: {key:?}"))
        })?;
        latencies.push(f64_field(e, "time_s")? - at);
    }
    let decider_latency = LatencyStats {
        consultations: latencies.len() as u64,
        mean_s: if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        },
        max_s: latencies.iter().copied().fold(0.0, f64::max),
    };

    let count = |k: &'static str| of_kind(k).count() as u64;
    Ok(RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        scenario: str_field(started, "scenario")?,
        decider: str_field(started, "decider")?,
        seed: u64_field(started, "seed")?,
        duration_s,
        requests_admitted: u64_field(finished, "admitted")?,
        requests_completed: rts.len() as u64,
        requests_open: u64_field(finished, "admitted")? - rts.len() as u64,
        response_time: rt_stats(&rts),
        intent_satisfaction_pct: pct,
        violated_time_s: violated_s,
        violations: count("violation"),
        decisions: count("decision_requested"),
        fallbacks: count("fallback"),
        actions_applied: count("action_applied") + count("hpa_scale"),
        actions_skipped: count("action_skipped") + count("hpa_skipped"),
        token_in_total,
        token_out_total,
        decider_latency,
        normalized_resources: norm,
    })
}

fn diff_value(path: &str, stored: &Value, fresh: &Value, out: &mut Vec<String>) {
    match (stored, fresh) {
        (Value::Object(a), Value::Object(b)) => {
            let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (a.get(k), b.get(k)) {
                    (Some(x), Some(y)) => diff_value(&p, x, y, out),
                    (Some(_), None) => out.push(format!("{p}: not derivable from traces")),
                    (None, Some(_)) => out.push(format!("{p}: missing from summary")),
                    (None, None) => unreachable!(),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                diff_value(&format!("{path}[{i}]"), x, y, out);
            }
        }
        (Value::Number(a), Value::Number(b)) if a.as_f64() == b.as_f64() => {}
        _ if stored == fresh => {}
        _ => out.push(format!("{path}: summary has {stored}, traces give {fresh}")),
    }
}

/// Recomputes the summary from the trace files and lists every figure that
/// disagrees with the stored `summary.json`; an empty list means the
/// artifacts are internally consistent.
pub fn verify_dir(dir: &Path) -> Result<Vec<String>, HarnessError> {
    let recomputed = summarize_dir(dir)?;
    let stored: Value = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    // Round the fresh figures exactly the way the writer did.
    let fresh: Value =
        serde_json::from_str(&crate::jsonfmt::to_stable_string(&recomputed)?)?;

    let mut mismatches = Vec::new();
    diff_value("", &stored, &fresh, &mut mismatches);

    // Conservation across files: completions listed must match the horizon
    // accounting in the event stream.
    let events = read_events(dir)?;
    if let Some(finished) = events.iter().find(|e| e["kind"] == "run_finished") {
        let completed = u64_field(finished, "completed")?;
        if completed != recomputed.requests_completed {
            mismatches.push(format!(
                "requests.csv rows: run_finished says {completed}, file has {}",
                recomputed.requests_completed
            ));
        }
        let open = u64_field(finished, "open")?;
        if open != recomputed.requests_open {
            mismatches.push(format!(
                "requests_open: run_finished says {open}, derived {}",
                recomputed.requests_open
            ));
        }
    }
    Ok(mismatches)
}

fn artifact_dir_name(spec: &str) -> String {
    spec.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' })
        .collect()
}

/// Runs the same scenario under each decider spec, writing one artifact
/// directory per decider plus a side-by-side `comparison.csv`.
pub fn compare(
    sc: &Scenario,
    specs: &[String],
    out: &Path,
    library: &FewShotLibrary,
) -> Result<Vec<(PathBuf, RunSummary)>, HarnessError> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for spec in specs {
        let dir = out.join(artifact_dir_name(spec));
        let summary = run_experiment(sc, spec, &dir, library.clone())?;
        rows.push((dir, summary));
    }

    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    w.write_record([
        "decider",
        "satisfaction_pct",
        "violated_s",
        "violations",
        "decisions",
        "fallbacks",
        "actions_applied",
        "mean_rt_s",
        "p95_rt_s",
        "tokens_in",
        "tokens_out",
        "cpu_cores",
        "mem_mib",
    ])?;
    for (_, s) in &rows {
        let cpu: f64 = s.normalized_resources.values().map(|r| r.cpu_cores).sum();
        let mem: f64 = s.normalized_resources.values().map(|r| r.mem_mib).sum();
        w.write_record([
            s.decider.clone(),
            format!("{:.3}", s.intent_satisfaction_pct),
            format!("{:.1}", s.violated_time_s),
            s.violations.to_string(),
            s.decisions.to_string(),
            s.fallbacks.to_string(),
            s.actions_applied.to_string(),
            format!("{:.4}", s.response_time.mean_s),
            format!("{:.4}", s.response_time.p95_s),
            s.token_in_total.to_string(),
            s.token_out_total.to_string(),
            format!("{cpu:.3}"),
            format!("{mem:.1}"),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Prompt-size sweep over synthetic continuums: `(nodes, input_tokens)`.
pub fn scalability_study(node_counts: &[usize]) -> Vec<(usize, u64)> {
    let library = FewShotLibrary::shipped();
    node_counts
        .iter()
        .map(|&n| (n, crate::synth::prompt_token_estimate(n, &library)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Undersized stage: six users against ~2 req/s of capacity breach the
    // upper objective quickly, so a short run exercises the whole loop.
    const BUSY: &str = r#"
schema_version: 1
name: busy
topology:
  switches: [S1, S2]
  links:
    - {a: S1, b: S2, capacity_mbps: 100.0, latency_s: 0.001}
  nodes:
    - {id: M, cpu_capacity: 4.0, mem_capacity: 8192.0, attached_switch: S1}
    - {id: W, cpu_capacity: 8.0, mem_capacity: 16384.0, attached_switch: S2}
  ingress_host: M
pods:
  - {id: p1, chain_index: 0, cpu_limit: 0.2, mem_limit: 256.0, work_demand: 0.1}
placement:
  p1: [W]
intent:
  upper_s: 3.0
  lower_s: 1.0
  waiting_s: 30.0
  decision_latency_s: 0.0
  alpha: 0.1
  min_requests: 5
load:
  phases:
    - {users: 6, duration_s: 240.0}
  think_time_s: 1.0
  think_jitter_s: 0.0
  payload_kb: 125.0
seed: 7
"#;

    fn busy_run() -> RunResult {
        let sc = Scenario::from_yaml(BUSY).unwrap();
        let control = make_control("heuristic", &sc, FewShotLibrary::empty()).unwrap();
        run(&sc, control)
    }

    #[test]
    fn artifacts_round_trip_through_the_files() {
        let dir = tempfile::tempdir().unwrap();
        let result = busy_run();
        let summary = write_artifacts(dir.path(), &result).unwrap();

        for f in [REQUESTS_FILE, TELEMETRY_FILE, EVENTS_FILE, SUMMARY_FILE] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        assert_eq!(summary.requests_completed, result.completed);
        assert_eq!(summary.requests_admitted, result.admitted);
        assert_eq!(summary.violations as usize, result.violations);
        assert!(summary.violations >= 1, "the undersized stage must breach");
        assert_eq!(summary.decisions, summary.decider_latency.consultations);
        assert!(summary.token_in_total > 0);

        let mismatches = verify_dir(dir.path()).unwrap();
        assert!(mismatches.is_empty(), "verify found: {mismatches:?}");
    }

    #[test]
    fn summary_figures_match_the_unrounded_run() {
        let dir = tempfile::tempdir().unwrap();
        let result = busy_run();
        let summary = write_artifacts(dir.path(), &result).unwrap();

        let (pct, violated) = crate::metrics::satisfaction(
            &result.ema_series,
            3.0,
            1.0,
            result.duration_s,
        );
        // The files carry six decimals, so the recomputation can only drift
        // by rounding noise.
        assert!((summary.intent_satisfaction_pct - pct).abs() < 1e-3);
        assert!((summary.violated_time_s - violated).abs() < 1e-2);

        let stats = crate::metrics::rt_stats(
            &result.requests.iter().map(|r| r.rt).collect::<Vec<_>>(),
        );
        assert_eq!(summary.response_time.count, stats.count);
        assert!((summary.response_time.mean_s - stats.mean_s).abs() < 1e-5);
    }

    #[test]
    fn verify_catches_a_doctored_summary() {
        let dir = tempfile::tempdir().unwrap();
        let result = busy_run();
        let summary = write_artifacts(dir.path(), &result).unwrap();

        let path = dir.path().join(SUMMARY_FILE);
        let doctored = fs::read_to_string(&path)
            .unwrap()
            .replace(
                &format!("\"violations\": {}", summary.violations),
                &format!("\"violations\": {}", summary.violations + 3),
            );
        fs::write(&path, doctored).unwrap();

        let mismatches = verify_dir(dir.path()).unwrap();
        assert!(
            mismatches.iter().any(|m| m.starts_with("violations")),
            "expected a violations mismatch, got {mismatches:?}"
        );
    }

    #[test]
    fn decider_specs_parse_or_reject() {
        let sc = Scenario::from_yaml(BUSY).unwrap();
        let lib = FewShotLibrary::empty();

        let c = make_control("heuristic", &sc, lib.clone()).unwrap();
        assert_eq!(c.name(), "heuristic");
        let c = make_control("hpa:0.5", &sc, lib.clone()).unwrap();
        assert_eq!(c.name(), "hpa:0.50");

        assert!(matches!(
            make_control("hpa:zero", &sc, lib.clone()),
            Err(HarnessError::UnknownDecider(_))
        ));
        assert!(matches!(
            make_control("hpa:1.5", &sc, lib.clone()),
            Err(HarnessError::UnknownDecider(_))
        ));
        assert!(matches!(
            make_control("banana", &sc, lib.clone()),
            Err(HarnessError::UnknownDecider(_))
        ));
        assert!(matches!(
            make_control("fixture:/no/such/file.jsonl", &sc, lib),
            Err(HarnessError::Decider(_))
        ));
    }

    #[test]
    fn compare_writes_one_directory_per_decider() {
        let dir = tempfile::tempdir().unwrap();
        let sc = Scenario::from_yaml(BUSY).unwrap();
        let specs = vec!["heuristic".to_string(), "hpa:0.50".to_string()];
        let rows = compare(&sc, &specs, dir.path(), &FewShotLibrary::empty()).unwrap();

        assert_eq!(rows.len(), 2);
        assert!(dir.path().join("heuristic").join(SUMMARY_FILE).exists());
        assert!(dir.path().join("hpa-0.50").join(SUMMARY_FILE).exists());
        assert!(dir.path().join("comparison.csv").exists());
        // Same scenario and seed on both sides.
        assert_eq!(rows[0].1.seed, rows[1].1.seed);
        assert_eq!(rows[0].1.scenario, rows[1].1.scenario);
    }

    #[test]
    fn scalability_rows_cover_the_requested_counts() {
        let rows = scalability_study(&[10, 40]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, 10);
        assert!(rows[0].1 > 0);
        assert!(rows[1].1 > rows[0].1);
    }
}
