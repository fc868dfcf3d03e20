//! Run-level quality metrics and the report they roll up into.
//!
//! The smoothed response time is treated as a step function: each sample
//! holds from its completion instant until the next one, the last holds to
//! the horizon, and the stretch before the first sample counts as satisfied
//! because no evidence against the intent exists yet.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::ResourcePoint;

/// Seconds inside `[0, duration)` where the stepped series sits outside
/// `[lower, upper]`.
pub fn violated_seconds(series: &[(f64, f64)], upper: f64, lower: f64, duration: f64) -> f64 {
    let mut violated = 0.0;
    for (i, &(t, v)) in series.iter().enumerate() {
        if t >= duration {
            break;
        }
        let end = series.get(i + 1).map_or(duration, |&(next, _)| next.min(duration));
        if v > upper || v < lower {
            violated += end - t;
        }
    }
    violated
}

/// Intent satisfaction as `(percent, violated seconds)` over the full run.
/// The percentage is derived from the violated time, so the two always
/// satisfy the complement identity exactly.
pub fn satisfaction(series: &[(f64, f64)], upper: f64, lower: f64, duration: f64) -> (f64, f64) {
    assert!(duration > 0.0, "runs have positive duration");
    let violated = violated_seconds(series, upper, lower, duration);
    (100.0 - 100.0 * violated / duration, violated)
}

/// Seconds from `from_t` until the series first sits inside the band again,
/// or `None` if it never does.
pub fn recovery_seconds(
    series: &[(f64, f64)],
    from_t: f64,
    upper: f64,
    lower: f64,
) -> Option<f64> {
    series
        .iter()
        .filter(|(t, _)| *t >= from_t)
        .find(|(_, v)| *v <= upper && *v >= lower)
        .map(|(t, _)| t - from_t)
}

/// Time-weighted mean of committed resources per pod over `[0, duration)`,
/// as (CPU cores, memory MiB).
pub fn normalized_resources(
    points: &[ResourcePoint],
    duration: f64,
) -> BTreeMap<String, (f64, f64)> {
    assert!(duration > 0.0, "runs have positive duration");
    let mut acc: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (i, point) in points.iter().enumerate() {
        if point.time_s >= duration {
            break;
        }
        let end = points.get(i + 1).map_or(duration, |p| p.time_s.min(duration));
        let width = end - point.time_s;
        for (pod, &(cpu, mem)) in &point.committed {
            let entry = acc.entry(pod.clone()).or_insert((0.0, 0.0));
            entry.0 += cpu * width;
            entry.1 += mem * width;
        }
    }
    acc.into_iter().map(|(pod, (c, m))| (pod, (c / duration, m / duration))).collect()
}

/// Order statistics of completed response times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtStats {
    pub count: u64,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
}

/// Nearest-rank percentile of pre-sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn rt_stats(rts: &[f64]) -> RtStats {
    if rts.is_empty() {
        return RtStats { count: 0, mean_s: 0.0, p50_s: 0.0, p95_s: 0.0, max_s: 0.0 };
    }
    let mut sorted = rts.to_vec();
    sorted.sort_by(f64::total_cmp);
    RtStats {
        count: sorted.len() as u64,
        mean_s: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50_s: percentile(&sorted, 0.50),
        p95_s: percentile(&sorted, 0.95),
        max_s: *sorted.last().unwrap(),
    }
}

/// Coefficient of determination of the least-squares line through the
/// points; 1.0 for a perfect linear relation.
pub fn linear_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    assert!(n >= 2.0, "a fit needs at least two points");
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 || syy == 0.0 {
        // A vertical or horizontal point cloud is perfectly described by its
        // mean; treat it as a perfect fit rather than dividing by zero.
        return 1.0;
    }
    (sxy * sxy) / (sxx * syy)
}

/// Per-pod time-weighted committed resources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodResources {
    pub cpu_cores: f64,
    pub mem_mib: f64,
}

/// Consultation round-trip statistics in simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub consultations: u64,
    pub mean_s: f64,
    pub max_s: f64,
}

/// Everything a run reports; written as `summary.json` and recomputable
/// from the trace files alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub decider: String,
    pub seed: u64,
    pub duration_s: f64,
    pub requests_admitted: u64,
    pub requests_completed: u64,
    pub requests_open: u64,
    pub response_time: RtStats,
    pub intent_satisfaction_pct: f64,
    pub violated_time_s: f64,
    pub violations: u64,
    pub decisions: u64,
    pub fallbacks: u64,
    pub actions_applied: u64,
    pub actions_skipped: u64,
    pub token_in_total: u64,
    pub token_out_total: u64,
    pub decider_latency: LatencyStats,
    pub normalized_resources: BTreeMap<String, PodResources>,
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
