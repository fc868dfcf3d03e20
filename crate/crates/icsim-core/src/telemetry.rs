//! Response-time tracking and resource telemetry.
//!
//! The simulator feeds two sinks while it runs:
//! * an exponential moving average of end-to-end response times, checked
//!   against the service-level thresholds after every completed request;
//! * a raw log of busy intervals, replica presence, transfer volumes and
//!   background traffic, from which windowed utilization metrics are
//!   computed on a fixed grid of `window_len`-second windows anchored at
//!   t = 0.
//!
//! Utilization is reported as `busy_fraction * cpu_duty`: a replica that is
//! busy serving requests does not pin its whole CPU limit, it draws a
//! calibrated duty fraction of it. Memory follows a fixed affine model of
//! the busy fraction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ContinuumTopology, DeploymentState, LinkKey};

/// Exponential moving average over response times, seeded with the first
/// sample: `v <- (1 - alpha) * v + alpha * rt`.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub alpha: f64,
    pub value: Option<f64>,
    pub count: u64,
}

impl EmaState {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        EmaState { alpha, value: None, count: 0 }
    }

    /// Folds one response time in and returns the updated average.
    pub fn observe(&mut self, rt: f64) -> f64 {
        let next = match self.value {
            None => rt,
            Some(v) => (1.0 - self.alpha) * v + self.alpha * rt,
        };
        self.value = Some(next);
        self.count += 1;
        next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreachKind {
    Upper,
    Lower,
}

/// Response-time objective: the average must stay within (lower, upper).
/// Breaches are only reported once `min_requests` samples have been folded
/// in, so a single early outlier cannot trip the loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SloPolicy {
    pub upper_s: f64,
    pub lower_s: f64,
    pub min_requests: u64,
}

impl SloPolicy {
    pub fn check(&self, ema: &EmaState) -> Option<BreachKind> {
        if ema.count < self.min_requests {
            return None;
        }
        let v = ema.value?;
        if v > self.upper_s {
            Some(BreachKind::Upper)
        } else if v < self.lower_s {
            Some(BreachKind::Lower)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
struct BusyRec {
    node: String,
    cpu_limit: f64,
    start: f64,
    end: f64,
}

#[derive(Debug, Clone)]
struct BgFlow {
    link: LinkKey,
    rate_mbps: f64,
    from: f64,
    until: f64,
}

/// Metrics of one grid window. Subjects are pod ids, node ids, and link
/// labels (`"A|B"`). Response-time stats cover requests completed inside
/// the window; `avg_rt_s` is 0 when no request completed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub index: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub avg_rt_s: f64,
    pub request_count: u64,
    pub pod_cpu_util: BTreeMap<String, f64>,
    pub pod_mem_used_mib: BTreeMap<String, f64>,
    pub node_cpu_util: BTreeMap<String, f64>,
    pub link_util: BTreeMap<String, f64>,
}

/// Windows handed to the decision layer: the `k_pre` complete windows
/// preceding the breach plus the partial window the breach fell into.
/// `short_history` marks breaches early enough that fewer complete windows
/// exist.
#[derive(Debug, Clone)]
pub struct AggregateWindows {
    pub windows: Vec<WindowMetrics>,
    pub short_history: bool,
}

/// One row of the long-format telemetry table.
#[derive(Debug, Clone, Serialize)]
pub struct TelemetryRow {
    pub window_index: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub metric: String,
    pub subject: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TelemetryConfig {
    pub window_len_s: f64,
    pub windows_before_breach: usize,
    /// Fraction of its CPU limit a busy replica actually draws.
    pub cpu_duty: f64,
}

/// Raw measurement log. Append-only while the simulation runs; windowed
/// metrics are derived on demand.
#[derive(Debug, Clone)]
pub struct TelemetryLog {
    cfg: TelemetryConfig,
    busy: BTreeMap<String, Vec<BusyRec>>,
    /// Pod -> (time, replica nodes) snapshots, in time order.
    presence: BTreeMap<String, Vec<(f64, Vec<String>)>>,
    /// (link label, transfer start, megabits) per crossed link.
    transfers: Vec<(String, f64, f64)>,
    background: Vec<BgFlow>,
    /// (completion time, response time) per finished request.
    requests: Vec<(f64, f64)>,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

impl TelemetryLog {
    pub fn new(cfg: TelemetryConfig) -> Self {
        assert!(cfg.window_len_s > 0.0);
        TelemetryLog {
            cfg,
            busy: BTreeMap::new(),
            presence: BTreeMap::new(),
            transfers: Vec::new(),
            background: Vec::new(),
            requests: Vec::new(),
        }
    }

    pub fn config(&self) -> &TelemetryConfig {
        &self.cfg
    }

    /// Records a completed service interval of one replica.
    pub fn record_busy(&mut self, pod: &str, node: &str, cpu_limit: f64, start: f64, end: f64) {
        debug_assert!(end >= start);
        self.busy.entry(pod.to_string()).or_default().push(BusyRec {
            node: node.to_string(),
            cpu_limit,
            start,
            end,
        });
    }

    /// Records the replica set of a pod after a deployment change.
    pub fn set_replicas(&mut self, pod: &str, nodes: &[String], t: f64) {
        self.presence.entry(pod.to_string()).or_default().push((t, nodes.to_vec()));
    }

    /// Records application volume crossing a link, attributed to the
    /// transfer's start time.
    pub fn record_transfer(&mut self, link: &LinkKey, t_start: f64, megabits: f64) {
        self.transfers.push((link.label(), t_start, megabits));
    }

    pub fn register_background(&mut self, link: LinkKey, rate_mbps: f64, from: f64, until: f64) {
        self.background.push(BgFlow { link, rate_mbps, from, until });
    }

    /// Records a completed request for per-window response-time stats.
    pub fn record_request(&mut self, completion: f64, rt: f64) {
        self.requests.push((completion, rt));
    }

    /// Replica-seconds of `pod` within `[a, b)`.
    fn presence_seconds(&self, pod: &str, a: f64, b: f64) -> f64 {
        let snaps = match self.presence.get(pod) {
            Some(s) if !s.is_empty() => s,
            _ => return 0.0,
        };
        let mut total = 0.0;
        for (i, (t, nodes)) in snaps.iter().enumerate() {
            let seg_end = snaps.get(i + 1).map_or(b, |(t2, _)| *t2);
            total += nodes.len() as f64 * overlap(*t, seg_end, a, b);
        }
        total
    }

    fn busy_seconds(&self, pod: &str, a: f64, b: f64) -> f64 {
        self.busy
            .get(pod)
            .map_or(0.0, |recs| recs.iter().map(|r| overlap(r.start, r.end, a, b)).sum())
    }

    /// Busy fraction of `pod` over `[a, b)`: busy replica-seconds divided by
    /// present replica-seconds.
    pub fn busy_fraction(&self, pod: &str, a: f64, b: f64) -> f64 {
        let present = self.presence_seconds(pod, a, b);
        if present <= 0.0 {
            return 0.0;
        }
        self.busy_seconds(pod, a, b) / present
    }

    /// Measured CPU utilization of `pod` over `[a, b)`.
    pub fn pod_util(&self, pod: &str, a: f64, b: f64) -> f64 {
        self.busy_fraction(pod, a, b) * self.cfg.cpu_duty
    }

    /// Utilization figure the horizontal autoscaler consumes: busy
    /// replica-seconds over the trailing `span`, averaged across the current
    /// replica count. The denominator always spans the full window; time
    /// before the run or before a replica existed counts as idle, so the
    /// figure ramps up from zero after a load shift instead of jumping.
    pub fn trailing_util(&self, pod: &str, now: f64, span: f64, replicas: usize) -> f64 {
        if replicas == 0 || span <= 0.0 {
            return 0.0;
        }
        let busy = self.busy_seconds(pod, now - span, now);
        (busy / (span * replicas as f64) * self.cfg.cpu_duty).min(2.0)
    }

    fn window_bounds(&self, k: u64) -> (f64, f64) {
        let wl = self.cfg.window_len_s;
        (k as f64 * wl, (k + 1) as f64 * wl)
    }

    /// Metrics of window `k`, truncated at `horizon` if that falls inside.
    pub fn window_metrics(
        &self,
        k: u64,
        horizon: f64,
        topo: &ContinuumTopology,
        state: &DeploymentState,
    ) -> WindowMetrics {
        let (start, full_end) = self.window_bounds(k);
        let end = full_end.min(horizon);
        let width = end - start;
        assert!(width > 0.0, "window {k} is empty at horizon {horizon}");

        let mut request_count = 0u64;
        let mut rt_sum = 0.0;
        for &(done, rt) in &self.requests {
            if done >= start && done < end {
                request_count += 1;
                rt_sum += rt;
            }
        }
        let avg_rt_s = if request_count > 0 { rt_sum / request_count as f64 } else { 0.0 };

        let mut pod_cpu_util = BTreeMap::new();
        let mut pod_mem_used_mib = BTreeMap::new();
        for (pod, lim) in &state.limits {
            let frac = self.busy_fraction(pod, start, end);
            // Replica churn can briefly attribute more busy time than
            // presence; utilizations stay capped like link overdrive.
            pod_cpu_util.insert(pod.clone(), (frac * self.cfg.cpu_duty).min(2.0));
            pod_mem_used_mib.insert(pod.clone(), lim.mem * (0.4 + 0.4 * frac.min(2.0)));
        }

        let mut node_core_secs: BTreeMap<&str, f64> =
            topo.nodes.iter().map(|n| (n.id.as_str(), 0.0)).collect();
        for recs in self.busy.values() {
            for r in recs {
                if let Some(acc) = node_core_secs.get_mut(r.node.as_str()) {
                    *acc += overlap(r.start, r.end, start, end) * r.cpu_limit;
                }
            }
        }
        let node_cpu_util = topo
            .nodes
            .iter()
            .map(|n| {
                let util =
                    node_core_secs[n.id.as_str()] * self.cfg.cpu_duty / (width * n.cpu_capacity);
                (n.id.clone(), util.min(2.0))
            })
            .collect();

        let mut link_mb: BTreeMap<String, f64> = BTreeMap::new();
        for bg in &self.background {
            *link_mb.entry(bg.link.label()).or_default() +=
                bg.rate_mbps * overlap(bg.from, bg.until, start, end);
        }
        for (label, t, mb) in &self.transfers {
            if *t >= start && *t < end {
                *link_mb.entry(label.clone()).or_default() += mb;
            }
        }
        let link_util = topo
            .links
            .iter()
            .map(|l| {
                let mb = link_mb.get(&l.key().label()).copied().unwrap_or(0.0);
                // Attributed volume can exceed what the link really carried
                // in the window; cap so reports stay interpretable.
                let util = (mb / (width * l.capacity_mbps)).min(2.0);
                (l.key().label(), util)
            })
            .collect();

        WindowMetrics {
            index: k,
            start_s: start,
            end_s: end,
            avg_rt_s,
            request_count,
            pod_cpu_util,
            pod_mem_used_mib,
            node_cpu_util,
            link_util,
        }
    }

    /// Windows summarizing the situation at a breach observed at `now`: the
    /// partial window containing `now` preceded by up to
    /// `windows_before_breach` complete windows. A breach landing exactly on
    /// a window boundary belongs to the window that just closed.
    pub fn aggregate(
        &self,
        now: f64,
        topo: &ContinuumTopology,
        state: &DeploymentState,
    ) -> AggregateWindows {
        let wl = self.cfg.window_len_s;
        let mut k_cur = (now / wl).floor() as u64;
        if k_cur > 0 && now - k_cur as f64 * wl <= 0.0 {
            k_cur -= 1;
        }
        let k_first = k_cur.saturating_sub(self.cfg.windows_before_breach as u64);
        let short_history = (k_cur - k_first) < self.cfg.windows_before_breach as u64;
        let windows = (k_first..=k_cur)
            .map(|k| self.window_metrics(k, now.max(k_first as f64 * wl), topo, state))
            .collect();
        AggregateWindows { windows, short_history }
    }

    /// Long-format rows for every window that started before `duration`.
    pub fn rows(
        &self,
        duration: f64,
        topo: &ContinuumTopology,
        state: &DeploymentState,
    ) -> Vec<TelemetryRow> {
        let wl = self.cfg.window_len_s;
        let mut out = Vec::new();
        let mut k = 0u64;
        while (k as f64) * wl < duration {
            let w = self.window_metrics(k, duration, topo, state);
            let mut push = |metric: &str, subject: &str, value: f64| {
                out.push(TelemetryRow {
                    window_index: w.index,
                    start_s: w.start_s,
                    end_s: w.end_s,
                    metric: metric.to_string(),
                    subject: subject.to_string(),
                    value,
                });
            };
            // Keep metric names in sorted order so rows come out sorted by
            // (window, metric, subject) without a separate sort pass.
            push("avg_rt_s", "app", w.avg_rt_s);
            for (s, v) in &w.link_util {
                push("link_util", s, *v);
            }
            for (s, v) in &w.node_cpu_util {
                push("node_cpu_util", s, *v);
            }
            for (s, v) in &w.pod_cpu_util {
                push("pod_cpu_util", s, *v);
            }
            for (s, v) in &w.pod_mem_used_mib {
                push("pod_mem_used_mib", s, *v);
            }
            push("request_count", "app", w.request_count as f64);
            k += 1;
        }
        out
    }
}
