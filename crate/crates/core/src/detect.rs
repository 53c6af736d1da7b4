//! Bus-volume series and the diagnostic detectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{CommandRecord, SpanRecord, BUS_PORT};
use crate::event::{EventKind, TraceEvent};

pub const DEFAULT_BUCKET_NS: i64 = 1_000_000;
pub const DEFAULT_AMPLIFICATION_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("the experiment has no events")]
    EmptyModel,
    #[error("bucket width must be positive, got {0}")]
    BadWidth(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub metric: String,
    pub width: i64,
    pub origin: i64,
    pub values: Vec<f64>,
}

impl Series {
    /// Zero series covering `[origin, end]` inclusive.
    pub fn new(metric: impl Into<String>, origin: i64, end: i64, width: i64) -> Result<Self, DetectError> {
        if width <= 0 {
            return Err(DetectError::BadWidth(width));
        }
        let span = (end - origin + 1).max(1);
        let len = (span + width - 1) / width;
        Ok(Series {
            metric: metric.into(),
            width,
            origin,
            values: vec![0.0; len as usize],
        })
    }

    pub fn bucket(&self, ts: i64) -> Option<usize> {
        if ts < self.origin {
            return None;
        }
        let i = ((ts - self.origin) / self.width) as usize;
        (i < self.values.len()).then_some(i)
    }

    pub fn add(&mut self, ts: i64, v: f64) {
        if let Some(i) = self.bucket(ts) {
            self.values[i] += v;
        }
    }

    pub fn bucket_start(&self, i: usize) -> i64 {
        self.origin + i as i64 * self.width
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.total() / self.values.len() as f64
        }
    }

    /// Mean over the buckets overlapping `[t0, t1]`.
    pub fn window_mean(&self, t0: i64, t1: i64) -> f64 {
        let lo = self.bucket(t0.max(self.origin)).unwrap_or(0);
        let hi = self.bucket(t1).unwrap_or(self.values.len().saturating_sub(1));
        if self.values.is_empty() || hi < lo {
            return 0.0;
        }
        self.values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
    }

    /// `ts,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ts,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{},{}", self.bucket_start(i), v);
        }
        s
    }
}

fn is_client_ingress(e: &TraceEvent) -> bool {
    let internal = matches!(e.str("conn_type"), Some("cluster") | Some("replica"));
    let bus = e.int("src_port") == Some(BUS_PORT) || e.int("dst_port") == Some(BUS_PORT);
    !internal && !bus
}

/// Bytes per bucket: `cluster_send` bytes going out, or bytes read from client
/// connections coming in. The series spans the whole experiment.
pub fn bus_volume_series(events: &[TraceEvent], width: i64, direction: Direction) -> Result<Series, DetectError> {
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Err(DetectError::EmptyModel);
    };
    let metric = match direction {
        Direction::In => "bus_volume_in",
        Direction::Out => "bus_volume_out",
    };
    let mut s = Series::new(metric, first.ts, last.ts, width)?;
    for e in events {
        match (direction, e.kind()) {
            (Direction::Out, Some(EventKind::ClusterSend)) => s.add(e.ts, e.int("bytes").unwrap_or(0) as f64),
            (Direction::In, Some(EventKind::StartReadClientQuery)) if is_client_ingress(e) => {
                s.add(e.ts, e.int("bytes").unwrap_or(0) as f64)
            }
            _ => {}
        }
    }
    Ok(s)
}

/// Mean number of distinct destinations per broadcast message id.
pub fn broadcast_fanout(events: &[TraceEvent]) -> f64 {
    let mut dsts: HashMap<i64, BTreeSet<&str>> = HashMap::new();
    for e in events.iter().filter(|e| e.kind() == Some(EventKind::ClusterSend)) {
        if e.str("kind") == Some("broadcast") {
            if let (Some(id), Some(d)) = (e.int("msg_id"), e.str("dst")) {
                dsts.entry(id).or_default().insert(d);
            }
        }
    }
    if dsts.is_empty() {
        return 0.0;
    }
    dsts.values().map(|s| s.len() as f64).sum::<f64>() / dsts.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FindingKind {
    BusAmplification,
    DoubleFree,
    ReadStall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub t0: i64,
    pub t1: i64,
    pub paths: Vec<String>,
    pub evidence: BTreeMap<String, f64>,
    pub severity: Severity,
    pub narrative: String,
}

/// One finding per maximal run of buckets where out/in reaches `threshold`.
/// Buckets without ingress neither start nor break a run.
pub fn detect_bus_amplification(inp: &Series, out: &Series, threshold: f64, fanout: f64) -> Vec<Finding> {
    let n = inp.values.len().min(out.values.len());
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for i in 0..n {
        let (a, b) = (inp.values[i], out.values[i]);
        if a <= 0.0 {
            continue;
        }
        if b / a >= threshold {
            current = Some(current.map_or((i, i), |(s, _)| (s, i)));
        } else if let Some(r) = current.take() {
            runs.push(r);
        }
    }
    runs.extend(current);
    runs.into_iter()
        .map(|(lo, hi)| {
            let sum_in: f64 = inp.values[lo..=hi].iter().sum();
            let sum_out: f64 = out.values[lo..=hi].iter().sum();
            let ratio = sum_out / sum_in;
            let severity = if ratio >= 2.0 * threshold {
                Severity::Critical
            } else {
                Severity::Warn
            };
            Finding {
                kind: FindingKind::BusAmplification,
                t0: inp.bucket_start(lo),
                t1: inp.bucket_start(hi + 1) - 1,
                paths: vec!["Bus/Volume".into(), "Bus/Type".into()],
                evidence: BTreeMap::from([
                    ("ratio".into(), ratio),
                    ("bytes_in".into(), sum_in),
                    ("bytes_out".into(), sum_out),
                    ("threshold".into(), threshold),
                    ("broadcast_fanout".into(), fanout),
                ]),
                severity,
                narrative: format!(
                    "bus carries {ratio:.2}x the client ingress volume; each broadcast reaches {fanout:.1} peers"
                ),
            }
        })
        .collect()
}

/// Second frees without a reopen, and duplicate pending-list adds without a
/// drain, per connection.
pub fn detect_double_free(events: &[TraceEvent]) -> Vec<Finding> {
    #[derive(Default)]
    struct Fd {
        gen: u32,
        freed: Option<(i64, i64)>,
        in_list: Option<(i64, i64)>,
    }
    let mut fds: BTreeMap<(&str, i64), Fd> = BTreeMap::new();
    let mut out = Vec::new();
    for e in events {
        let Some(kind) = e.kind() else { continue };
        let host = e.host.as_str();
        match kind {
            EventKind::RunPendingReads => {
                for ((h, _), s) in fds.iter_mut() {
                    if *h == host {
                        s.in_list = None;
                    }
                }
            }
            EventKind::StartReadClientQuery => {
                let s = fds.entry((host, e.int("fd").unwrap_or(-1))).or_default();
                if s.freed.take().is_some() {
                    s.gen += 1;
                }
            }
            EventKind::SslRead if e.int("pending") == Some(1) => {
                let fd = e.int("fd").unwrap_or(-1);
                let s = fds.entry((host, fd)).or_default();
                if let Some((t_add, tid_add)) = s.in_list {
                    out.push(Finding {
                        kind: FindingKind::DoubleFree,
                        t0: t_add,
                        t1: e.ts,
                        paths: vec![
                            format!("Connections/{host}:{fd}#{}", s.gen),
                            format!("Threads/{host}:{tid_add}/Operation"),
                            format!("Threads/{host}:{}/Operation", e.tid),
                        ],
                        evidence: BTreeMap::from([
                            ("fd".into(), fd as f64),
                            ("first_add_ts".into(), t_add as f64),
                            ("second_add_ts".into(), e.ts as f64),
                            ("first_tid".into(), tid_add as f64),
                            ("second_tid".into(), e.tid as f64),
                        ]),
                        severity: Severity::Warn,
                        narrative: format!(
                            "connection {fd} added to the pending-read list twice without a drain (tids {tid_add} and {})",
                            e.tid
                        ),
                    });
                } else {
                    s.in_list = Some((e.ts, e.tid));
                }
            }
            EventKind::FreeClient => {
                let fd = e.int("fd").unwrap_or(-1);
                let s = fds.entry((host, fd)).or_default();
                s.in_list = None;
                match s.freed {
                    Some((t_first, tid_first)) => {
                        let distinct = if tid_first == e.tid { 1.0 } else { 2.0 };
                        out.push(Finding {
                            kind: FindingKind::DoubleFree,
                            t0: t_first,
                            t1: e.ts,
                            paths: vec![
                                format!("Connections/{host}:{fd}#{}", s.gen),
                                format!("Threads/{host}:{tid_first}/Operation"),
                                format!("Threads/{host}:{}/Operation", e.tid),
                            ],
                            evidence: BTreeMap::from([
                                ("fd".into(), fd as f64),
                                ("first_free_ts".into(), t_first as f64),
                                ("second_free_ts".into(), e.ts as f64),
                                ("first_tid".into(), tid_first as f64),
                                ("second_tid".into(), e.tid as f64),
                                ("distinct_tids".into(), distinct),
                            ]),
                            severity: Severity::Critical,
                            narrative: format!(
                                "connection {fd} freed by tid {tid_first} at {t_first} and again by tid {} at {}",
                                e.tid, e.ts
                            ),
                        });
                    }
                    None => s.freed = Some((e.ts, e.tid)),
                }
            }
            _ => {}
        }
    }
    out.sort_by_key(|f| (f.t0, f.t1));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StallConfig {
    /// Minimum read duration; defaults to three times the p99 duration.
    pub threshold_ns: Option<i64>,
    pub corr_window_ns: i64,
    pub k: f64,
}

impl Default for StallConfig {
    fn default() -> Self {
        StallConfig {
            threshold_ns: None,
            corr_window_ns: 10_000_000,
            k: 2.0,
        }
    }
}

/// Nearest-rank percentile of a sorted slice.
pub fn percentile(sorted: &[i64], p: f64) -> Option<i64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Long cluster reads, escalated when outgoing bus volume around them is
/// well above the experiment mean.
pub fn detect_read_stall(reads: &[SpanRecord], out: &Series, cfg: StallConfig) -> Vec<Finding> {
    let mut durations: Vec<i64> = reads.iter().map(|r| r.t1 - r.t0).collect();
    durations.sort_unstable();
    let Some(threshold) = cfg
        .threshold_ns
        .or_else(|| percentile(&durations, 99.0).map(|p| p.saturating_mul(3)))
    else {
        return Vec::new();
    };
    let global = out.mean();
    let mut found: Vec<Finding> = reads
        .iter()
        .filter(|r| r.t1 - r.t0 >= threshold && r.t1 > r.t0)
        .map(|r| {
            let local = out.window_mean(r.t0 - cfg.corr_window_ns, r.t1 + cfg.corr_window_ns);
            let correlated = global > 0.0 && local > cfg.k * global;
            let msg = r.msg_id.map_or(String::new(), |m| format!(" (message {m})"));
            Finding {
                kind: FindingKind::ReadStall,
                t0: r.t0,
                t1: r.t1,
                paths: vec![format!("Threads/{}:{}/Operation", r.host, r.tid), "Bus/Volume".into()],
                evidence: BTreeMap::from([
                    ("duration_ns".into(), (r.t1 - r.t0) as f64),
                    ("threshold_ns".into(), threshold as f64),
                    ("window_out_mean".into(), local),
                    ("global_out_mean".into(), global),
                ]),
                severity: if correlated { Severity::Warn } else { Severity::Info },
                narrative: if correlated {
                    format!(
                        "cluster read on {}{msg} took {} ns while bus output ran at {:.1}x its mean",
                        r.host,
                        r.t1 - r.t0,
                        local / global
                    )
                } else {
                    format!(
                        "cluster read on {}{msg} took {} ns with no bus volume surge",
                        r.host,
                        r.t1 - r.t0
                    )
                },
            }
        })
        .collect();
    found.sort_by(|a, b| (a.t0, &a.paths).cmp(&(b.t0, &b.paths)));
    found
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandStats {
    pub command: String,
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: i64,
    pub p95_ns: i64,
    pub p99_ns: i64,
}

/// Execution time (`call_command_start` to `call_command_end`) per command.
pub fn latency_report(commands: &[CommandRecord]) -> Vec<CommandStats> {
    let mut by: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
    for c in commands {
        if let Some(end) = c.end {
            by.entry(c.command.as_str()).or_default().push(end - c.start);
        }
    }
    by.into_iter()
        .map(|(cmd, mut d)| {
            d.sort_unstable();
            let sum: i128 = d.iter().map(|&x| x as i128).sum();
            CommandStats {
                command: cmd.to_owned(),
                count: d.len() as u64,
                mean_ns: sum as f64 / d.len() as f64,
                p50_ns: percentile(&d, 50.0).unwrap(),
                p95_ns: percentile(&d, 95.0).unwrap(),
                p99_ns: percentile(&d, 99.0).unwrap(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: i64, tid: i64, name: &str) -> TraceEvent {
        TraceEvent::new(ts, "n1", tid, ts as u64, name)
    }

    fn send(ts: i64, bytes: i64, id: i64, dst: &str) -> TraceEvent {
        ev(ts, 1, "cluster_send")
            .with("msg_id", id)
            .with("bytes", bytes)
            .with("kind", "broadcast")
            .with("dst", dst)
    }

    fn ingress(ts: i64, bytes: i64) -> TraceEvent {
        ev(ts, 1, "start_read_client_query").with("fd", 5).with("bytes", bytes)
    }

    #[test]
    fn series_length_and_conservation() {
        let events: Vec<TraceEvent> = (0..100).map(|i| send(i * 37_000, 10 + i, i, "n2")).collect();
        let fine = bus_volume_series(&events, 1_000, Direction::Out).unwrap();
        let coarse = bus_volume_series(&events, 1_000_000_000, Direction::Out).unwrap();
        let expect: i64 = (0..100).map(|i| 10 + i).sum();
        assert_eq!(fine.total(), expect as f64);
        assert_eq!(coarse.total(), expect as f64);
        assert_eq!(coarse.values.len(), 1);
        assert_eq!(fine.values.len(), ((99 * 37_000 + 1) as f64 / 1000.0).ceil() as usize);
    }

    #[test]
    fn empty_and_bad_width() {
        assert_eq!(bus_volume_series(&[], 10, Direction::In), Err(DetectError::EmptyModel));
        assert_eq!(
            bus_volume_series(&[ingress(0, 1)], 0, Direction::In),
            Err(DetectError::BadWidth(0))
        );
        let s = bus_volume_series(&[ingress(0, 1), ingress(5, 1)], 2, Direction::Out).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amplification_single_window() {
        let mut events = Vec::new();
        for i in 0..50 {
            let t = i * 1_000_000;
            events.push(ingress(t, 100));
            events.push(send(t + 10, 500, i, "n2"));
            events.push(send(t + 11, 500, i, "n3"));
        }
        let inp = bus_volume_series(&events, DEFAULT_BUCKET_NS, Direction::In).unwrap();
        let out = bus_volume_series(&events, DEFAULT_BUCKET_NS, Direction::Out).unwrap();
        let f = detect_bus_amplification(&inp, &out, 2.0, broadcast_fanout(&events));
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].severity, Severity::Critical);
        assert_eq!(f[0].evidence["ratio"], 10.0);
        assert_eq!(f[0].evidence["broadcast_fanout"], 2.0);
    }

    #[test]
    fn balanced_traffic_has_no_finding() {
        let events: Vec<TraceEvent> = (0..10)
            .flat_map(|i| [ingress(i * 1000, 100), send(i * 1000 + 1, 100, i, "n2")])
            .collect();
        let inp = bus_volume_series(&events, 1000, Direction::In).unwrap();
        let out = bus_volume_series(&events, 1000, Direction::Out).unwrap();
        assert!(detect_bus_amplification(&inp, &out, 2.0, 1.0).is_empty());
    }

    fn ssl(ts: i64, tid: i64, read: i64, pending: i64) -> TraceEvent {
        ev(ts, tid, "ssl_read")
            .with("fd", 132)
            .with("bytes_requested", 16384)
            .with("bytes_read", read)
            .with("pending", pending)
    }

    fn free(ts: i64, tid: i64) -> TraceEvent {
        ev(ts, tid, "free_client").with("fd", 132)
    }

    #[test]
    fn double_free_names_both_threads() {
        let events = vec![
            ev(1, 1, "start_read_client_query").with("fd", 132),
            ssl(2, 1, 8192, 1),
            ev(3, 1, "run_pending_reads"),
            ssl(4, 1, -1, 0),
            free(5, 1),
            ssl(6, 2, -1, 0),
            free(7, 2),
        ];
        let f = detect_double_free(&events);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].severity, Severity::Critical);
        assert_eq!((f[0].evidence["first_tid"], f[0].evidence["second_tid"]), (1.0, 2.0));
        assert_eq!((f[0].t0, f[0].t1), (5, 7));
    }

    #[test]
    fn reconnect_resets_tracking() {
        let events = vec![
            ev(1, 1, "start_read_client_query").with("fd", 132),
            free(2, 1),
            ev(3, 1, "start_read_client_query").with("fd", 132),
            free(4, 1),
        ];
        assert!(detect_double_free(&events).is_empty());
    }

    #[test]
    fn duplicate_list_add_is_a_warning() {
        // Membership trace: add(2) -> member, add(3) -> duplicate, drain(4),
        // add(5) -> member again.
        let events = vec![
            ev(1, 1, "start_read_client_query").with("fd", 132),
            ssl(2, 1, 100, 1),
            ssl(3, 2, 100, 1),
            ev(4, 1, "run_pending_reads"),
            ssl(5, 1, 100, 1),
        ];
        let f = detect_double_free(&events);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].severity, Severity::Warn);
        assert_eq!((f[0].t0, f[0].t1), (2, 3));
    }

    fn read(t0: i64, t1: i64) -> SpanRecord {
        SpanRecord {
            host: "n2".into(),
            tid: 4,
            fd: 30,
            msg_id: Some(t0),
            t0,
            t1,
        }
    }

    #[test]
    fn stall_needs_volume_to_escalate() {
        let mut reads: Vec<SpanRecord> = (0..200).map(|i| read(i * 1_000_000, i * 1_000_000 + 10_000)).collect();
        reads.push(read(100_500_000, 150_500_000));
        let mut out = Series::new("bus_volume_out", 0, 250_000_000, 1_000_000).unwrap();
        for i in 0..250 {
            out.values[i] = 100.0;
        }
        let flat = detect_read_stall(&reads, &out, StallConfig::default());
        assert_eq!(flat.len(), 1);
        assert_eq!(flat[0].severity, Severity::Info);
        for i in 95..160 {
            out.values[i] = 1000.0;
        }
        let burst = detect_read_stall(&reads, &out, StallConfig::default());
        assert_eq!(burst.len(), 1);
        assert_eq!(burst[0].severity, Severity::Warn);
        assert!(detect_read_stall(&reads[..200], &out, StallConfig::default()).is_empty());
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<i64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), Some(50));
        assert_eq!(percentile(&v, 99.0), Some(99));
        assert_eq!(percentile(&[7], 99.0), Some(7));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn latency_groups_by_command() {
        let cmd = |c: &str, s: i64, e: i64| CommandRecord {
            req_id: String::new(),
            host: "n1".into(),
            tid: 1,
            fd: 1,
            gen: 0,
            command: c.into(),
            read_start: None,
            read_tid: None,
            start: s,
            end: Some(e),
            reply: None,
            tuple: None,
        };
        let r = latency_report(&[cmd("get", 0, 100), cmd("get", 10, 110), cmd("set", 0, 30)]);
        assert_eq!(r.len(), 2);
        assert_eq!(
            (r[0].command.as_str(), r[0].count, r[0].mean_ns, r[0].p99_ns),
            ("get", 2, 100.0, 100)
        );
        assert!(latency_report(&[]).is_empty());
    }
}
