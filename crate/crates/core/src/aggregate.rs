//! Clock-offset estimation and k-way merge of per-host streams.
//!
//! Offsets are corrections: `adjusted = raw + offset[host]`. A host whose raw
//! clock runs `s` ns ahead of the reference gets offset `-s`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{write_event, ConnTuple, EventKind, EventReader, TraceError, TraceEvent, TraceStream};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClockOffsets {
    pub reference_host: String,
    pub offsets: BTreeMap<String, i64>,
    /// Half-width of the feasible interval accumulated along the sync path.
    /// `None` when some link on the path was observed in one direction only.
    #[serde(default)]
    pub error_bound_ns: BTreeMap<String, Option<i64>>,
}

impl ClockOffsets {
    pub fn zero<'a>(hosts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = ClockOffsets::default();
        for h in hosts {
            out.offsets.insert(h.to_owned(), 0);
            out.error_bound_ns.insert(h.to_owned(), Some(0));
        }
        out.reference_host = out.offsets.keys().next().cloned().unwrap_or_default();
        out
    }

    pub fn get(&self, host: &str) -> i64 {
        self.offsets.get(host).copied().unwrap_or(0)
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()
    }
}

/// One matched cross-host message: the receive must not precede the send.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyncPair {
    pub kind: &'static str,
    pub send_host: String,
    pub send_ts: i64,
    pub recv_host: String,
    pub recv_ts: i64,
}

impl SyncPair {
    pub fn slack(&self, offsets: &ClockOffsets) -> i64 {
        (self.recv_ts + offsets.get(&self.recv_host)) - (self.send_ts + offsets.get(&self.send_host))
    }
}

type Stamp = (String, i64);

/// Collects send/receive halves from events in any order and pairs them.
#[derive(Default)]
pub struct PairCollector {
    hosts: BTreeSet<String>,
    sends: HashMap<i64, Vec<(String, Option<String>, i64)>>,
    reads: Vec<(i64, String, i64)>,
    http: [HashMap<ConnTuple, Vec<Stamp>>; 4],
    redis_reads: HashMap<ConnTuple, Vec<Stamp>>,
    redis_replies: HashMap<ConnTuple, Vec<Stamp>>,
    fd_tuple: HashMap<(String, i64), ConnTuple>,
}

impl PairCollector {
    pub fn new() -> Self {
        PairCollector::default()
    }

    pub fn hosts(&self) -> &BTreeSet<String> {
        &self.hosts
    }

    pub fn observe(&mut self, e: &TraceEvent) {
        if !self.hosts.contains(&e.host) {
            self.hosts.insert(e.host.clone());
        }
        let stamp = || (e.host.clone(), e.ts);
        match e.kind() {
            Some(EventKind::ClusterSend) => {
                if let Some(id) = e.int("msg_id") {
                    let dst = e.str("dst").map(str::to_owned);
                    self.sends.entry(id).or_default().push((e.host.clone(), dst, e.ts));
                }
            }
            Some(EventKind::ClusterRead) => {
                if let Some(id) = e.int("msg_id") {
                    self.reads.push((id, e.host.clone(), e.ts));
                }
            }
            Some(k) if k.is_http() => {
                let slot = match k {
                    EventKind::HttpClientRequest => 0,
                    EventKind::HttpServerReceive => 1,
                    EventKind::HttpServerResponse => 2,
                    _ => 3,
                };
                if let Some(t) = e.tuple() {
                    self.http[slot].entry(t).or_default().push(stamp());
                }
            }
            Some(EventKind::StartReadClientQuery) => {
                if let (Some(t), Some(fd)) = (e.tuple(), e.int("fd")) {
                    self.redis_reads.entry(t.clone()).or_default().push(stamp());
                    self.fd_tuple.insert((e.host.clone(), fd), t);
                }
            }
            Some(EventKind::WriteToClientStart) if e.int("msg_id").is_none() => {
                if let Some(t) = e.int("fd").and_then(|fd| self.fd_tuple.get(&(e.host.clone(), fd))) {
                    self.redis_replies.entry(t.clone()).or_default().push(stamp());
                }
            }
            Some(EventKind::FreeClient) => {
                if let Some(fd) = e.int("fd") {
                    self.fd_tuple.remove(&(e.host.clone(), fd));
                }
            }
            _ => {}
        }
    }

    /// Matched pairs in a deterministic order.
    pub fn pairs(&self) -> Vec<SyncPair> {
        let mut out = Vec::new();
        for (id, host, ts) in &self.reads {
            let Some(cands) = self.sends.get(id) else { continue };
            let send = cands
                .iter()
                .find(|(h, dst, _)| h != host && dst.as_deref().is_none_or(|d| d == host));
            if let Some((sh, _, sts)) = send {
                out.push(SyncPair {
                    kind: "cluster",
                    send_host: sh.clone(),
                    send_ts: *sts,
                    recv_host: host.clone(),
                    recv_ts: *ts,
                });
            }
        }
        let zip = |out: &mut Vec<SyncPair>,
                   kind: &'static str,
                   sends: &HashMap<ConnTuple, Vec<Stamp>>,
                   recvs: &HashMap<ConnTuple, Vec<Stamp>>,
                   strict: bool| {
            let mut keys: Vec<&ConnTuple> = sends.keys().filter(|k| recvs.contains_key(*k)).collect();
            keys.sort();
            for k in keys {
                let (s, r) = (&sends[k], &recvs[k]);
                if strict && s.len() != r.len() {
                    continue;
                }
                for ((sh, sts), (rh, rts)) in s.iter().zip(r) {
                    if sh != rh {
                        out.push(SyncPair {
                            kind,
                            send_host: sh.clone(),
                            send_ts: *sts,
                            recv_host: rh.clone(),
                            recv_ts: *rts,
                        });
                    }
                }
            }
        };
        zip(&mut out, "http_request", &self.http[0], &self.http[1], false);
        zip(&mut out, "http_response", &self.http[2], &self.http[3], false);
        zip(&mut out, "redis_request", &self.http[0], &self.redis_reads, true);
        zip(&mut out, "redis_reply", &self.redis_replies, &self.http[3], true);
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct SyncOutcome {
    pub offsets: ClockOffsets,
    pub pairs: usize,
    pub warnings: Vec<String>,
    /// Pairs whose receive still precedes the send after correction.
    pub violations: Vec<SyncPair>,
}

#[derive(Clone, Copy)]
struct Link {
    /// offset[to] - offset[from]
    delta: i64,
    bound: Option<i64>,
}

/// Fits one constant offset per host from matched pairs.
///
/// For a host pair with minimum observed deltas `d_ab` (a sends, b receives)
/// and `d_ba`, the feasible corrections form `[-d_ab, d_ba]`; the midpoint is
/// used. With traffic in one direction only, the feasible correction closest
/// to zero is used.
pub fn estimate_offsets(hosts: &BTreeSet<String>, pairs: &[SyncPair]) -> SyncOutcome {
    let mut out = SyncOutcome {
        offsets: ClockOffsets::zero(hosts.iter().map(String::as_str)),
        pairs: pairs.len(),
        ..Default::default()
    };
    let Some(reference) = hosts.iter().next() else {
        return out;
    };
    let mut min_delta: BTreeMap<(&str, &str), i64> = BTreeMap::new();
    for p in pairs {
        let d = p.recv_ts - p.send_ts;
        min_delta
            .entry((p.send_host.as_str(), p.recv_host.as_str()))
            .and_modify(|m| *m = (*m).min(d))
            .or_insert(d);
    }
    let mut links: BTreeMap<&str, BTreeMap<&str, Link>> = BTreeMap::new();
    for (&(a, b), &d_ab) in &min_delta {
        let link = match min_delta.get(&(b, a)) {
            Some(&d_ba) => Link {
                delta: (d_ba - d_ab).div_euclid(2),
                bound: Some((d_ab + d_ba + 1).div_euclid(2)),
            },
            None => Link {
                delta: (-d_ab).max(0),
                bound: None,
            },
        };
        links.entry(a).or_default().insert(b, link);
        let reverse = Link {
            delta: -link.delta,
            bound: link.bound,
        };
        links.entry(b).or_default().entry(a).or_insert(reverse);
    }
    let mut seen: BTreeSet<&str> = BTreeSet::from([reference.as_str()]);
    let mut queue = VecDeque::from([reference.as_str()]);
    while let Some(h) = queue.pop_front() {
        let (base, bound) = (out.offsets.offsets[h], out.offsets.error_bound_ns[h]);
        for (&n, link) in links.get(h).into_iter().flatten() {
            if seen.insert(n) {
                out.offsets.offsets.insert(n.to_owned(), base + link.delta);
                let b = bound.zip(link.bound).map(|(x, y)| x + y);
                out.offsets.error_bound_ns.insert(n.to_owned(), b);
                queue.push_back(n);
            }
        }
    }
    for h in hosts {
        if !seen.contains(h.as_str()) {
            out.offsets.error_bound_ns.insert(h.clone(), None);
            out.warnings.push(format!(
                "host `{h}` shares no matched messages with `{reference}`; offset left at 0"
            ));
        }
    }
    out.violations = pairs.iter().filter(|p| p.slack(&out.offsets) < 0).cloned().collect();
    if !out.violations.is_empty() {
        out.warnings.push(format!(
            "{} matched pairs remain inverted after correction",
            out.violations.len()
        ));
    }
    out
}

/// Convenience wrapper over in-memory streams.
pub fn estimate_stream_offsets(streams: &[TraceStream]) -> SyncOutcome {
    let mut c = PairCollector::new();
    for s in streams {
        c.observe_host(&s.host);
        for e in &s.events {
            c.observe(e);
        }
    }
    estimate_offsets(c.hosts(), &c.pairs())
}

impl PairCollector {
    fn observe_host(&mut self, host: &str) {
        if !host.is_empty() {
            self.hosts.insert(host.to_owned());
        }
    }
}

/// Merged experiment held in memory.
#[derive(Clone, Debug, Default)]
pub struct Experiment {
    pub events: Vec<TraceEvent>,
    pub offsets: ClockOffsets,
}

impl Experiment {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn bounds(&self) -> Option<(i64, i64)> {
        Some((self.events.first()?.ts, self.events.last()?.ts))
    }

    /// Timestamp on the host's own clock.
    pub fn raw_ts(&self, e: &TraceEvent) -> i64 {
        e.ts - self.offsets.get(&e.host)
    }
}

#[derive(Debug, Error)]
#[error("{}: {source}", path.display())]
pub struct MergeError {
    pub path: PathBuf,
    #[source]
    pub source: TraceError,
}

struct Head {
    key: (i64, String, u64),
    source: usize,
    event: TraceEvent,
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        (&self.key, self.source) == (&other.key, other.source)
    }
}
impl Eq for Head {}
impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Head {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (&self.key, self.source).cmp(&(&other.key, other.source))
    }
}

/// Events paired with their line (or position) in the source.
type Source = Box<dyn Iterator<Item = Result<(TraceEvent, usize), TraceError>>>;

/// Streaming k-way merge ordered by (adjusted ts, host, seq). Each source must
/// already be time-ordered.
pub struct Merger {
    sources: Vec<(PathBuf, Source, Option<i64>)>,
    heap: BinaryHeap<Reverse<Head>>,
    offsets: ClockOffsets,
    primed: bool,
}

impl Merger {
    pub fn new(offsets: ClockOffsets) -> Self {
        Merger {
            sources: Vec::new(),
            heap: BinaryHeap::new(),
            offsets,
            primed: false,
        }
    }

    pub fn add_source(&mut self, label: PathBuf, events: Source) {
        self.sources.push((label, events, None));
    }

    pub fn add_stream(&mut self, stream: TraceStream) {
        let label = stream.path.clone().unwrap_or_else(|| PathBuf::from(&stream.host));
        let events = stream.events.into_iter().enumerate().map(|(i, e)| Ok((e, i + 1)));
        self.add_source(label, Box::new(events));
    }

    pub fn add_file(&mut self, path: &Path) -> Result<(), MergeError> {
        let f = File::open(path).map_err(|e| MergeError {
            path: path.to_owned(),
            source: e.into(),
        })?;
        let mut reader = EventReader::new(BufReader::new(f));
        let iter = std::iter::from_fn(move || {
            let item = reader.next()?;
            Some(item.map(|ev| (ev, reader.line())))
        });
        self.add_source(path.to_owned(), Box::new(iter));
        Ok(())
    }

    fn pull(&mut self, idx: usize) -> Result<(), MergeError> {
        let (path, src, last) = &mut self.sources[idx];
        match src.next() {
            None => Ok(()),
            Some(Err(e)) => Err(MergeError {
                path: path.clone(),
                source: e,
            }),
            Some(Ok((event, line))) => {
                if let Some(prev) = *last {
                    if event.ts < prev {
                        return Err(MergeError {
                            path: path.clone(),
                            source: TraceError::TimeRegression {
                                line,
                                ts: event.ts,
                                prev,
                            },
                        });
                    }
                }
                *last = Some(event.ts);
                let adj = event.ts + self.offsets.get(&event.host);
                self.heap.push(Reverse(Head {
                    key: (adj, event.host.clone(), event.seq),
                    source: idx,
                    event,
                }));
                Ok(())
            }
        }
    }

    /// Next event with its timestamp already adjusted.
    pub fn next_event(&mut self) -> Result<Option<TraceEvent>, MergeError> {
        if !self.primed {
            self.primed = true;
            for i in 0..self.sources.len() {
                self.pull(i)?;
            }
        }
        let Some(Reverse(head)) = self.heap.pop() else {
            return Ok(None);
        };
        self.pull(head.source)?;
        let mut event = head.event;
        event.ts = head.key.0;
        Ok(Some(event))
    }
}

/// Merges in-memory streams into one experiment.
pub fn merge(streams: Vec<TraceStream>, offsets: ClockOffsets) -> Experiment {
    let mut m = Merger::new(offsets.clone());
    let total = streams.iter().map(TraceStream::len).sum();
    for s in streams {
        m.add_stream(s);
    }
    let mut events = Vec::with_capacity(total);
    while let Some(e) = m.next_event().expect("in-memory streams are sorted") {
        events.push(e);
    }
    Experiment { events, offsets }
}

/// `*.jsonl` files of a trace directory in name order.
pub fn trace_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl") && p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Streams every file once to collect matched pairs.
pub fn collect_pairs(files: &[PathBuf]) -> Result<PairCollector, MergeError> {
    let mut c = PairCollector::new();
    for path in files {
        let f = File::open(path).map_err(|e| MergeError {
            path: path.clone(),
            source: e.into(),
        })?;
        let mut reader = EventReader::new(BufReader::new(f));
        for e in reader.by_ref() {
            let e = e.map_err(|source| MergeError {
                path: path.clone(),
                source,
            })?;
            c.observe(&e);
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MergeSummary {
    pub events: u64,
    pub hosts: Vec<String>,
    pub pairs: usize,
    pub violations: usize,
    pub warnings: Vec<String>,
}

/// Estimates offsets (unless `sync` is off), then merges `files` into `out`.
pub fn merge_files<W: Write>(
    files: &[PathBuf],
    sync: bool,
    out: &mut W,
) -> Result<(ClockOffsets, MergeSummary), MergeError> {
    let collector = collect_pairs(files)?;
    let hosts = collector.hosts().clone();
    let pairs = collector.pairs();
    let (offsets, warnings, violations) = if sync {
        let o = estimate_offsets(&hosts, &pairs);
        (o.offsets, o.warnings, o.violations.len())
    } else {
        let zero = ClockOffsets::zero(hosts.iter().map(String::as_str));
        let v = pairs.iter().filter(|p| p.slack(&zero) < 0).count();
        (zero, Vec::new(), v)
    };
    let mut m = Merger::new(offsets.clone());
    for f in files {
        m.add_file(f)?;
    }
    let mut n = 0u64;
    while let Some(e) = m.next_event()? {
        write_event(out, &e).map_err(|source| MergeError {
            path: PathBuf::from("<output>"),
            source,
        })?;
        n += 1;
    }
    Ok((
        offsets,
        MergeSummary {
            events: n,
            hosts: hosts.into_iter().collect(),
            pairs: pairs.len(),
            violations,
            warnings,
        },
    ))
}

/// Loads a merged experiment file (and its `offsets.json` sidecar if present).
pub fn read_experiment(path: &Path) -> Result<Experiment, MergeError> {
    let err = |source| MergeError {
        path: path.to_owned(),
        source,
    };
    let f = File::open(path).map_err(|e| err(e.into()))?;
    let mut events = Vec::new();
    let mut reader = EventReader::new(BufReader::new(f));
    let mut prev = i64::MIN;
    while let Some(e) = reader.next() {
        let e = e.map_err(err)?;
        if e.ts < prev {
            return Err(err(TraceError::TimeRegression {
                line: reader.line(),
                ts: e.ts,
                prev,
            }));
        }
        prev = e.ts;
        events.push(e);
    }
    let sidecar = path.with_file_name("offsets.json");
    let offsets = match ClockOffsets::read(&sidecar) {
        Ok(o) => o,
        Err(_) => {
            let hosts: BTreeSet<&str> = events.iter().map(|e| e.host.as_str()).collect();
            ClockOffsets::zero(hosts)
        }
    };
    Ok(Experiment { events, offsets })
}
