//! Microservice spans from the four HTTP tracepoints, and their alignment with
//! Redis request flows.
//!
//! No trace context is involved: client and server halves are paired by the
//! connection 4-tuple in FIFO order, and outbound calls are parented to the
//! innermost open server span of the same service on the same host.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::event::{ConnTuple, EventKind, TraceEvent};
use crate::flows::RequestFlow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Client,
    Server,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub id: usize,
    pub service: String,
    pub host: String,
    pub kind: SpanKind,
    pub t_start: i64,
    /// `None` while the closing half is missing.
    pub t_end: Option<i64>,
    pub parent: Option<usize>,
    pub tuple: ConnTuple,
    pub fd: i64,
    /// Redis flows attached under this span.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flows: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanForest {
    pub spans: Vec<Span>,
    /// Spans with a missing half.
    pub unmatched: Vec<usize>,
    /// Flows not attached to any span.
    #[serde(default)]
    pub root_flows: Vec<String>,
}

impl SpanForest {
    pub fn roots(&self) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(|s| s.parent.is_none())
    }

    pub fn children(&self, id: usize) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(move |s| s.parent == Some(id))
    }

    /// Longest root-to-leaf chain, in edges. Attached flows count as one more
    /// level when `with_flows` is set.
    pub fn depth(&self, with_flows: bool) -> usize {
        let mut depth = vec![0usize; self.spans.len()];
        let mut best = 0;
        // Parents always precede children in `spans`.
        for s in &self.spans {
            let d = s.parent.map_or(0, |p| depth[p] + 1);
            depth[s.id] = d;
            let leaf = d + usize::from(with_flows && !s.flows.is_empty());
            best = best.max(leaf);
        }
        best
    }

    pub fn in_window(&self, t0: i64, t1: i64) -> Vec<&Span> {
        self.spans
            .iter()
            .filter(|s| s.t_start <= t1 && s.t_end.unwrap_or(i64::MAX) >= t0)
            .collect()
    }

    /// Children that do not sit inside their parent, allowing `tolerance` ns
    /// on each side.
    pub fn containment_violations(&self, tolerance: i64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in &self.spans {
            let Some(p) = s.parent.map(|p| &self.spans[p]) else {
                continue;
            };
            let (Some(se), Some(pe)) = (s.t_end, p.t_end) else {
                continue;
            };
            if s.t_start + tolerance < p.t_start || se > pe + tolerance {
                out.push((p.id, s.id));
            }
        }
        out
    }
}

/// Pairs HTTP halves into spans. Events must be in merged order.
pub fn reconstruct_spans<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> SpanForest {
    let mut spans: Vec<Span> = Vec::new();
    let mut open_client: HashMap<ConnTuple, VecDeque<usize>> = HashMap::new();
    let mut open_server: HashMap<ConnTuple, VecDeque<usize>> = HashMap::new();
    let mut clients_by_tuple: HashMap<ConnTuple, Vec<usize>> = HashMap::new();
    let mut servers_seen: HashMap<ConnTuple, usize> = HashMap::new();
    // Open server spans per (host, service), in start order.
    let mut serving: HashMap<(String, String), Vec<usize>> = HashMap::new();

    for e in events {
        let Some(kind) = e.kind().filter(|k| k.is_http()) else {
            continue;
        };
        let Some(tuple) = e.tuple() else { continue };
        let service = e.str("service").unwrap_or_default().to_owned();
        match kind {
            EventKind::HttpClientRequest | EventKind::HttpServerReceive => {
                let id = spans.len();
                let (span_kind, parent) = if kind == EventKind::HttpClientRequest {
                    clients_by_tuple.entry(tuple.clone()).or_default().push(id);
                    open_client.entry(tuple.clone()).or_default().push_back(id);
                    let parent = serving
                        .get(&(e.host.clone(), service.clone()))
                        .and_then(|v| v.last().copied());
                    (SpanKind::Client, parent)
                } else {
                    let k = servers_seen.entry(tuple.clone()).or_insert(0);
                    let parent = clients_by_tuple.get(&tuple).and_then(|v| v.get(*k).copied());
                    *k += 1;
                    open_server.entry(tuple.clone()).or_default().push_back(id);
                    serving.entry((e.host.clone(), service.clone())).or_default().push(id);
                    (SpanKind::Server, parent)
                };
                spans.push(Span {
                    id,
                    service,
                    host: e.host.clone(),
                    kind: span_kind,
                    t_start: e.ts,
                    t_end: None,
                    parent,
                    tuple,
                    fd: e.int("fd").unwrap_or_default(),
                    flows: Vec::new(),
                });
            }
            EventKind::HttpClientResponse => {
                if let Some(id) = open_client.get_mut(&tuple).and_then(VecDeque::pop_front) {
                    spans[id].t_end = Some(e.ts);
                }
            }
            _ => {
                if let Some(id) = open_server.get_mut(&tuple).and_then(VecDeque::pop_front) {
                    spans[id].t_end = Some(e.ts);
                    if let Some(v) = serving.get_mut(&(spans[id].host.clone(), spans[id].service.clone())) {
                        v.retain(|&x| x != id);
                    }
                }
            }
        }
    }
    let unmatched = spans.iter().filter(|s| s.t_end.is_none()).map(|s| s.id).collect();
    SpanForest {
        spans,
        unmatched,
        root_flows: Vec::new(),
    }
}

/// Nests each flow under the client span that issued it: the k-th flow on a
/// connection 4-tuple goes under the k-th client span on that tuple.
pub fn attach_redis_spans(forest: &mut SpanForest, flows: &[RequestFlow]) {
    let mut clients: HashMap<&ConnTuple, Vec<usize>> = HashMap::new();
    for s in forest.spans.iter().filter(|s| s.kind == SpanKind::Client) {
        clients.entry(&s.tuple).or_default().push(s.id);
    }
    let mut by_tuple: BTreeMap<&ConnTuple, Vec<&RequestFlow>> = BTreeMap::new();
    let mut roots = Vec::new();
    for f in flows {
        match &f.tuple {
            Some(t) if clients.contains_key(t) => by_tuple.entry(t).or_default().push(f),
            _ => roots.push(f.id.clone()),
        }
    }
    let mut attach = Vec::new();
    for (t, mut fs) in by_tuple {
        fs.sort_by_key(|f| (f.start(), f.id.clone()));
        let ids = &clients[t];
        for (k, f) in fs.into_iter().enumerate() {
            match ids.get(k) {
                Some(&id) => attach.push((id, f.id.clone())),
                None => roots.push(f.id.clone()),
            }
        }
    }
    for (id, flow) in attach {
        forest.spans[id].flows.push(flow);
    }
    forest.root_flows = roots;
}
