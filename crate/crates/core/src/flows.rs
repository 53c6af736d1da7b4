//! Cross-node request flows built from analysis records.
//!
//! Hops between hosts are joined only by message id equality.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{Records, SpanRecord};
use crate::event::ConnTuple;

pub const READ: &str = "Read";
pub const BUS_TRANSIT: &str = "Bus transit";
pub const CLUSTER_READ: &str = "Cluster read";
pub const WRITE: &str = "Write to client";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSegment {
    pub host: String,
    pub tid: i64,
    pub label: String,
    pub t0: i64,
    pub t1: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<i64>,
    /// Receiving host of a bus transit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
}

impl FlowSegment {
    fn order_key(&self) -> (i64, i64, &str, &str) {
        (self.t0, self.t1, self.host.as_str(), self.label.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestFlow {
    /// The origin request id.
    pub id: String,
    pub host: String,
    pub command: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuple: Option<ConnTuple>,
    pub segments: Vec<FlowSegment>,
    /// Message ids sent without a matching read.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dangling: Vec<i64>,
}

impl RequestFlow {
    pub fn start(&self) -> Option<i64> {
        self.segments.iter().map(|s| s.t0).min()
    }

    pub fn end(&self) -> Option<i64> {
        self.segments.iter().map(|s| s.t1).max()
    }

    pub fn hosts(&self) -> Vec<&str> {
        let mut h: Vec<&str> = self.segments.iter().map(|s| s.host.as_str()).collect();
        h.sort_unstable();
        h.dedup();
        h
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("flow `{0}` is incomplete")]
    IncompleteFlow(String),
}

/// One flow per executed command, in command order.
pub fn build_flows(records: &Records) -> Vec<RequestFlow> {
    let mut sends_by_req: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in records.sends.iter().enumerate() {
        if let Some(r) = &s.req_id {
            sends_by_req.entry(r.as_str()).or_default().push(i);
        }
    }
    let mut reads: HashMap<(i64, &str), &SpanRecord> = HashMap::new();
    for r in &records.cluster_reads {
        if let Some(id) = r.msg_id {
            reads.entry((id, r.host.as_str())).or_insert(r);
        }
    }
    let mut deliveries: HashMap<(i64, &str), Vec<&SpanRecord>> = HashMap::new();
    for d in &records.deliveries {
        if let Some(id) = d.msg_id {
            deliveries.entry((id, d.host.as_str())).or_default().push(d);
        }
    }

    let mut flows = Vec::with_capacity(records.commands.len());
    for c in &records.commands {
        let mut segs = Vec::new();
        let mut complete = c.end.is_some() && c.reply.is_some();
        let mut dangling = Vec::new();
        let seg = |host: &str, tid: i64, label: &str, t0: i64, t1: i64| FlowSegment {
            host: host.to_owned(),
            tid,
            label: label.to_owned(),
            t0,
            t1,
            fd: None,
            msg_id: None,
            peer: None,
        };
        if let Some(t0) = c.read_start {
            segs.push(FlowSegment {
                fd: Some(c.fd),
                ..seg(&c.host, c.read_tid.unwrap_or(c.tid), READ, t0, c.start)
            });
        }
        if let Some(end) = c.end {
            segs.push(FlowSegment {
                fd: Some(c.fd),
                ..seg(&c.host, c.tid, &c.command, c.start, end)
            });
        }
        for &i in sends_by_req.get(c.req_id.as_str()).into_iter().flatten() {
            let s = &records.sends[i];
            let peer = s.dst.as_deref();
            let read = peer.and_then(|p| reads.get(&(s.msg_id, p)));
            let Some(read) = read else {
                complete = false;
                dangling.push(s.msg_id);
                continue;
            };
            segs.push(FlowSegment {
                msg_id: Some(s.msg_id),
                peer: Some(read.host.clone()),
                ..seg(&s.host, s.tid, BUS_TRANSIT, s.ts, read.t0)
            });
            segs.push(FlowSegment {
                fd: Some(read.fd),
                msg_id: Some(s.msg_id),
                ..seg(&read.host, read.tid, CLUSTER_READ, read.t0, read.t1)
            });
            for d in deliveries.get(&(s.msg_id, read.host.as_str())).into_iter().flatten() {
                segs.push(FlowSegment {
                    fd: Some(d.fd),
                    msg_id: Some(s.msg_id),
                    ..seg(&d.host, d.tid, WRITE, d.t0, d.t1)
                });
            }
        }
        if let Some((t0, t1, tid)) = c.reply {
            segs.push(FlowSegment {
                fd: Some(c.fd),
                ..seg(&c.host, tid, WRITE, t0, t1)
            });
        }
        segs.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        flows.push(RequestFlow {
            id: c.req_id.clone(),
            host: c.host.clone(),
            command: c.command.clone(),
            complete,
            tuple: c.tuple.clone(),
            segments: segs,
            dangling,
        });
    }
    flows
}

/// Segments on the causal chain that finishes last: the origin segments plus
/// the one branch (bus transit, remote read, deliveries) ending latest.
pub fn critical_path(flow: &RequestFlow) -> Vec<&FlowSegment> {
    let mut branches: BTreeMap<&str, Vec<&FlowSegment>> = BTreeMap::new();
    let mut origin = Vec::new();
    for s in &flow.segments {
        match s.label.as_str() {
            BUS_TRANSIT => branches.entry(s.peer.as_deref().unwrap_or("")).or_default().push(s),
            _ if s.host != flow.host => branches.entry(s.host.as_str()).or_default().push(s),
            _ => origin.push(s),
        }
    }
    let mut best: Vec<&FlowSegment> = origin.clone();
    let mut best_end = origin.iter().map(|s| s.t1).max().unwrap_or(i64::MIN);
    for segs in branches.values() {
        let end = segs.iter().map(|s| s.t1).max().unwrap_or(i64::MIN);
        if end > best_end {
            best_end = end;
            best = origin
                .iter()
                .copied()
                .filter(|s| s.label != WRITE)
                .chain(segs.iter().copied())
                .collect();
        }
    }
    best.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    best
}

/// Time per label along the critical path. Each segment is charged up to the
/// start of the next one (the last up to the flow end), so the values sum to
/// `end - start` exactly.
pub fn flow_latency_breakdown(flow: &RequestFlow) -> Result<BTreeMap<String, i64>, FlowError> {
    if !flow.complete {
        return Err(FlowError::IncompleteFlow(flow.id.clone()));
    }
    let path = critical_path(flow);
    let end = flow.end().unwrap_or_default();
    let mut out = BTreeMap::new();
    for (i, s) in path.iter().enumerate() {
        let until = path.get(i + 1).map_or(end, |n| n.t0);
        *out.entry(s.label.clone()).or_insert(0) += until - s.t0;
    }
    Ok(out)
}
