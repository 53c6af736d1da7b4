//! Pub/sub over a Redis cluster: a publisher on n1, a subscriber on n2, and
//! cluster bus messages between them.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{ev, Emitter, Fault, FaultSite, GenError, Generated, GroundTruth, ScenarioConfig};
use crate::flows::{FlowSegment, RequestFlow, BUS_TRANSIT, CLUSTER_READ, READ, WRITE};

pub const PUBLISHER_FD: i64 = 10;
pub const SUBSCRIBER_FD: i64 = 20;
const BUS_FD: i64 = 100;
/// Slack before the first publish so early pings do not collide with it.
const T0: i64 = 1_000_000;
const STALL_WINDOW_NS: i64 = 10_000_000;

pub fn host(i: usize) -> String {
    format!("n{}", i + 1)
}

pub fn main_tid(i: usize) -> i64 {
    3100 + i as i64
}

#[derive(Clone, Copy, PartialEq)]
enum MsgKind {
    Publish,
    Ping,
    Pong,
}

impl MsgKind {
    fn label(self, broadcast: bool) -> &'static str {
        match self {
            MsgKind::Publish if broadcast => "broadcast",
            MsgKind::Publish => "publish",
            MsgKind::Ping => "ping",
            MsgKind::Pong => "pong",
        }
    }
}

enum Job {
    Publish(usize),
    Message {
        msg_id: i64,
        from: usize,
        to: usize,
        kind: MsgKind,
        bytes: i64,
        origin: Option<usize>,
    },
    Ping(usize),
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    em: Emitter,
    n: usize,
    busy: Vec<i64>,
    queue: BinaryHeap<Reverse<(i64, u64, usize)>>,
    jobs: Vec<Option<Job>>,
    next_msg: i64,
    broadcast: bool,
    flows: Vec<RequestFlow>,
    stall: Option<(usize, usize)>,
    stall_delay: i64,
    faults: Vec<FaultSite>,
}

impl Sim<'_> {
    fn schedule(&mut self, at: i64, job: Job) {
        let id = self.jobs.len();
        self.jobs.push(Some(job));
        self.queue.push(Reverse((at, id as u64, id)));
    }

    fn subscriber(&self) -> usize {
        usize::from(self.n > 1)
    }

    fn seg(&self, host: usize, label: &str, t0: i64, t1: i64) -> FlowSegment {
        FlowSegment {
            host: self::host(host),
            tid: main_tid(host),
            label: label.to_owned(),
            t0,
            t1,
            fd: None,
            msg_id: None,
            peer: None,
        }
    }

    fn new_msg(&mut self) -> i64 {
        self.next_msg += 1;
        self.next_msg - 1
    }

    /// Puts one copy of message `msg_id` on the bus towards `to`.
    #[allow(clippy::too_many_arguments)]
    fn send(&mut self, t: i64, msg_id: i64, from: usize, to: usize, kind: MsgKind, bytes: i64, origin: Option<usize>) {
        let raw = self.em.push(
            t,
            ev(&host(from), main_tid(from), "cluster_send")
                .with("fd", BUS_FD + to as i64)
                .with("msg_id", msg_id)
                .with("bytes", bytes)
                .with("kind", kind.label(self.broadcast))
                .with("dst", host(to)),
        );
        if let Some(i) = origin {
            if self.cfg.has(|f| *f == Fault::Truncate) && i + 1 == self.cfg.requests {
                self.flows[i].complete = false;
                self.flows[i].dangling.push(msg_id);
                return;
            }
            let mut s = self.seg(from, BUS_TRANSIT, raw, raw);
            s.msg_id = Some(msg_id);
            s.peer = Some(host(to));
            self.flows[i].segments.push(s);
        }
        let arrive = t + self.em.net_delay();
        self.schedule(
            arrive,
            Job::Message {
                msg_id,
                from,
                to,
                kind,
                bytes,
                origin,
            },
        );
    }

    fn payload(&self, i: usize) -> i64 {
        let Some((si, _)) = self.stall else {
            return self.cfg.payload;
        };
        let at = |k: usize| k as i64 * self.cfg.publish_interval_ns;
        let lo = at(si) - STALL_WINDOW_NS;
        let hi = at(si) + self.stall_delay + STALL_WINDOW_NS;
        if (lo..=hi).contains(&at(i)) {
            self.cfg.payload * self.cfg.stall_burst
        } else {
            self.cfg.payload
        }
    }

    fn publish(&mut self, i: usize, start: i64) -> i64 {
        let h = host(0);
        let tid = main_tid(0);
        let v = self.payload(i);
        let fd = PUBLISHER_FD;
        let mut t = start;
        let r0 = self.em.push(
            t,
            ev(&h, tid, "start_read_client_query")
                .with("fd", fd)
                .with("bytes", v)
                .with("conn_type", "client")
                .with("mem", 16384 + v),
        );
        t += self.em.uniform(2_000, 5_000);
        let c0 = self.em.push(
            t,
            ev(&h, tid, "call_command_start")
                .with("fd", fd)
                .with("command", "publish"),
        );
        self.flows.push(RequestFlow {
            id: format!("{h}:{fd}#0:{}", i + 1),
            host: h.clone(),
            command: "publish".into(),
            complete: true,
            tuple: None,
            segments: Vec::new(),
            dangling: Vec::new(),
        });
        let targets: Vec<usize> = if self.broadcast {
            (1..self.n).collect()
        } else if self.n > 1 {
            vec![self.subscriber()]
        } else {
            Vec::new()
        };
        // A broadcast is one message; every copy carries the same id.
        let msg_id = self.new_msg();
        for to in targets {
            t += 1_000;
            let bytes = v + self.cfg.gossip_header;
            self.send(t, msg_id, 0, to, MsgKind::Publish, bytes, Some(i));
        }
        t += 1_000;
        self.em.push(t, ev(&h, tid, "add_file_event").with("fd", fd));
        t += self.em.service(self.cfg.service);
        let c1 = self.em.push(t, ev(&h, tid, "call_command_end").with("fd", fd));
        t += 1_000;
        self.em.push(t, ev(&h, tid, "end_read_client_query").with("fd", fd));
        t += 2_000;
        let w0 = self
            .em
            .push(t, ev(&h, tid, "write_to_client_start").with("fd", fd).with("bytes", 32));
        t += 1_000;
        self.em.push(t, ev(&h, tid, "delete_file_event").with("fd", fd));
        t += 2_000;
        let w1 = self.em.push(t, ev(&h, tid, "write_to_client_end").with("fd", fd));
        let with_fd = |mut s: FlowSegment| {
            s.fd = Some(fd);
            s
        };
        let segs = [
            with_fd(self.seg(0, READ, r0, c0)),
            with_fd(self.seg(0, "publish", c0, c1)),
            with_fd(self.seg(0, WRITE, w0, w1)),
        ];
        self.flows[i].segments.extend(segs);
        t
    }

    #[allow(clippy::too_many_arguments)]
    fn message(
        &mut self,
        start: i64,
        msg_id: i64,
        from: usize,
        to: usize,
        kind: MsgKind,
        bytes: i64,
        origin: Option<usize>,
    ) -> i64 {
        let h = host(to);
        let tid = main_tid(to);
        let fd = BUS_FD + from as i64;
        let mut t = start;
        let r0 = self.em.push(
            t,
            ev(&h, tid, "cluster_read")
                .with("fd", fd)
                .with("msg_id", msg_id)
                .with("bytes", bytes),
        );
        t += self.em.uniform(5_000, 15_000);
        let stalled = origin.is_some() && self.stall == origin.map(|o| (o, to));
        if stalled {
            t += self.stall_delay;
        }
        let r1 = self.em.push(
            t,
            ev(&h, tid, "cluster_process_packet")
                .with("fd", fd)
                .with("msg_id", msg_id),
        );
        if stalled {
            self.faults.push(FaultSite {
                fault: "read-stall".into(),
                host: h.clone(),
                t0: r0,
                t1: r1,
                tids: vec![tid],
                fd: Some(fd),
                msg_id: Some(msg_id),
            });
        }
        let mut segs = Vec::new();
        if let Some(i) = origin {
            let transit = self.flows[i]
                .segments
                .iter_mut()
                .find(|s| s.label == BUS_TRANSIT && s.msg_id == Some(msg_id) && s.peer.as_deref() == Some(h.as_str()))
                .expect("transit recorded at send");
            transit.t1 = r0;
            let mut s = self.seg(to, CLUSTER_READ, r0, r1);
            s.fd = Some(fd);
            s.msg_id = Some(msg_id);
            segs.push(s);
        }
        match kind {
            MsgKind::Publish if to == self.subscriber() => {
                t += 1_000;
                let v = bytes - self.cfg.gossip_header;
                let w0 = self.em.push(
                    t,
                    ev(&h, tid, "write_to_client_start")
                        .with("fd", SUBSCRIBER_FD)
                        .with("msg_id", msg_id)
                        .with("bytes", v),
                );
                t += 2_000;
                let w1 = self
                    .em
                    .push(t, ev(&h, tid, "write_to_client_end").with("fd", SUBSCRIBER_FD));
                let mut s = self.seg(to, WRITE, w0, w1);
                s.fd = Some(SUBSCRIBER_FD);
                s.msg_id = Some(msg_id);
                segs.push(s);
            }
            MsgKind::Ping => {
                t += 1_000;
                let id = self.new_msg();
                self.send(t, id, to, from, MsgKind::Pong, self.cfg.gossip_header, None);
            }
            _ => {}
        }
        if let Some(i) = origin {
            self.flows[i].segments.extend(segs);
        }
        t
    }

    fn ping(&mut self, a: usize, start: i64) -> i64 {
        let mut t = start;
        for b in (0..self.n).filter(|&b| b != a) {
            t += 1_000;
            let id = self.new_msg();
            self.send(t, id, a, b, MsgKind::Ping, self.cfg.gossip_header, None);
        }
        t
    }

    fn run(&mut self) {
        while let Some(Reverse((at, _, id))) = self.queue.pop() {
            let job = self.jobs[id].take().expect("job runs once");
            let node = match &job {
                Job::Publish(_) => 0,
                Job::Message { to, .. } => *to,
                Job::Ping(a) => *a,
            };
            let start = at.max(self.busy[node]);
            let end = match job {
                Job::Publish(i) => self.publish(i, start),
                Job::Message {
                    msg_id,
                    from,
                    to,
                    kind,
                    bytes,
                    origin,
                } => self.message(start, msg_id, from, to, kind, bytes, origin),
                Job::Ping(a) => self.ping(a, start),
            };
            self.busy[node] = end + 1;
        }
    }
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Generated, GenError> {
    let n = cfg.nodes;
    let broadcast = cfg.has(|f| *f == Fault::BroadcastAmplification);
    if broadcast && n < 2 {
        return Err(GenError::ConfigInvalid(
            "broadcast amplification needs at least 2 nodes".into(),
        ));
    }
    let stall_delay = cfg.faults.iter().find_map(|f| match f {
        Fault::ReadStall { delay_ns } => Some(*delay_ns),
        _ => None,
    });
    if stall_delay.is_some_and(|d| d <= 0) {
        return Err(GenError::ConfigInvalid("read stall delay must be positive".into()));
    }
    let stall = match stall_delay {
        Some(_) if n > 1 && cfg.requests > 0 => Some((cfg.requests / 2, 1)),
        Some(_) => {
            return Err(GenError::ConfigInvalid(
                "read stall needs a peer and at least one publish".into(),
            ))
        }
        None => None,
    };
    let em = Emitter::new(cfg, (0..n).map(host).collect())?;
    let mut sim = Sim {
        cfg,
        em,
        n,
        busy: vec![0; n],
        queue: BinaryHeap::new(),
        jobs: Vec::new(),
        next_msg: 1,
        broadcast,
        flows: Vec::with_capacity(cfg.requests),
        stall,
        stall_delay: stall_delay.unwrap_or(0),
        faults: Vec::new(),
    };
    for i in 0..cfg.requests {
        sim.schedule(T0 + i as i64 * cfg.publish_interval_ns, Job::Publish(i));
    }
    if cfg.pings && n > 1 {
        let horizon = T0 + cfg.requests as i64 * cfg.publish_interval_ns + sim.stall_delay;
        let mut k = 0;
        while k * cfg.ping_interval_ns <= horizon {
            for a in 0..n {
                let stagger = cfg.publish_interval_ns / 2 + a as i64 * 7_000;
                sim.schedule(k * cfg.ping_interval_ns + stagger, Job::Ping(a));
            }
            k += 1;
        }
    }
    sim.run();
    for f in &mut sim.flows {
        f.segments
            .sort_by(|a, b| (a.t0, a.t1, &a.host, &a.label).cmp(&(b.t0, b.t1, &b.host, &b.label)));
    }
    let truth = GroundTruth {
        flows: sim.flows,
        faults: sim.faults,
        ..Default::default()
    };
    Ok(sim.em.finish(truth))
}
