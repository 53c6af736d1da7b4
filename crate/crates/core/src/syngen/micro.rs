//! Gateway -> {User, Order} -> RedisGateway -> Redis over keep-alive HTTP
//! connections, one request chain at a time.

use super::{ev, Emitter, Fault, GenError, Generated, GroundTruth, ScenarioConfig, SpanKey, TruthSpan};
use crate::flows::{FlowSegment, RequestFlow, READ, WRITE};
use crate::spans::SpanKind;

pub const HOSTS: [&str; 5] = ["gateway", "user", "order", "redisgw", "n1"];
pub const REDIS_FD: i64 = 30;
const REDIS_TID: i64 = 3100;

#[derive(Clone, Copy)]
struct Link {
    client: &'static str,
    c_addr: &'static str,
    c_port: i64,
    c_fd: i64,
    c_service: &'static str,
    server: &'static str,
    s_addr: &'static str,
    s_port: i64,
    s_fd: i64,
    s_service: &'static str,
}

const GW_USER: Link = Link {
    client: "gateway",
    c_addr: "10.0.0.1",
    c_port: 50001,
    c_fd: 11,
    c_service: "Gateway",
    server: "user",
    s_addr: "10.0.0.2",
    s_port: 8080,
    s_fd: 21,
    s_service: "User",
};
const GW_ORDER: Link = Link {
    c_port: 50002,
    c_fd: 12,
    server: "order",
    s_addr: "10.0.0.3",
    s_service: "Order",
    ..GW_USER
};
const USER_RG: Link = Link {
    client: "user",
    c_addr: "10.0.0.2",
    c_port: 50003,
    c_fd: 13,
    c_service: "User",
    server: "redisgw",
    s_addr: "10.0.0.4",
    s_port: 8080,
    s_fd: 21,
    s_service: "RedisGateway",
};
const ORDER_RG: Link = Link {
    client: "order",
    c_addr: "10.0.0.3",
    c_port: 50004,
    c_service: "Order",
    s_fd: 22,
    ..USER_RG
};
const RG_REDIS: Link = Link {
    client: "redisgw",
    c_addr: "10.0.0.4",
    c_port: 40000,
    c_fd: 14,
    c_service: "RedisGateway",
    server: "n1",
    s_addr: "10.0.0.5",
    s_port: 6379,
    s_fd: REDIS_FD,
    s_service: "Redis",
};

fn tid(host: &str) -> i64 {
    200 + HOSTS.iter().position(|h| *h == host).unwrap_or(0) as i64
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    em: Emitter,
    spans: Vec<TruthSpan>,
    flows: Vec<RequestFlow>,
    redis_busy: i64,
}

impl Sim<'_> {
    fn http(&mut self, t: i64, l: &Link, name: &str, server: bool) -> SpanKey {
        let (host, service, fd) = if server {
            (l.server, l.s_service, l.s_fd)
        } else {
            (l.client, l.c_service, l.c_fd)
        };
        let raw = self.em.push(
            t,
            ev(host, tid(host), name)
                .with("src_addr", l.c_addr)
                .with("src_port", l.c_port)
                .with("dst_addr", l.s_addr)
                .with("dst_port", l.s_port)
                .with("service", service)
                .with("fd", fd),
        );
        SpanKey {
            host: host.to_owned(),
            kind: if server { SpanKind::Server } else { SpanKind::Client },
            t_start: raw,
        }
    }

    fn span(&mut self, key: SpanKey, service: &str, t_end: i64, parent: Option<SpanKey>, flow: Option<String>) {
        self.spans.push(TruthSpan {
            key,
            service: service.to_owned(),
            t_end,
            parent,
            flow,
        });
    }

    /// User or Order handling one request; returns when the response leaves.
    fn serve_mid(&mut self, l: &Link, recv: i64, parent: SpanKey) -> i64 {
        let key = self.http(recv, l, "http_server_receive", true);
        let down = if l.server == "user" { USER_RG } else { ORDER_RG };
        let t = recv + self.em.uniform(10_000, 30_000);
        let cs = self.http(t, &down, "http_client_request", false);
        let arrive = t + self.em.net_delay();
        let done = self.serve_rg(&down, arrive, cs.clone());
        let back = done + self.em.net_delay();
        let ce = self.http(back, &down, "http_client_response", false);
        self.span(cs, down.c_service, ce.t_start, Some(key.clone()), None);
        let t = back + self.em.uniform(5_000, 15_000);
        let re = self.http(t, l, "http_server_response", true);
        self.span(key, l.s_service, re.t_start, Some(parent), None);
        t
    }

    fn serve_rg(&mut self, l: &Link, recv: i64, parent: SpanKey) -> i64 {
        let key = self.http(recv, l, "http_server_receive", true);
        let t = recv + self.em.uniform(5_000, 10_000);
        let back = self.call_redis(t, key.clone());
        let t = back + self.em.uniform(3_000, 8_000);
        let re = self.http(t, l, "http_server_response", true);
        self.span(key, l.s_service, re.t_start, Some(parent), None);
        t
    }

    fn call_redis(&mut self, t: i64, parent: SpanKey) -> i64 {
        let l = RG_REDIS;
        let cs = self.http(t, &l, "http_client_request", false);
        let h = l.server;
        let fd = REDIS_FD;
        let mut r = (t + self.em.net_delay()).max(self.redis_busy);
        let r0 = self.em.push(
            r,
            ev(h, REDIS_TID, "start_read_client_query")
                .with("fd", fd)
                .with("bytes", 64)
                .with("conn_type", "client")
                .with("src_addr", l.c_addr)
                .with("src_port", l.c_port)
                .with("dst_addr", l.s_addr)
                .with("dst_port", l.s_port),
        );
        r += self.em.uniform(2_000, 5_000);
        let c0 = self.em.push(
            r,
            ev(h, REDIS_TID, "call_command_start")
                .with("fd", fd)
                .with("command", "get"),
        );
        r += self.em.service(self.cfg.service);
        let c1 = self.em.push(r, ev(h, REDIS_TID, "call_command_end").with("fd", fd));
        r += 1_000;
        self.em
            .push(r, ev(h, REDIS_TID, "end_read_client_query").with("fd", fd));
        r += 2_000;
        let w0 = self.em.push(
            r,
            ev(h, REDIS_TID, "write_to_client_start")
                .with("fd", fd)
                .with("bytes", 128),
        );
        r += 2_000;
        let w1 = self.em.push(r, ev(h, REDIS_TID, "write_to_client_end").with("fd", fd));
        self.redis_busy = r + 1;

        let id = format!("{h}:{fd}#0:{}", self.flows.len() + 1);
        let seg = |label: &str, t0: i64, t1: i64| FlowSegment {
            host: h.to_owned(),
            tid: REDIS_TID,
            label: label.to_owned(),
            t0,
            t1,
            fd: Some(fd),
            msg_id: None,
            peer: None,
        };
        self.flows.push(RequestFlow {
            id: id.clone(),
            host: h.to_owned(),
            command: "get".into(),
            complete: true,
            tuple: cs_tuple(&l),
            segments: vec![seg(READ, r0, c0), seg("get", c0, c1), seg(WRITE, w0, w1)],
            dangling: Vec::new(),
        });

        let back = r + self.em.net_delay();
        let ce = self.http(back, &l, "http_client_response", false);
        self.span(cs, l.c_service, ce.t_start, Some(parent), Some(id));
        back
    }

    fn run(&mut self) {
        let group = if self.cfg.has(|f| *f == Fault::PipelinedHttp) {
            2
        } else {
            1
        };
        let mut t = 1_000_000;
        let mut issued = 0;
        let mut g = 0;
        while issued < self.cfg.requests {
            let l = if g % 2 == 0 { GW_USER } else { GW_ORDER };
            let k = group.min(self.cfg.requests - issued);
            let mut sent = Vec::with_capacity(k);
            let mut arrival = i64::MIN;
            for j in 0..k {
                let ts = t + j as i64 * self.cfg.pipeline_gap_ns;
                let key = self.http(ts, &l, "http_client_request", false);
                arrival = (ts + self.em.net_delay()).max(arrival + 1);
                sent.push((key, arrival));
            }
            let mut free = i64::MIN;
            let mut back = i64::MIN;
            for (key, arrival) in sent {
                let done = self.serve_mid(&l, arrival.max(free), key.clone());
                free = done + 1_000;
                back = (done + self.em.net_delay()).max(back + 1);
                let ce = self.http(back, &l, "http_client_response", false);
                self.span(key, l.c_service, ce.t_start, None, None);
            }
            issued += k;
            g += 1;
            t = back + self.em.uniform(20_000, 80_000);
        }
    }
}

fn cs_tuple(l: &Link) -> Option<crate::event::ConnTuple> {
    Some(crate::event::ConnTuple {
        src_addr: l.c_addr.to_owned(),
        src_port: l.c_port,
        dst_addr: l.s_addr.to_owned(),
        dst_port: l.s_port,
    })
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Generated, GenError> {
    let em = Emitter::new(cfg, HOSTS.iter().map(|h| h.to_string()).collect())?;
    let mut sim = Sim {
        cfg,
        em,
        spans: Vec::new(),
        flows: Vec::new(),
        redis_busy: 0,
    };
    sim.run();
    sim.spans.sort_by(|a, b| a.key.cmp(&b.key));
    let truth = GroundTruth {
        flows: sim.flows,
        spans: sim.spans,
        ..Default::default()
    };
    Ok(sim.em.finish(truth))
}
