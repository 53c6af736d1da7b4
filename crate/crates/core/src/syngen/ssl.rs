//! An SSL connection whose pending reads end in two frees from two threads.

use super::{ev, Emitter, Fault, FaultSite, GenError, Generated, GroundTruth, ScenarioConfig};
use crate::flows::{FlowSegment, RequestFlow, READ, WRITE};

pub const HOST: &str = "n1";
pub const SSL_FD: i64 = 132;
pub const TID_A: i64 = 3201;
pub const TID_B: i64 = 3202;
const READ_SIZE: i64 = 16384;

pub fn generate(cfg: &ScenarioConfig) -> Result<Generated, GenError> {
    let mut em = Emitter::new(cfg, vec![HOST.to_owned()])?;
    let fd = SSL_FD;
    let h = HOST;
    let mut t = 1_000_000;
    let seg = |label: &str, tid: i64, t0: i64, t1: i64| FlowSegment {
        host: h.to_owned(),
        tid,
        label: label.to_owned(),
        t0,
        t1,
        fd: Some(fd),
        msg_id: None,
        peer: None,
    };

    // An ordinary command on the first connection, closed cleanly.
    let r0 = em.push(
        t,
        ev(h, TID_A, "start_read_client_query")
            .with("fd", fd)
            .with("bytes", 64)
            .with("conn_type", "client"),
    );
    t += 3_000;
    let c0 = em.push(
        t,
        ev(h, TID_A, "call_command_start").with("fd", fd).with("command", "get"),
    );
    t += em.service(cfg.service);
    let c1 = em.push(t, ev(h, TID_A, "call_command_end").with("fd", fd));
    t += 1_000;
    em.push(t, ev(h, TID_A, "end_read_client_query").with("fd", fd));
    t += 2_000;
    let w0 = em.push(
        t,
        ev(h, TID_A, "write_to_client_start").with("fd", fd).with("bytes", 16),
    );
    t += 2_000;
    let w1 = em.push(t, ev(h, TID_A, "write_to_client_end").with("fd", fd));
    t += 5_000;
    em.push(t, ev(h, TID_A, "free_client").with("fd", fd));
    let flow = RequestFlow {
        id: format!("{h}:{fd}#0:1"),
        host: h.to_owned(),
        command: "get".into(),
        complete: true,
        tuple: None,
        segments: vec![
            seg(READ, TID_A, r0, c0),
            seg("get", TID_A, c0, c1),
            seg(WRITE, TID_A, w0, w1),
        ],
        dangling: Vec::new(),
    };

    // The reconnect that goes through the pending-read path.
    t += 100_000;
    em.push(
        t,
        ev(h, TID_A, "start_read_client_query")
            .with("fd", fd)
            .with("bytes", 0)
            .with("conn_type", "client"),
    );
    t += 1_000;
    em.push(t, ev(h, TID_A, "end_read_client_query").with("fd", fd));
    let ssl = |read: i64, pending: i64, tid: i64| {
        ev(h, tid, "ssl_read")
            .with("fd", fd)
            .with("bytes_requested", READ_SIZE)
            .with("bytes_read", read)
            .with("pending", pending)
    };
    let [b1, b2, b3] = cfg.ssl_bytes;
    for (i, b) in [b1, b2, b3].into_iter().enumerate() {
        t += 10_000;
        em.push(t, ssl(b, 1, TID_A));
        if i < 2 {
            t += 5_000;
            em.push(t, ev(h, TID_A, "run_pending_reads"));
        }
    }
    t += 10_000;
    em.push(t, ssl(-1, 0, TID_A));
    t += 2_000;
    let f1 = em.push(t, ev(h, TID_A, "free_client").with("fd", fd));
    let mut faults = Vec::new();
    if cfg.has(|f| *f == Fault::SslPendingDoubleFree) {
        t += 20_000;
        em.push(t, ssl(-1, 0, TID_B));
        t += 2_000;
        let f2 = em.push(t, ev(h, TID_B, "free_client").with("fd", fd));
        faults.push(FaultSite {
            fault: "ssl-pending-double-free".into(),
            host: h.to_owned(),
            t0: f1,
            t1: f2,
            tids: vec![TID_A, TID_B],
            fd: Some(fd),
            msg_id: None,
        });
    }
    Ok(em.finish(GroundTruth {
        flows: vec![flow],
        faults,
        ..Default::default()
    }))
}
