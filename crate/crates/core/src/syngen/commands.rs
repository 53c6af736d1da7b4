//! A single node serving get/set/subscribe/publish from a few clients.

use super::{ev, Emitter, GenError, Generated, GroundTruth, ScenarioConfig};
use crate::flows::{FlowSegment, RequestFlow, READ, WRITE};

pub const HOST: &str = "n1";
pub const COMMANDS: [&str; 4] = ["get", "set", "subscribe", "publish"];
pub const FIRST_FD: i64 = 40;
const TID: i64 = 3100;

pub fn generate(cfg: &ScenarioConfig) -> Result<Generated, GenError> {
    if cfg.clients == 0 {
        return Err(GenError::ConfigInvalid("at least one client is required".into()));
    }
    let mut em = Emitter::new(cfg, vec![HOST.to_owned()])?;
    let h = HOST;
    let total = cfg.requests * COMMANDS.len();
    // (generation, commands on the current generation, open)
    let mut clients = vec![(0u32, 0u32, false); cfg.clients];
    let mut flows = Vec::with_capacity(total);
    let mut t = 1_000_000;
    for n in 0..total {
        let command = COMMANDS[n % COMMANDS.len()];
        let c = n % cfg.clients;
        let fd = FIRST_FD + c as i64;
        if n == total / 2 && clients[c].2 {
            em.push(t, ev(h, TID, "free_client").with("fd", fd));
            clients[c] = (clients[c].0 + 1, 0, false);
            t += 50_000;
        }
        let bytes = match command {
            "set" | "publish" => cfg.payload,
            _ => 32,
        };
        let r0 = em.push(
            t,
            ev(h, TID, "start_read_client_query")
                .with("fd", fd)
                .with("bytes", bytes)
                .with("conn_type", "client")
                .with("mem", 16384 + bytes),
        );
        t += em.uniform(2_000, 5_000);
        let c0 = em.push(
            t,
            ev(h, TID, "call_command_start").with("fd", fd).with("command", command),
        );
        let service = em.service(cfg.service);
        if command == "publish" {
            em.push(t + service / 2, ev(h, TID, "add_file_event").with("fd", fd));
        }
        t += service;
        let c1 = em.push(t, ev(h, TID, "call_command_end").with("fd", fd));
        t += 1_000;
        em.push(t, ev(h, TID, "end_read_client_query").with("fd", fd));
        t += 2_000;
        let w0 = em.push(t, ev(h, TID, "write_to_client_start").with("fd", fd).with("bytes", 16));
        if command == "publish" {
            t += 1_000;
            em.push(t, ev(h, TID, "delete_file_event").with("fd", fd));
        }
        t += 2_000;
        let w1 = em.push(t, ev(h, TID, "write_to_client_end").with("fd", fd));
        t += em.uniform(5_000, 20_000);

        let (gen, k, open) = &mut clients[c];
        *k += 1;
        *open = true;
        let seg = |label: &str, t0: i64, t1: i64| FlowSegment {
            host: h.to_owned(),
            tid: TID,
            label: label.to_owned(),
            t0,
            t1,
            fd: Some(fd),
            msg_id: None,
            peer: None,
        };
        flows.push(RequestFlow {
            id: format!("{h}:{fd}#{gen}:{k}"),
            host: h.to_owned(),
            command: command.to_owned(),
            complete: true,
            tuple: None,
            segments: vec![seg(READ, r0, c0), seg(command, c0, c1), seg(WRITE, w0, w1)],
            dangling: Vec::new(),
        });
    }
    for (c, (_, _, open)) in clients.iter().enumerate() {
        if *open {
            em.push(t, ev(h, TID, "free_client").with("fd", FIRST_FD + c as i64));
            t += 1_000;
        }
    }
    Ok(em.finish(GroundTruth {
        flows,
        ..Default::default()
    }))
}
