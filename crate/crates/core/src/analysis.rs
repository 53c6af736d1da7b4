//! Event-handling automaton that turns a merged experiment into the model.
//!
//! Per-host entities are qualified with the host name, so the attribute
//! paths written here look like `Threads/n1:4242/Operation` and
//! `Connections/n1:72#0/Type`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Seek, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::event::{ConnTuple, EventKind, TraceEvent};
use crate::sht::{Header, Quark, StateValue};
use crate::state::{StateError, StateSystem};

/// Cluster bus port; connections touching it default to type "cluster".
pub const BUS_PORT: i64 = 16379;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElPhase {
    Polling,
    ReadingClient,
    ExecutingCommand,
    WritingClient,
    RunningTask,
}

impl ElPhase {
    pub fn label(self) -> &'static str {
        match self {
            ElPhase::Polling => "Polling",
            ElPhase::ReadingClient => "ReadingClient",
            ElPhase::ExecutingCommand => "ExecutingCommand",
            ElPhase::WritingClient => "WritingClient",
            ElPhase::RunningTask => "RunningTask",
        }
    }
}

/// Totals written to `report.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub events: u64,
    pub unknown_events: u64,
    pub unmatched: u64,
    pub orphans: u64,
    pub contexts: u64,
    pub requests: u64,
    pub queue_underflows: u64,
    pub duplicate_list_adds: u64,
    pub quarks: u64,
    pub intervals: u64,
    pub t_start: Option<i64>,
    pub t_end: Option<i64>,
    pub commands: BTreeMap<String, u64>,
}

/// One executed command, with the surrounding read and reply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub req_id: String,
    pub host: String,
    pub tid: i64,
    pub fd: i64,
    pub gen: u32,
    pub command: String,
    pub read_start: Option<i64>,
    pub read_tid: Option<i64>,
    pub start: i64,
    pub end: Option<i64>,
    pub reply: Option<(i64, i64, i64)>,
    pub tuple: Option<ConnTuple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SendRecord {
    pub host: String,
    pub tid: i64,
    pub ts: i64,
    pub msg_id: i64,
    pub bytes: i64,
    pub kind: String,
    pub dst: Option<String>,
    pub req_id: Option<String>,
}

/// A cluster read (`cluster_read` .. `cluster_process_packet`) or a pub/sub
/// delivery write, both keyed by message id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub host: String,
    pub tid: i64,
    pub fd: i64,
    pub msg_id: Option<i64>,
    pub t0: i64,
    pub t1: i64,
}

/// What a replaying analysis keeps for the flow and latency passes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Records {
    pub commands: Vec<CommandRecord>,
    pub sends: Vec<SendRecord>,
    pub cluster_reads: Vec<SpanRecord>,
    pub deliveries: Vec<SpanRecord>,
}

struct Conn {
    fd: i64,
    gen: u32,
    quark: Quark,
    tuple: Option<ConnTuple>,
    commands: u32,
    read: Option<(i64, i64)>,
    /// Index into `Analyzer::open_cmds`.
    pending: Option<u64>,
    /// Request waiting for its reply.
    awaiting_reply: Option<(String, Quark, Option<usize>)>,
    writing: Option<(i64, i64, Option<i64>)>,
    in_pending_list: bool,
}

impl Conn {
    fn name(&self, host: &str) -> String {
        format!("{host}:{}#{}", self.fd, self.gen)
    }
}

struct OpenCmd {
    req_id: String,
    quark: Quark,
    tid: i64,
    command: String,
    record: Option<usize>,
}

#[derive(Default)]
struct Thread {
    cluster_read: Option<(i64, i64, Option<i64>)>,
    current_req: Option<String>,
}

/// The automaton. Feed events in merged order with [`Analyzer::handle`], then
/// call [`Analyzer::finalize`].
pub struct Analyzer<W: Write + Seek> {
    model: StateSystem<W>,
    conns: HashMap<(String, i64), Conn>,
    next_gen: HashMap<(String, i64), u32>,
    freed: HashSet<(String, i64)>,
    threads: HashMap<(String, i64), Thread>,
    queue: HashMap<String, i64>,
    live_clients: HashMap<String, i64>,
    open_cmds: HashMap<u64, OpenCmd>,
    next_cmd: u64,
    bus_volume: i64,
    report: AnalysisReport,
    records: Option<Records>,
}

type Res = Result<(), StateError>;

impl<W: Write + Seek> Analyzer<W> {
    pub fn new(model: StateSystem<W>, collect_records: bool) -> Self {
        Analyzer {
            model,
            conns: HashMap::new(),
            next_gen: HashMap::new(),
            freed: HashSet::new(),
            threads: HashMap::new(),
            queue: HashMap::new(),
            live_clients: HashMap::new(),
            open_cmds: HashMap::new(),
            next_cmd: 0,
            bus_volume: 0,
            report: AnalysisReport::default(),
            records: collect_records.then(Records::default),
        }
    }

    pub fn report(&self) -> &AnalysisReport {
        &self.report
    }

    pub fn model(&self) -> &StateSystem<W> {
        &self.model
    }

    fn set(&mut self, t: i64, path: &str, value: impl Into<StateValue>) -> Res {
        self.model.modify_path(t, path, value).map(|_| ())
    }

    fn op(&mut self, t: i64, host: &str, tid: i64, value: impl Into<StateValue>) -> Res {
        self.set(t, &format!("Threads/{host}:{tid}/Operation"), value)
    }

    fn phase(&mut self, t: i64, host: &str, phase: ElPhase) -> Res {
        self.set(t, &format!("EventLoop/{host}/Phase"), phase.label())
    }

    /// Records an end event that had no open start as a zero-length marker.
    fn unmatched(&mut self, e: &TraceEvent) -> Res {
        self.report.unmatched += 1;
        warn!("unmatched {} on {} at {}", e.name, e.host, e.ts);
        let path = format!("Threads/{}:{}/Operation", e.host, e.tid);
        let q = self.model.get_quark(&path, true)?;
        let keep = self.model.current(q).cloned().unwrap_or(StateValue::Null);
        self.model.modify(e.ts, q, format!("UNMATCHED {}", e.name))?;
        self.model.modify(e.ts, q, keep)
    }

    fn key(e: &TraceEvent) -> Option<(String, i64)> {
        Some((e.host.clone(), e.int("fd")?))
    }

    /// Looks up the live context for the event's fd, creating one when
    /// `create` is set. Returns `None` for events on freed descriptors.
    fn conn(&mut self, e: &TraceEvent, create: bool) -> Result<Option<(String, i64)>, StateError> {
        let Some(key) = Analyzer::<W>::key(e) else {
            return Ok(None);
        };
        if self.conns.contains_key(&key) {
            return Ok(Some(key));
        }
        if !create {
            if self.freed.contains(&key) {
                self.report.orphans += 1;
            }
            return Ok(None);
        }
        self.freed.remove(&key);
        let gen = *self.next_gen.get(&key).unwrap_or(&0);
        let fd = key.1;
        let name = format!("{}:{fd}#{gen}", e.host);
        let quark = self.model.get_quark(&format!("Connections/{name}"), true)?;
        let ty = match e.str("conn_type") {
            Some(t) => t.to_owned(),
            None if e.int("src_port") == Some(BUS_PORT) || e.int("dst_port") == Some(BUS_PORT) => "cluster".to_owned(),
            None => "client".to_owned(),
        };
        self.set(e.ts, &format!("Connections/{name}/Type"), ty.as_str())?;
        self.set(e.ts, &format!("Connections/{name}/DataStructure"), format!("fd={fd}"))?;
        let live = self.live_clients.entry(e.host.clone()).or_insert(0);
        *live += 1;
        let live = *live;
        self.set(e.ts, &format!("Connections/{name}/Objects"), live)?;
        self.report.contexts += 1;
        self.conns.insert(
            key.clone(),
            Conn {
                fd,
                gen,
                quark,
                tuple: e.tuple(),
                commands: 0,
                read: None,
                pending: None,
                awaiting_reply: None,
                writing: None,
                in_pending_list: false,
            },
        );
        Ok(Some(key))
    }

    pub fn handle(&mut self, e: &TraceEvent) -> Res {
        self.report.events += 1;
        self.report.t_start.get_or_insert(e.ts);
        self.report.t_end = Some(e.ts);
        let Some(kind) = e.kind() else {
            self.report.unknown_events += 1;
            return Ok(());
        };
        match kind {
            EventKind::StartReadClientQuery => self.start_read(e),
            EventKind::EndReadClientQuery => self.end_read(e),
            EventKind::CallCommandStart => self.call_start(e),
            EventKind::CallCommandEnd => self.call_end(e),
            EventKind::AddFileEvent => self.add_file_event(e),
            EventKind::DeleteFileEvent => self.delete_file_event(e),
            EventKind::WriteToClientStart => self.write_start(e),
            EventKind::WriteToClientEnd => self.write_end(e),
            EventKind::SslRead => self.ssl_read(e),
            EventKind::RunPendingReads => {
                for (key, c) in self.conns.iter_mut() {
                    if key.0 == e.host {
                        c.in_pending_list = false;
                    }
                }
                self.phase(e.ts, &e.host, ElPhase::RunningTask)
            }
            EventKind::FreeClient => self.free_client(e),
            EventKind::ClusterSend => self.cluster_send(e),
            EventKind::ClusterRead => self.cluster_read(e),
            EventKind::ClusterProcessPacket => self.cluster_process(e),
            _ => Ok(()),
        }
    }

    fn start_read(&mut self, e: &TraceEvent) -> Res {
        let Some(key) = self.conn(e, true)? else {
            return Ok(());
        };
        let c = self.conns.get_mut(&key).unwrap();
        c.read = Some((e.ts, e.tid));
        if c.tuple.is_none() {
            c.tuple = e.tuple();
        }
        let name = c.name(&e.host);
        if let Some(mem) = e.int("mem") {
            self.set(e.ts, &format!("Connections/{name}/Memory"), mem)?;
        }
        self.op(e.ts, &e.host, e.tid, "Read")?;
        self.phase(e.ts, &e.host, ElPhase::ReadingClient)
    }

    fn end_read(&mut self, e: &TraceEvent) -> Res {
        let key = self.conn(e, false)?;
        let Some(c) = key.as_ref().and_then(|k| self.conns.get_mut(k)) else {
            return self.unmatched(e);
        };
        if c.read.take().is_none() {
            return self.unmatched(e);
        }
        if c.pending.is_none() {
            self.phase(e.ts, &e.host, ElPhase::Polling)?;
        }
        Ok(())
    }

    fn retire_request(&mut self, t: i64, key: &(String, i64)) -> Res {
        if let Some((_, quark, _)) = self.conns.get_mut(key).and_then(|c| c.awaiting_reply.take()) {
            self.model.retire(t, quark)?;
        }
        Ok(())
    }

    fn call_start(&mut self, e: &TraceEvent) -> Res {
        let Some(key) = self.conn(e, true)? else {
            return Ok(());
        };
        let command = e.str("command").unwrap_or_default().to_owned();
        // A request superseded without a reply is retired here.
        self.retire_request(e.ts, &key)?;
        if let Some(prev) = self.conns.get_mut(&key).unwrap().pending.take() {
            self.report.unmatched += 1;
            if let Some(open) = self.open_cmds.remove(&prev) {
                self.model.retire(e.ts, open.quark)?;
            }
        }
        let c = self.conns.get_mut(&key).unwrap();
        c.commands += 1;
        let conn_name = c.name(&e.host);
        let req_id = format!("{conn_name}:{}", c.commands);
        let (read_start, read_tid) = match c.read {
            Some((t, tid)) => (Some(t), Some(tid)),
            None => (None, None),
        };
        let tuple = c.tuple.clone();
        let (fd, gen) = (c.fd, c.gen);
        let id = self.next_cmd;
        self.next_cmd += 1;
        c.pending = Some(id);

        let req_path = format!("Requests/{req_id}");
        let quark = self.model.get_quark(&req_path, true)?;
        self.set(e.ts, &format!("{req_path}/Connection"), conn_name.as_str())?;
        self.set(e.ts, &format!("{req_path}/Type"), command.as_str())?;
        self.op(e.ts, &e.host, e.tid, command.as_str())?;
        self.set(e.ts, &format!("Threads/{}:{}/Request", e.host, e.tid), req_id.as_str())?;
        self.phase(e.ts, &e.host, ElPhase::ExecutingCommand)?;

        self.report.requests += 1;
        *self.report.commands.entry(command.clone()).or_insert(0) += 1;
        let record = self.records.as_mut().map(|r| {
            r.commands.push(CommandRecord {
                req_id: req_id.clone(),
                host: e.host.clone(),
                tid: e.tid,
                fd,
                gen,
                command: command.clone(),
                read_start,
                read_tid,
                start: e.ts,
                end: None,
                reply: None,
                tuple,
            });
            r.commands.len() - 1
        });
        self.threads.entry((e.host.clone(), e.tid)).or_default().current_req = Some(req_id.clone());
        self.open_cmds.insert(
            id,
            OpenCmd {
                req_id,
                quark,
                tid: e.tid,
                command,
                record,
            },
        );
        Ok(())
    }

    fn call_end(&mut self, e: &TraceEvent) -> Res {
        let key = self.conn(e, false)?;
        let pending = key
            .as_ref()
            .and_then(|k| self.conns.get_mut(k))
            .and_then(|c| c.pending.take());
        let Some(open) = pending.and_then(|id| self.open_cmds.remove(&id)) else {
            return self.unmatched(e);
        };
        let key = key.unwrap();
        self.op(e.ts, &e.host, open.tid, StateValue::Null)?;
        if let Some(t) = self.threads.get_mut(&(e.host.clone(), open.tid)) {
            t.current_req = None;
        }
        if let (Some(r), Some(i)) = (self.records.as_mut(), open.record) {
            r.commands[i].end = Some(e.ts);
        }
        let c = self.conns.get_mut(&key).unwrap();
        c.awaiting_reply = Some((open.req_id, open.quark, open.record));
        Ok(())
    }

    fn add_file_event(&mut self, e: &TraceEvent) -> Res {
        let n = {
            let q = self.queue.entry(e.host.clone()).or_insert(0);
            *q += 1;
            *q
        };
        self.set(e.ts, &format!("EventLoop/{}/QueueLength", e.host), n)?;
        let key = self.conn(e, false)?;
        let pending = key
            .and_then(|k| self.conns.get(&k))
            .and_then(|c| c.pending)
            .and_then(|id| self.open_cmds.get(&id));
        if let Some(open) = pending {
            if open.command.eq_ignore_ascii_case("publish") {
                let path = format!("Requests/{}", open.req_id);
                self.set(e.ts, &format!("{path}/DataStructure"), "el_queue")?;
                self.set(e.ts, &format!("{path}/Type"), "write")?;
            }
        }
        Ok(())
    }

    fn delete_file_event(&mut self, e: &TraceEvent) -> Res {
        let q = self.queue.entry(e.host.clone()).or_insert(0);
        if *q == 0 {
            self.report.queue_underflows += 1;
            warn!("delete_file_event on an empty queue on {} at {}", e.host, e.ts);
        } else {
            *q -= 1;
        }
        let n = *q;
        self.set(e.ts, &format!("EventLoop/{}/QueueLength", e.host), n)
    }

    fn write_start(&mut self, e: &TraceEvent) -> Res {
        // Pub/sub deliveries may reach a connection whose setup predates the
        // trace, so the context is created on demand.
        let Some(key) = self.conn(e, true)? else {
            return Ok(());
        };
        let c = self.conns.get_mut(&key).unwrap();
        c.writing = Some((e.ts, e.tid, e.int("msg_id")));
        self.op(e.ts, &e.host, e.tid, "Write to client")?;
        self.phase(e.ts, &e.host, ElPhase::WritingClient)
    }

    fn write_end(&mut self, e: &TraceEvent) -> Res {
        let key = self.conn(e, false)?;
        let Some(key) = key else {
            return self.unmatched(e);
        };
        let c = self.conns.get_mut(&key).unwrap();
        let Some((t0, tid, msg_id)) = c.writing.take() else {
            return self.unmatched(e);
        };
        let fd = c.fd;
        let idle = c.pending.is_none() && c.read.is_none();
        let reply_record = c.awaiting_reply.as_ref().map(|(_, _, rec)| *rec);
        self.op(e.ts, &e.host, tid, StateValue::Null)?;
        if idle {
            self.phase(e.ts, &e.host, ElPhase::Polling)?;
        }
        if msg_id.is_some() {
            if let Some(r) = self.records.as_mut() {
                r.deliveries.push(SpanRecord {
                    host: e.host.clone(),
                    tid,
                    fd,
                    msg_id,
                    t0,
                    t1: e.ts,
                });
            }
            return Ok(());
        }
        if let (Some(Some(i)), Some(r)) = (reply_record, self.records.as_mut()) {
            r.commands[i].reply = Some((t0, e.ts, tid));
        }
        if reply_record.is_some() {
            self.set(e.ts, &format!("Threads/{}:{tid}/Request", e.host), StateValue::Null)?;
        }
        self.retire_request(e.ts, &key)
    }

    fn ssl_read(&mut self, e: &TraceEvent) -> Res {
        let bytes = e.int("bytes_read").unwrap_or_default();
        self.op(e.ts, &e.host, e.tid, format!("Reading SSL bytes={bytes}"))?;
        let key = self.conn(e, false)?;
        if e.int("pending") == Some(1) {
            if let Some(c) = key.and_then(|k| self.conns.get_mut(&k)) {
                if c.in_pending_list {
                    self.report.duplicate_list_adds += 1;
                }
                c.in_pending_list = true;
            }
        }
        Ok(())
    }

    fn free_client(&mut self, e: &TraceEvent) -> Res {
        self.op(e.ts, &e.host, e.tid, "FREEING CLIENT")?;
        let Some(key) = self.conn(e, false)? else {
            return Ok(());
        };
        self.retire_request(e.ts, &key)?;
        let c = self.conns.remove(&key).unwrap();
        if let Some(open) = c.pending.and_then(|id| self.open_cmds.remove(&id)) {
            self.model.retire(e.ts, open.quark)?;
        }
        let name = c.name(&e.host);
        self.set(e.ts, &format!("Connections/{name}/DataStructure"), StateValue::Null)?;
        self.model.retire(e.ts, c.quark)?;
        if let Some(n) = self.live_clients.get_mut(&e.host) {
            *n -= 1;
        }
        self.next_gen.insert(key.clone(), c.gen + 1);
        self.freed.insert(key);
        Ok(())
    }

    fn cluster_send(&mut self, e: &TraceEvent) -> Res {
        let bytes = e.int("bytes").unwrap_or_default();
        let kind = e.str("kind").unwrap_or_default().to_owned();
        self.bus_volume += bytes;
        let volume = self.bus_volume;
        self.set(e.ts, "Bus/Type", kind.as_str())?;
        self.set(e.ts, "Bus/Volume", volume)?;
        if let Some(r) = self.records.as_mut() {
            let req_id = self
                .threads
                .get(&(e.host.clone(), e.tid))
                .and_then(|t| t.current_req.clone());
            r.sends.push(SendRecord {
                host: e.host.clone(),
                tid: e.tid,
                ts: e.ts,
                msg_id: e.int("msg_id").unwrap_or_default(),
                bytes,
                kind,
                dst: e.str("dst").map(str::to_owned),
                req_id,
            });
        }
        Ok(())
    }

    fn cluster_read(&mut self, e: &TraceEvent) -> Res {
        let t = self.threads.entry((e.host.clone(), e.tid)).or_default();
        if t.cluster_read.is_some() {
            self.report.unmatched += 1;
        }
        t.cluster_read = Some((e.ts, e.int("fd").unwrap_or_default(), e.int("msg_id")));
        self.op(e.ts, &e.host, e.tid, "Cluster read")
    }

    fn cluster_process(&mut self, e: &TraceEvent) -> Res {
        let t = self.threads.entry((e.host.clone(), e.tid)).or_default();
        let Some((t0, fd, msg_id)) = t.cluster_read.take() else {
            return self.unmatched(e);
        };
        if let (Some(a), Some(b)) = (msg_id, e.int("msg_id")) {
            if a != b {
                self.report.unmatched += 1;
            }
        }
        self.op(e.ts, &e.host, e.tid, StateValue::Null)?;
        if let Some(r) = self.records.as_mut() {
            r.cluster_reads.push(SpanRecord {
                host: e.host.clone(),
                tid: e.tid,
                fd,
                msg_id: msg_id.or(e.int("msg_id")),
                t0,
                t1: e.ts,
            });
        }
        Ok(())
    }

    /// Closes the model at `t_end` (the last event by default).
    pub fn finalize(
        mut self,
        t_end: Option<i64>,
    ) -> Result<(AnalysisReport, Records, Header, StateSystem<W>), StateError> {
        let t_end = t_end.or(self.report.t_end).or(self.model.frontier()).unwrap_or(0);
        let header = self.model.close_all(t_end)?;
        self.report.quarks = header.quark_count;
        self.report.intervals = header.interval_count;
        Ok((self.report, self.records.unwrap_or_default(), header, self.model))
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::sht::{ShtConfig, ShtReader};
    use crate::state::AttributeTree;

    struct Script {
        seq: u64,
        events: Vec<TraceEvent>,
    }

    impl Script {
        fn new() -> Self {
            Script {
                seq: 0,
                events: Vec::new(),
            }
        }

        fn push(&mut self, ts: i64, tid: i64, name: &str, attrs: &[(&str, crate::event::AttrValue)]) -> &mut Self {
            self.seq += 1;
            let mut e = TraceEvent::new(ts, "n1", tid, self.seq, name);
            for (k, v) in attrs {
                e = e.with(k, v.clone());
            }
            self.events.push(e);
            self
        }
    }

    fn fd(v: i64) -> (&'static str, crate::event::AttrValue) {
        ("fd", v.into())
    }

    fn run(events: &[TraceEvent]) -> (AnalysisReport, Records, ShtReader) {
        let model = StateSystem::new(Cursor::new(Vec::new()), ShtConfig::default(), AttributeTree::new(true)).unwrap();
        let mut a = Analyzer::new(model, true);
        for e in events {
            a.handle(e).unwrap();
        }
        let (report, records, _, model) = a.finalize(None).unwrap();
        let bytes = model.into_sink().unwrap().into_inner();
        (report, records, ShtReader::from_bytes(bytes).unwrap())
    }

    fn publish_script() -> Script {
        let mut s = Script::new();
        s.push(100, 7, "start_read_client_query", &[fd(72), ("bytes", 10.into())])
            .push(110, 7, "call_command_start", &[fd(72), ("command", "publish".into())])
            .push(115, 7, "add_file_event", &[fd(72)])
            .push(120, 7, "call_command_end", &[fd(72)])
            .push(125, 7, "end_read_client_query", &[fd(72)])
            .push(130, 7, "write_to_client_start", &[fd(72)])
            .push(135, 7, "delete_file_event", &[fd(72)])
            .push(140, 7, "write_to_client_end", &[fd(72)]);
        s
    }

    fn labels(r: &ShtReader, path: &str, t0: i64, t1: i64) -> Vec<String> {
        let q = r.quark(path).unwrap();
        r.query_range(q, t0, t1)
            .unwrap()
            .into_iter()
            .filter(|iv| !iv.value.is_null())
            .map(|iv| iv.value.to_string())
            .collect()
    }

    #[test]
    fn publish_life_cycle_states() {
        let (report, records, r) = run(&publish_script().events);
        assert_eq!(
            labels(&r, "Threads/n1:7/Operation", 100, 140),
            ["Read", "publish", "Write to client"]
        );
        assert_eq!(report.requests, 1);
        assert_eq!(report.unmatched, 0);
        assert_eq!(report.contexts, 1);
        let c = &records.commands[0];
        assert_eq!(c.req_id, "n1:72#0:1");
        assert_eq!(
            (c.read_start, c.start, c.end, c.reply),
            (Some(100), 110, Some(120), Some((130, 140, 7)))
        );
        assert_eq!(labels(&r, "Requests/n1:72#0:1/Type", 110, 140), ["publish", "write"]);
        assert_eq!(labels(&r, "Requests/n1:72#0:1/DataStructure", 110, 140), ["el_queue"]);
        assert_eq!(labels(&r, "Connections/n1:72#0/Type", 100, 140), ["client"]);
        let q = r.quark("EventLoop/n1/QueueLength").unwrap();
        assert_eq!(r.query_single(q, 120).unwrap(), StateValue::Int(1));
        assert_eq!(r.query_single(q, 137).unwrap(), StateValue::Int(0));
    }

    #[test]
    fn replay_is_byte_identical() {
        let bytes = || {
            let model =
                StateSystem::new(Cursor::new(Vec::new()), ShtConfig::default(), AttributeTree::new(true)).unwrap();
            let mut a = Analyzer::new(model, false);
            for e in &publish_script().events {
                a.handle(e).unwrap();
            }
            a.finalize(None).unwrap().3.into_sink().unwrap().into_inner()
        };
        assert_eq!(bytes(), bytes());
    }

    #[test]
    fn ssl_read_state_label() {
        let mut s = Script::new();
        s.push(1, 3, "start_read_client_query", &[fd(132)]).push(
            2,
            3,
            "ssl_read",
            &[
                fd(132),
                ("bytes_requested", 16384.into()),
                ("bytes_read", 8192.into()),
                ("pending", 1.into()),
            ],
        );
        let (_, _, r) = run(&s.events);
        assert_eq!(labels(&r, "Threads/n1:3/Operation", 2, 2), ["Reading SSL bytes=8192"]);
    }

    #[test]
    fn unmatched_end_is_counted() {
        let mut s = Script::new();
        s.push(5, 1, "call_command_end", &[fd(9)])
            .push(6, 1, "run_pending_reads", &[]);
        let (report, _, r) = run(&s.events);
        assert_eq!(report.unmatched, 1);
        assert_eq!(
            labels(&r, "Threads/n1:1/Operation", 0, 6),
            ["UNMATCHED call_command_end"]
        );
    }

    #[test]
    fn empty_experiment() {
        let (report, records, _) = run(&[]);
        assert_eq!(
            report,
            AnalysisReport {
                quarks: 0,
                ..Default::default()
            }
        );
        assert_eq!(records, Records::default());
    }

    #[test]
    fn fd_reuse_gets_new_generation() {
        let mut s = Script::new();
        s.push(1, 1, "start_read_client_query", &[fd(5)])
            .push(2, 1, "free_client", &[fd(5)])
            .push(3, 1, "start_read_client_query", &[fd(5)])
            .push(4, 1, "call_command_start", &[fd(5), ("command", "get".into())])
            .push(5, 1, "free_client", &[fd(5)])
            .push(6, 2, "free_client", &[fd(5)]);
        let (report, records, r) = run(&s.events);
        assert_eq!(records.commands[0].req_id, "n1:5#1:1");
        assert_eq!(report.contexts, 2);
        assert_eq!(report.orphans, 1);
        assert!(r.quark("Connections/n1:5#0/Type").is_ok());
        assert!(r.quark("Connections/n1:5#1/Type").is_ok());
        assert_eq!(labels(&r, "Threads/n1:2/Operation", 6, 6), ["FREEING CLIENT"]);
    }

    #[test]
    fn queue_length_never_negative() {
        let mut s = Script::new();
        s.push(1, 1, "delete_file_event", &[fd(3)])
            .push(2, 1, "add_file_event", &[fd(3)])
            .push(3, 1, "run_pending_reads", &[]);
        let (report, _, r) = run(&s.events);
        assert_eq!(report.queue_underflows, 1);
        let q = r.quark("EventLoop/n1/QueueLength").unwrap();
        assert_eq!(r.query_single(q, 1).unwrap(), StateValue::Int(0));
        assert_eq!(r.query_single(q, 2).unwrap(), StateValue::Int(1));
    }

    #[test]
    fn cluster_read_pairs_and_bus_volume() {
        let mut s = Script::new();
        s.push(
            1,
            1,
            "cluster_send",
            &[
                ("msg_id", 9.into()),
                ("bytes", 100.into()),
                ("kind", "broadcast".into()),
            ],
        )
        .push(
            2,
            1,
            "cluster_send",
            &[("msg_id", 9.into()), ("bytes", 50.into()), ("kind", "broadcast".into())],
        )
        .push(3, 4, "cluster_read", &[fd(30), ("msg_id", 9.into())])
        .push(8, 4, "cluster_process_packet", &[fd(30), ("msg_id", 9.into())]);
        let (_, records, r) = run(&s.events);
        let q = r.quark("Bus/Volume").unwrap();
        assert_eq!(r.query_single(q, 2).unwrap(), StateValue::Int(150));
        assert_eq!(labels(&r, "Threads/n1:4/Operation", 3, 8), ["Cluster read"]);
        assert_eq!(records.cluster_reads[0].t1, 8);
        assert_eq!(records.sends.len(), 2);
    }
}
