//! Attribute tree and the modification API that feeds the history tree.
//!
//! The tree has five fixed branches:
//!
//! ```text
//! Connections/<conn>/{Memory, Type, DataStructure, Objects}
//! Requests/<req_id>/{DataStructure, Type, Connection}
//! Bus/{Volume, Type}
//! Threads/<thread>/{Request, Operation}
//! EventLoop/[<host>/]{Phase, QueueLength}
//! ```
//!
//! `<conn>` is `[host:]fd#gen` and `<thread>` is `[host:]tid`. Per-host
//! entities carry the host prefix when written by the analysis so that fd and
//! tid numbers from different machines never share an attribute.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};

use thiserror::Error;

use crate::sht::{Header, Quark, ShtConfig, ShtError, ShtWriter, StateInterval, StateValue, MAX_STR_LEN};

pub const ROOTS: [&str; 5] = ["Connections", "Requests", "Bus", "Threads", "EventLoop"];

#[derive(Debug, Error)]
pub enum StateError {
    #[error("unknown attribute path `{0}`")]
    UnknownPath(String),
    #[error("path `{0}` is outside the model schema")]
    SchemaViolation(String),
    #[error("empty attribute path")]
    EmptyPath,
    #[error("unknown quark {0}")]
    UnknownQuark(Quark),
    #[error("modification at {t} precedes the last one at {last}")]
    TimeRegression { t: i64, last: i64 },
    #[error("string value of {0} bytes exceeds the {MAX_STR_LEN}-byte limit")]
    StringTooLong(usize),
    #[error(transparent)]
    Sht(#[from] ShtError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

fn is_uint(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn strip_host(seg: &str) -> &str {
    seg.rsplit_once(':')
        .map_or(seg, |(host, rest)| if host.is_empty() { seg } else { rest })
}

fn is_conn(seg: &str) -> bool {
    matches!(strip_host(seg).split_once('#'), Some((fd, gen)) if is_uint(fd) && is_uint(gen))
}

fn is_thread(seg: &str) -> bool {
    is_uint(strip_host(seg))
}

/// Whether `path` (or a prefix of a valid path) belongs to the model schema.
pub fn schema_allows(path: &str) -> bool {
    let segs: Vec<&str> = path.split('/').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return false;
    }
    let leaf_ok = |seg: Option<&&str>, allowed: &[&str]| seg.is_none_or(|s| allowed.contains(s));
    match segs.as_slice() {
        ["Connections"] | ["Requests"] | ["Bus"] | ["Threads"] | ["EventLoop"] => true,
        ["Connections", conn, rest @ ..] => {
            is_conn(conn) && rest.len() <= 1 && leaf_ok(rest.first(), &["Memory", "Type", "DataStructure", "Objects"])
        }
        ["Requests", _req, rest @ ..] => {
            rest.len() <= 1 && leaf_ok(rest.first(), &["DataStructure", "Type", "Connection"])
        }
        ["Bus", leaf] => ["Volume", "Type"].contains(leaf),
        ["Threads", thread, rest @ ..] => {
            is_thread(thread) && rest.len() <= 1 && leaf_ok(rest.first(), &["Request", "Operation"])
        }
        ["EventLoop", leaf] if ["Phase", "QueueLength"].contains(leaf) => true,
        ["EventLoop", _host] => true,
        ["EventLoop", _host, leaf] => ["Phase", "QueueLength"].contains(leaf),
        _ => false,
    }
}

enum PathLog {
    Memory(Vec<u8>),
    Spill(BufWriter<File>),
}

impl PathLog {
    fn append(&mut self, path: &str) -> io::Result<()> {
        let len = (path.len() as u32).to_le_bytes();
        match self {
            PathLog::Memory(v) => {
                v.extend_from_slice(&len);
                v.extend_from_slice(path.as_bytes());
                Ok(())
            }
            PathLog::Spill(w) => {
                w.write_all(&len)?;
                w.write_all(path.as_bytes())
            }
        }
    }
}

/// Path ⇄ quark namespace.
///
/// Quarks are dense and never recycled. Subtrees that will not be written
/// again can be retired: they drop out of the in-memory index (their paths
/// stay in the path table), which keeps memory flat over long traces.
pub struct AttributeTree {
    count: u32,
    live: HashMap<String, Quark>,
    paths: HashMap<Quark, String>,
    children: HashMap<Quark, Vec<Quark>>,
    log: PathLog,
    enforce_schema: bool,
}

impl AttributeTree {
    pub fn new(enforce_schema: bool) -> Self {
        AttributeTree {
            count: 0,
            live: HashMap::new(),
            paths: HashMap::new(),
            children: HashMap::new(),
            log: PathLog::Memory(Vec::new()),
            enforce_schema,
        }
    }

    /// Like `new`, but the path table is spilled to an anonymous temp file.
    pub fn with_spill(enforce_schema: bool) -> io::Result<Self> {
        let mut tree = AttributeTree::new(enforce_schema);
        tree.log = PathLog::Spill(BufWriter::new(tempfile::tempfile()?));
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn get_quark(&mut self, path: &str, create_if_missing: bool) -> Result<Quark, StateError> {
        if path.is_empty() {
            return Err(StateError::EmptyPath);
        }
        if let Some(&q) = self.live.get(path) {
            return Ok(q);
        }
        if !create_if_missing {
            return Err(StateError::UnknownPath(path.to_owned()));
        }
        if self.enforce_schema && !schema_allows(path) {
            return Err(StateError::SchemaViolation(path.to_owned()));
        }
        if path.split('/').any(str::is_empty) {
            return Err(StateError::UnknownPath(path.to_owned()));
        }
        let parent = match path.rsplit_once('/') {
            Some((prefix, _)) => Some(self.get_quark(prefix, true)?),
            None => None,
        };
        let q = self.count;
        self.count += 1;
        self.log.append(path)?;
        self.live.insert(path.to_owned(), q);
        self.paths.insert(q, path.to_owned());
        if let Some(p) = parent {
            self.children.entry(p).or_default().push(q);
        }
        Ok(q)
    }

    /// Live path of a quark.
    pub fn path(&self, quark: Quark) -> Option<&str> {
        self.paths.get(&quark).map(String::as_str)
    }

    fn subtree(&self, quark: Quark) -> Vec<Quark> {
        let mut out = Vec::new();
        let mut stack = vec![quark];
        while let Some(q) = stack.pop() {
            out.push(q);
            if let Some(c) = self.children.get(&q) {
                stack.extend(c.iter().copied());
            }
        }
        out
    }

    fn retire(&mut self, quark: Quark) {
        let parent = self
            .paths
            .get(&quark)
            .and_then(|p| p.rsplit_once('/'))
            .and_then(|(prefix, _)| self.live.get(prefix).copied());
        for q in self.subtree(quark) {
            if let Some(p) = self.paths.remove(&q) {
                self.live.remove(&p);
            }
            self.children.remove(&q);
        }
        if let Some(p) = parent {
            if let Some(c) = self.children.get_mut(&p) {
                c.retain(|&x| x != quark);
            }
        }
    }

    fn take_table(&mut self) -> io::Result<Box<dyn Read>> {
        match std::mem::replace(&mut self.log, PathLog::Memory(Vec::new())) {
            PathLog::Memory(v) => Ok(Box::new(io::Cursor::new(v))),
            PathLog::Spill(w) => {
                let mut f = w.into_inner().map_err(|e| e.into_error())?;
                f.seek(SeekFrom::Start(0))?;
                Ok(Box::new(io::BufReader::new(f)))
            }
        }
    }
}

/// Receives every interval the state system emits; used by tests to check
/// end ordering at the tree boundary.
pub type EmitHook = Box<dyn FnMut(&StateInterval)>;

/// Mutable model under construction.
pub struct StateSystem<W: Write + Seek> {
    tree: AttributeTree,
    config: ShtConfig,
    sink: Option<W>,
    writer: Option<ShtWriter<W>>,
    open: HashMap<Quark, (i64, StateValue)>,
    frontier: Option<i64>,
    header: Option<Header>,
    hook: Option<EmitHook>,
}

impl<W: Write + Seek> StateSystem<W> {
    pub fn new(sink: W, config: ShtConfig, tree: AttributeTree) -> Result<Self, StateError> {
        config.validate()?;
        Ok(StateSystem {
            tree,
            config,
            sink: Some(sink),
            writer: None,
            open: HashMap::new(),
            frontier: None,
            header: None,
            hook: None,
        })
    }

    pub fn set_emit_hook(&mut self, hook: EmitHook) {
        self.hook = Some(hook);
    }

    pub fn tree(&self) -> &AttributeTree {
        &self.tree
    }

    pub fn get_quark(&mut self, path: &str, create_if_missing: bool) -> Result<Quark, StateError> {
        self.tree.get_quark(path, create_if_missing)
    }

    pub fn is_closed(&self) -> bool {
        self.header.is_some()
    }

    /// Latest modification time seen.
    pub fn frontier(&self) -> Option<i64> {
        self.frontier
    }

    /// Value currently held by a quark (the build frontier).
    pub fn current(&self, quark: Quark) -> Option<&StateValue> {
        self.open.get(&quark).map(|(_, v)| v)
    }

    fn advance(&mut self, t: i64) -> Result<(), StateError> {
        if let Some(last) = self.frontier {
            if t < last {
                return Err(StateError::TimeRegression { t, last });
            }
        }
        if self.header.is_some() {
            return Err(ShtError::Closed.into());
        }
        if self.writer.is_none() {
            let sink = self.sink.take().expect("sink present until the writer exists");
            self.writer = Some(ShtWriter::new(sink, self.config, t)?);
        }
        self.frontier = Some(t);
        Ok(())
    }

    fn emit(&mut self, iv: StateInterval) -> Result<(), StateError> {
        if let Some(hook) = self.hook.as_mut() {
            hook(&iv);
        }
        self.writer.as_mut().expect("writer initialized").insert(iv)?;
        Ok(())
    }

    pub fn modify(&mut self, t: i64, quark: Quark, value: impl Into<StateValue>) -> Result<(), StateError> {
        let value = value.into();
        if quark >= self.tree.count {
            return Err(StateError::UnknownQuark(quark));
        }
        if let StateValue::Str(s) = &value {
            if s.len() > MAX_STR_LEN {
                return Err(StateError::StringTooLong(s.len()));
            }
        }
        self.advance(t)?;
        match self.open.get_mut(&quark) {
            Some((_, current)) if *current == value => Ok(()),
            Some(slot) => {
                let (since, prev) = std::mem::replace(slot, (t, value));
                self.emit(StateInterval {
                    quark,
                    start: since,
                    end: t,
                    value: prev,
                })
            }
            None => {
                self.open.insert(quark, (t, value));
                Ok(())
            }
        }
    }

    pub fn modify_path(&mut self, t: i64, path: &str, value: impl Into<StateValue>) -> Result<Quark, StateError> {
        let q = self.get_quark(path, true)?;
        self.modify(t, q, value)?;
        Ok(q)
    }

    /// Ends every open state under `quark` at `t` and drops the subtree from
    /// the live index. The paths must not be written again.
    pub fn retire(&mut self, t: i64, quark: Quark) -> Result<(), StateError> {
        self.advance(t)?;
        let mut closing: Vec<Quark> = self
            .tree
            .subtree(quark)
            .into_iter()
            .filter(|q| self.open.contains_key(q))
            .collect();
        closing.sort_unstable();
        for q in closing {
            let (since, value) = self.open.remove(&q).unwrap();
            self.emit(StateInterval {
                quark: q,
                start: since,
                end: t,
                value,
            })?;
        }
        self.tree.retire(quark);
        Ok(())
    }

    /// Closes every open state at `t_end` and finalizes the file. Calling it
    /// again is a no-op.
    pub fn close_all(&mut self, t_end: i64) -> Result<Header, StateError> {
        if let Some(h) = &self.header {
            return Ok(h.clone());
        }
        self.advance(t_end)?;
        let mut open: Vec<(Quark, (i64, StateValue))> = self.open.drain().collect();
        open.sort_unstable_by_key(|(q, _)| *q);
        for (quark, (since, value)) in open {
            self.emit(StateInterval {
                quark,
                start: since,
                end: t_end,
                value,
            })?;
        }
        let count = self.tree.count as u64;
        let mut table = self.tree.take_table()?;
        let header = self
            .writer
            .as_mut()
            .expect("writer initialized")
            .finish(t_end, Some((count, &mut *table)))?;
        self.header = Some(header.clone());
        Ok(header)
    }

    /// Returns the sink once the model is closed.
    pub fn into_sink(self) -> Option<W> {
        match self.writer {
            Some(w) if w.is_closed() => Some(w.into_inner()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;
    use std::io::Cursor;
    use std::rc::Rc;

    use super::*;
    use crate::sht::ShtReader;

    fn system() -> StateSystem<Cursor<Vec<u8>>> {
        StateSystem::new(Cursor::new(Vec::new()), ShtConfig::default(), AttributeTree::new(true)).unwrap()
    }

    fn reader(mut ss: StateSystem<Cursor<Vec<u8>>>, t_end: i64) -> ShtReader {
        ss.close_all(t_end).unwrap();
        ShtReader::from_bytes(ss.into_sink().unwrap().into_inner()).unwrap()
    }

    #[test]
    fn schema_rules() {
        for ok in [
            "Connections",
            "Connections/72#0",
            "Connections/72#0/Type",
            "Connections/n1:72#3/Memory",
            "Requests/n1:72#0:1/Connection",
            "Bus/Volume",
            "Threads/4242/Operation",
            "Threads/n2:17/Request",
            "EventLoop/Phase",
            "EventLoop/n1/QueueLength",
        ] {
            assert!(schema_allows(ok), "{ok}");
        }
        for bad in [
            "Connections/72#0/Bogus",
            "Connections/72/Type",
            "Connections/72#x/Type",
            "Bus/Speed",
            "Threads/abc/Operation",
            "Threads/1/Operation/Deeper",
            "Nodes/1",
            "Requests//Type",
            "EventLoop/n1/Speed",
        ] {
            assert!(!schema_allows(bad), "{bad}");
        }
    }

    #[test]
    fn quarks_are_stable_and_dense() {
        let mut tree = AttributeTree::new(true);
        let q = tree.get_quark("Connections/72#0/Type", true).unwrap();
        assert_eq!(q, 2, "Connections and Connections/72#0 come first");
        assert_eq!(tree.get_quark("Connections/72#0/Type", true).unwrap(), q);
        assert_eq!(tree.get_quark("Connections/72#0", false).unwrap(), 1);
        assert!(matches!(
            tree.get_quark("Connections/72#0/Bogus", true),
            Err(StateError::SchemaViolation(_))
        ));
        assert!(matches!(
            tree.get_quark("Bus/Volume", false),
            Err(StateError::UnknownPath(_))
        ));
        assert!(matches!(tree.get_quark("", true), Err(StateError::EmptyPath)));
        let mut loose = AttributeTree::new(false);
        assert!(loose.get_quark("Anything/goes", true).is_ok());
    }

    #[test]
    fn modify_emits_previous_state() {
        let mut ss = system();
        let q = ss.get_quark("Threads/7/Operation", true).unwrap();
        ss.modify(5, q, "Read").unwrap();
        ss.modify(9, q, "publish").unwrap();
        let r = reader(ss, 12);
        let q = r.quark("Threads/7/Operation").unwrap();
        assert_eq!(
            r.query_range(q, 0, 12).unwrap(),
            vec![
                StateInterval::new(q, 5, 9, "Read"),
                StateInterval::new(q, 9, 12, "publish")
            ]
        );
    }

    #[test]
    fn identical_value_is_a_no_op() {
        let mut ss = system();
        let q = ss.get_quark("Bus/Type", true).unwrap();
        ss.modify(5, q, "broadcast").unwrap();
        ss.modify(7, q, "broadcast").unwrap();
        let r = reader(ss, 10);
        assert_eq!(
            r.query_range(q, 0, 10).unwrap(),
            vec![StateInterval::new(q, 5, 10, "broadcast")]
        );
    }

    #[test]
    fn time_regression() {
        let mut ss = system();
        let q = ss.get_quark("Bus/Type", true).unwrap();
        ss.modify(9, q, "a").unwrap();
        assert!(matches!(
            ss.modify(5, q, "b"),
            Err(StateError::TimeRegression { t: 5, last: 9 })
        ));
    }

    #[test]
    fn same_timestamp_keeps_last_value_and_marks_earlier() {
        let mut ss = system();
        let q = ss.get_quark("Threads/1/Operation", true).unwrap();
        ss.modify(5, q, "X").unwrap();
        ss.modify(5, q, "Y").unwrap();
        let r = reader(ss, 10);
        assert_eq!(r.query_single(q, 5).unwrap(), StateValue::from("Y"));
        assert_eq!(
            r.query_range(q, 0, 10).unwrap(),
            vec![StateInterval::new(q, 5, 5, "X"), StateInterval::new(q, 5, 10, "Y")]
        );
    }

    #[test]
    fn close_all_is_idempotent_and_flushes() {
        let mut ss = system();
        let q = ss.get_quark("Bus/Type", true).unwrap();
        ss.modify(5, q, "X").unwrap();
        let h1 = ss.close_all(9).unwrap();
        let h2 = ss.close_all(9).unwrap();
        assert_eq!(h1, h2);
        assert!(ss.modify(10, q, "Z").is_err());
        let r = ShtReader::from_bytes(ss.into_sink().unwrap().into_inner()).unwrap();
        assert_eq!(r.query_range(q, 0, 9).unwrap(), vec![StateInterval::new(q, 5, 9, "X")]);
        assert_eq!(r.path(q), Some("Bus/Type"));
    }

    #[test]
    fn close_without_states_writes_header_only() {
        let mut ss = system();
        let h = ss.close_all(100).unwrap();
        assert_eq!(h.interval_count, 0);
        assert_eq!(h.quark_count, 0);
        let r = ShtReader::from_bytes(ss.into_sink().unwrap().into_inner()).unwrap();
        assert_eq!((r.start(), r.end()), (100, 100));
    }

    #[test]
    fn interleaved_quarks_emit_in_end_order_and_tile() {
        let emitted = Rc::new(RefCell::new(Vec::new()));
        let mut ss = system();
        let sink = emitted.clone();
        ss.set_emit_hook(Box::new(move |iv| sink.borrow_mut().push(iv.clone())));
        let qs: Vec<Quark> = (0..5)
            .map(|i| ss.get_quark(&format!("Threads/{i}/Operation"), true).unwrap())
            .collect();
        let mut t = 0;
        for step in 0..500u32 {
            let q = qs[(step * 7 % 5) as usize];
            t += (step % 3) as i64;
            ss.modify(t, q, format!("op{}", step % 4)).unwrap();
        }
        ss.close_all(t + 10).unwrap();
        let emitted = emitted.borrow();
        assert!(emitted.windows(2).all(|w| w[0].end <= w[1].end));
        for &q in &qs {
            let mine: Vec<_> = emitted.iter().filter(|iv| iv.quark == q).collect();
            assert!(mine.windows(2).all(|w| w[0].end == w[1].start), "gap or overlap on {q}");
            assert_eq!(mine.last().unwrap().end, t + 10);
        }
    }

    #[test]
    fn retired_subtree_is_closed_and_forgotten() {
        let mut ss = system();
        let conn = ss.get_quark("Requests/n1:5#0:1/Connection", true).unwrap();
        let req = ss.get_quark("Requests/n1:5#0:1", false).unwrap();
        ss.modify(1, conn, "5#0").unwrap();
        ss.retire(4, req).unwrap();
        assert!(ss.get_quark("Requests/n1:5#0:1/Connection", false).is_err());
        let other = ss.get_quark("Requests/n1:5#0:2/Connection", true).unwrap();
        assert!(other > conn);
        ss.modify(6, other, "5#0").unwrap();
        let r = reader(ss, 10);
        assert_eq!(r.quark("Requests/n1:5#0:1/Connection").unwrap(), conn);
        assert_eq!(
            r.query_range(conn, 0, 10).unwrap(),
            vec![StateInterval::new(conn, 1, 4, "5#0")]
        );
        assert_eq!(r.query_single(conn, 5).unwrap(), StateValue::Null);
    }

    #[test]
    fn spilled_path_table_round_trips() {
        let mut ss = StateSystem::new(
            Cursor::new(Vec::new()),
            ShtConfig::default(),
            AttributeTree::with_spill(true).unwrap(),
        )
        .unwrap();
        ss.modify_path(1, "EventLoop/n1/Phase", "Polling").unwrap();
        let r = reader(ss, 3);
        assert_eq!(r.paths(), &["EventLoop", "EventLoop/n1", "EventLoop/n1/Phase"]);
    }
}
