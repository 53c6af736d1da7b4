//! Event vocabulary and the CTF-lite trace format.
//!
//! A CTF-lite file is UTF-8 JSON lines. Every line is one object with exactly
//! the keys `ts`, `host`, `tid`, `seq`, `name` and `attrs`; attribute values are
//! flat integers, floats or strings.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A flat attribute value carried by an event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl AttrValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(s) => Some(s),
            _ => None,
        }
    }

    fn kind(&self) -> AttrKind {
        match self {
            AttrValue::Int(_) => AttrKind::Int,
            AttrValue::Float(_) => AttrKind::Float,
            AttrValue::Str(_) => AttrKind::Str,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(v) => write!(f, "{v}"),
            AttrValue::Float(v) => write!(f, "{v}"),
            AttrValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrKind {
    Int,
    Float,
    Str,
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttrKind::Int => "integer",
            AttrKind::Float => "float",
            AttrKind::Str => "string",
        })
    }
}

/// One timestamped tracepoint occurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub ts: i64,
    pub host: String,
    pub tid: i64,
    pub seq: u64,
    pub name: String,
    pub attrs: BTreeMap<String, AttrValue>,
}

impl TraceEvent {
    pub fn new(ts: i64, host: impl Into<String>, tid: i64, seq: u64, name: impl Into<String>) -> Self {
        TraceEvent {
            ts,
            host: host.into(),
            tid,
            seq,
            name: name.into(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.insert(key.to_owned(), value.into());
        self
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).and_then(AttrValue::as_int)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(AttrValue::as_str)
    }

    pub fn kind(&self) -> Option<EventKind> {
        EventKind::from_name(&self.name)
    }
}

/// Connection 4-tuple carried by HTTP events and, optionally, by
/// `start_read_client_query`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnTuple {
    pub src_addr: String,
    pub src_port: i64,
    pub dst_addr: String,
    pub dst_port: i64,
}

impl fmt::Display for ConnTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port
        )
    }
}

impl TraceEvent {
    pub fn tuple(&self) -> Option<ConnTuple> {
        Some(ConnTuple {
            src_addr: self.str("src_addr")?.to_owned(),
            src_port: self.int("src_port")?,
            dst_addr: self.str("dst_addr")?.to_owned(),
            dst_port: self.int("dst_port")?,
        })
    }
}

/// The recognized tracepoint names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    StartReadClientQuery,
    EndReadClientQuery,
    WriteToClientStart,
    WriteToClientEnd,
    SslRead,
    FreeClient,
    ClusterRead,
    ClusterProcessPacket,
    ClusterSend,
    CallCommandStart,
    CallCommandEnd,
    AddFileEvent,
    DeleteFileEvent,
    RunPendingReads,
    HttpClientRequest,
    HttpServerReceive,
    HttpServerResponse,
    HttpClientResponse,
}

use AttrKind::{Int, Str};

const FD: &[(&str, AttrKind)] = &[("fd", Int)];
const HTTP: &[(&str, AttrKind)] = &[
    ("src_addr", Str),
    ("dst_addr", Str),
    ("src_port", Int),
    ("dst_port", Int),
    ("service", Str),
    ("fd", Int),
];

impl EventKind {
    pub const ALL: [EventKind; 18] = [
        EventKind::StartReadClientQuery,
        EventKind::EndReadClientQuery,
        EventKind::WriteToClientStart,
        EventKind::WriteToClientEnd,
        EventKind::SslRead,
        EventKind::FreeClient,
        EventKind::ClusterRead,
        EventKind::ClusterProcessPacket,
        EventKind::ClusterSend,
        EventKind::CallCommandStart,
        EventKind::CallCommandEnd,
        EventKind::AddFileEvent,
        EventKind::DeleteFileEvent,
        EventKind::RunPendingReads,
        EventKind::HttpClientRequest,
        EventKind::HttpServerReceive,
        EventKind::HttpServerResponse,
        EventKind::HttpClientResponse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::StartReadClientQuery => "start_read_client_query",
            EventKind::EndReadClientQuery => "end_read_client_query",
            EventKind::WriteToClientStart => "write_to_client_start",
            EventKind::WriteToClientEnd => "write_to_client_end",
            EventKind::SslRead => "ssl_read",
            EventKind::FreeClient => "free_client",
            EventKind::ClusterRead => "cluster_read",
            EventKind::ClusterProcessPacket => "cluster_process_packet",
            EventKind::ClusterSend => "cluster_send",
            EventKind::CallCommandStart => "call_command_start",
            EventKind::CallCommandEnd => "call_command_end",
            EventKind::AddFileEvent => "add_file_event",
            EventKind::DeleteFileEvent => "delete_file_event",
            EventKind::RunPendingReads => "run_pending_reads",
            EventKind::HttpClientRequest => "http_client_request",
            EventKind::HttpServerReceive => "http_server_receive",
            EventKind::HttpServerResponse => "http_server_response",
            EventKind::HttpClientResponse => "http_client_response",
        }
    }

    /// Resolves a tracepoint name, accepting `write_to_end_start` as an alias
    /// of `write_to_client_end`.
    pub fn from_name(name: &str) -> Option<EventKind> {
        if name == "write_to_end_start" {
            return Some(EventKind::WriteToClientEnd);
        }
        EventKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Attributes every event of this kind must carry.
    pub fn required_attrs(self) -> &'static [(&'static str, AttrKind)] {
        match self {
            EventKind::StartReadClientQuery
            | EventKind::EndReadClientQuery
            | EventKind::WriteToClientStart
            | EventKind::WriteToClientEnd
            | EventKind::FreeClient
            | EventKind::CallCommandEnd
            | EventKind::AddFileEvent
            | EventKind::DeleteFileEvent
            | EventKind::ClusterRead
            | EventKind::ClusterProcessPacket => FD,
            EventKind::SslRead => &[("fd", Int), ("bytes_requested", Int), ("bytes_read", Int)],
            EventKind::CallCommandStart => &[("fd", Int), ("command", Str)],
            EventKind::ClusterSend => &[("msg_id", Int), ("bytes", Int), ("kind", Str)],
            EventKind::RunPendingReads => &[],
            EventKind::HttpClientRequest
            | EventKind::HttpServerReceive
            | EventKind::HttpServerResponse
            | EventKind::HttpClientResponse => HTTP,
        }
    }

    pub fn is_http(self) -> bool {
        matches!(
            self,
            EventKind::HttpClientRequest
                | EventKind::HttpServerReceive
                | EventKind::HttpServerResponse
                | EventKind::HttpClientResponse
        )
    }
}

/// Checks a recognized event against its attribute schema. Unknown names pass.
pub fn validate(event: &TraceEvent) -> Result<(), SchemaError> {
    let Some(kind) = event.kind() else {
        return Ok(());
    };
    for &(key, want) in kind.required_attrs() {
        match event.attrs.get(key) {
            None => {
                return Err(SchemaError::Missing {
                    event: kind.name(),
                    attr: key,
                })
            }
            Some(v) if v.kind() != want => {
                return Err(SchemaError::WrongType {
                    event: kind.name(),
                    attr: key,
                    want,
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("{event} requires attribute `{attr}`")]
    Missing { event: &'static str, attr: &'static str },
    #[error("{event} attribute `{attr}` must be {want}")]
    WrongType {
        event: &'static str,
        attr: &'static str,
        want: AttrKind,
    },
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed event: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: {source}")]
    SchemaViolation {
        line: usize,
        #[source]
        source: SchemaError,
    },
    #[error("line {line}: sequence number {seq} does not increase (previous {prev})")]
    NonMonotoneSeq { line: usize, seq: u64, prev: u64 },
    #[error("line {line}: event host `{found}` differs from stream host `{expected}`")]
    HostMismatch {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("line {line}: timestamp {ts} precedes the previous event's {prev}")]
    TimeRegression { line: usize, ts: i64, prev: i64 },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

impl TraceError {
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceError::MalformedLine { line, .. }
            | TraceError::SchemaViolation { line, .. }
            | TraceError::NonMonotoneSeq { line, .. }
            | TraceError::HostMismatch { line, .. }
            | TraceError::TimeRegression { line, .. } => Some(*line),
            TraceError::IoFailure(_) => None,
        }
    }
}

/// Parses one CTF-lite line without schema checks.
pub fn parse_line(text: &str, line: usize) -> Result<TraceEvent, TraceError> {
    let event: TraceEvent = serde_json::from_str(text).map_err(|e| TraceError::MalformedLine {
        line,
        reason: e.to_string(),
    })?;
    if event.ts < 0 {
        return Err(TraceError::MalformedLine {
            line,
            reason: format!("negative timestamp {}", event.ts),
        });
    }
    Ok(event)
}

/// Streaming reader over a CTF-lite byte stream.
///
/// Holds one line at a time. Sequence numbers are checked per host, so the
/// same reader serves per-host stream files and merged experiment files.
pub struct EventReader<R> {
    input: R,
    buf: String,
    line: usize,
    last_seq: HashMap<String, u64>,
    done: bool,
}

impl<R: BufRead> EventReader<R> {
    pub fn new(input: R) -> Self {
        EventReader {
            input,
            buf: String::new(),
            line: 0,
            last_seq: HashMap::new(),
            done: false,
        }
    }

    /// Line number of the most recently returned event (1-based).
    pub fn line(&self) -> usize {
        self.line
    }

    fn next_event(&mut self) -> Result<Option<TraceEvent>, TraceError> {
        loop {
            self.buf.clear();
            if self.input.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            let text = self.buf.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            let event = parse_line(text, self.line)?;
            validate(&event).map_err(|source| TraceError::SchemaViolation {
                line: self.line,
                source,
            })?;
            if let Some(&prev) = self.last_seq.get(&event.host) {
                if event.seq <= prev {
                    return Err(TraceError::NonMonotoneSeq {
                        line: self.line,
                        seq: event.seq,
                        prev,
                    });
                }
            }
            match self.last_seq.get_mut(&event.host) {
                Some(s) => *s = event.seq,
                None => {
                    self.last_seq.insert(event.host.clone(), event.seq);
                }
            }
            return Ok(Some(event));
        }
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<TraceEvent, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_event() {
            Ok(Some(e)) => Some(Ok(e)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// All events recorded on one host.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceStream {
    pub host: String,
    pub path: Option<std::path::PathBuf>,
    pub events: Vec<TraceEvent>,
}

impl TraceStream {
    pub fn new(host: impl Into<String>, events: Vec<TraceEvent>) -> Self {
        let mut stream = TraceStream {
            host: host.into(),
            path: None,
            events,
        };
        stream.sort();
        stream
    }

    fn sort(&mut self) {
        if !self
            .events
            .windows(2)
            .all(|w| (w[0].ts, w[0].seq) <= (w[1].ts, w[1].seq))
        {
            self.events.sort_by_key(|e| (e.ts, e.seq));
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Reads a whole per-host stream, validating schema, sequence order and host.
pub fn parse_stream<R: BufRead>(input: R) -> Result<TraceStream, TraceError> {
    let mut reader = EventReader::new(input);
    let mut events = Vec::new();
    let mut host: Option<String> = None;
    while let Some(event) = reader.next() {
        let event = event?;
        match &host {
            None => host = Some(event.host.clone()),
            Some(h) if *h != event.host => {
                return Err(TraceError::HostMismatch {
                    line: reader.line(),
                    expected: h.clone(),
                    found: event.host,
                })
            }
            Some(_) => {}
        }
        events.push(event);
    }
    Ok(TraceStream::new(host.unwrap_or_default(), events))
}

pub fn read_stream_file(path: &std::path::Path) -> Result<TraceStream, TraceError> {
    let file = std::fs::File::open(path)?;
    let mut stream = parse_stream(io::BufReader::new(file))?;
    stream.path = Some(path.to_owned());
    Ok(stream)
}

/// Serializes one event as a CTF-lite line (including the trailing newline).
pub fn write_event<W: Write>(out: &mut W, event: &TraceEvent) -> Result<(), TraceError> {
    serde_json::to_writer(&mut *out, event).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_stream<W: Write>(out: &mut W, stream: &TraceStream) -> Result<(), TraceError> {
    for event in &stream.events {
        write_event(out, event)?;
    }
    Ok(())
}

pub fn write_stream_file(path: &std::path::Path, stream: &TraceStream) -> Result<(), TraceError> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    write_stream(&mut out, stream)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<TraceStream, TraceError> {
        parse_stream(text.as_bytes())
    }

    #[test]
    fn parses_single_event() {
        let s = parse(r#"{"ts":100,"host":"n1","tid":7,"seq":1,"name":"start_read_client_query","attrs":{"fd":72}}"#)
            .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.host, "n1");
        assert_eq!(s.events[0].int("fd"), Some(72));
        assert_eq!(s.events[0].kind(), Some(EventKind::StartReadClientQuery));
    }

    #[test]
    fn empty_input_is_empty_stream() {
        let s = parse("").unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn decreasing_seq_is_rejected() {
        let text = concat!(
            r#"{"ts":1,"host":"n1","tid":7,"seq":2,"name":"x","attrs":{}}"#,
            "\n",
            r#"{"ts":2,"host":"n1","tid":7,"seq":1,"name":"x","attrs":{}}"#,
            "\n"
        );
        match parse(text) {
            Err(TraceError::NonMonotoneSeq { line, seq, prev }) => {
                assert_eq!((line, seq, prev), (2, 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_required_attr() {
        let text = r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"call_command_start","attrs":{"fd":3}}"#;
        match parse(text) {
            Err(TraceError::SchemaViolation { line: 1, source }) => {
                assert_eq!(
                    source,
                    SchemaError::Missing {
                        event: "call_command_start",
                        attr: "command"
                    }
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_attr_type() {
        let text = r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"free_client","attrs":{"fd":"72"}}"#;
        assert!(matches!(parse(text), Err(TraceError::SchemaViolation { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"x","attrs":{}}"#,
            "\n",
            "{not json\n"
        );
        let err = parse(text).unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert!(matches!(err, TraceError::MalformedLine { .. }));
    }

    #[test]
    fn extra_keys_and_nested_attrs_are_malformed() {
        let extra = r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"x","attrs":{},"more":1}"#;
        assert!(matches!(parse(extra), Err(TraceError::MalformedLine { .. })));
        let nested = r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"x","attrs":{"a":{"b":1}}}"#;
        assert!(matches!(parse(nested), Err(TraceError::MalformedLine { .. })));
        let negative = r#"{"ts":-1,"host":"n1","tid":7,"seq":1,"name":"x","attrs":{}}"#;
        assert!(matches!(parse(negative), Err(TraceError::MalformedLine { .. })));
    }

    #[test]
    fn unknown_event_passes_through_verbatim() {
        let line = r#"{"ts":5,"host":"n1","tid":1,"seq":1,"name":"jvm_gc_start","attrs":{"gen":"old","pause":1.5}}"#;
        let s = parse(line).unwrap();
        assert_eq!(s.events[0].kind(), None);
        let mut out = Vec::new();
        write_stream(&mut out, &s).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{line}\n"));
    }

    #[test]
    fn old_table_name_is_an_alias() {
        assert_eq!(
            EventKind::from_name("write_to_end_start"),
            Some(EventKind::WriteToClientEnd)
        );
        let s = parse(r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"write_to_end_start","attrs":{"fd":1}}"#).unwrap();
        assert_eq!(s.events[0].name, "write_to_end_start");
        assert_eq!(s.events[0].kind(), Some(EventKind::WriteToClientEnd));
    }

    #[test]
    fn mixed_hosts_rejected_for_a_stream() {
        let text = concat!(
            r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"x","attrs":{}}"#,
            "\n",
            r#"{"ts":2,"host":"n2","tid":7,"seq":2,"name":"x","attrs":{}}"#,
        );
        assert!(matches!(parse(text), Err(TraceError::HostMismatch { line: 2, .. })));
    }

    #[test]
    fn one_event_round_trip() {
        let s = TraceStream::new(
            "n1",
            vec![TraceEvent::new(10, "n1", 3, 1, "ssl_read")
                .with("fd", 132)
                .with("bytes_requested", 16384)
                .with("bytes_read", 8192)],
        );
        let mut out = Vec::new();
        write_stream(&mut out, &s).unwrap();
        assert_eq!(out.iter().filter(|&&b| b == b'\n').count(), 1);
        assert_eq!(parse_stream(out.as_slice()).unwrap(), s);
    }

    #[test]
    fn reader_is_lazy() {
        // The second line is garbage; the first event must still come out.
        let text = concat!(
            r#"{"ts":1,"host":"n1","tid":7,"seq":1,"name":"x","attrs":{}}"#,
            "\n",
            "garbage\n"
        );
        let mut reader = EventReader::new(text.as_bytes());
        assert!(reader.next().unwrap().is_ok());
        assert!(reader.next().unwrap().is_err());
        assert!(reader.next().is_none());
    }
}
