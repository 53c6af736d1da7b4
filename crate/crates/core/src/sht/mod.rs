//! Disk-backed State History Tree.
//!
//! The tree stores `(quark, [start, end), value)` intervals. Intervals are
//! appended in non-decreasing end order; each goes into the deepest node of the
//! current branch whose time range can hold it. Stab queries walk a single
//! root-to-leaf path. See `docs/sht-format.md` for the byte layout.

mod format;
mod reader;
mod writer;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{Header, HEADER_LEN, MAGIC, VERSION};
pub use reader::{BlockSource, ShtReader};
pub use writer::ShtWriter;

/// Integer id of one attribute path.
pub type Quark = u32;

/// Longest string value accepted, in bytes.
pub const MAX_STR_LEN: usize = 4096;

/// A state value stored in the tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateValue {
    Null,
    Int(i64),
    Float(f64),
    Str(String),
}

impl StateValue {
    pub fn is_null(&self) -> bool {
        matches!(self, StateValue::Null)
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            StateValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            StateValue::Int(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for StateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateValue::Null => f.write_str("null"),
            StateValue::Int(v) => write!(f, "{v}"),
            StateValue::Float(v) => write!(f, "{v}"),
            StateValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for StateValue {
    fn from(s: &str) -> Self {
        StateValue::Str(s.to_owned())
    }
}

impl From<String> for StateValue {
    fn from(s: String) -> Self {
        StateValue::Str(s)
    }
}

impl From<i64> for StateValue {
    fn from(v: i64) -> Self {
        StateValue::Int(v)
    }
}

/// A state held by one attribute over `[start, end)`. `start == end` is an
/// instantaneous marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateInterval {
    pub quark: Quark,
    pub start: i64,
    pub end: i64,
    pub value: StateValue,
}

impl StateInterval {
    pub fn new(quark: Quark, start: i64, end: i64, value: impl Into<StateValue>) -> Self {
        StateInterval {
            quark,
            start,
            end,
            value: value.into(),
        }
    }

    /// Half-open containment; markers contain nothing.
    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t < self.end
    }

    /// Whether the interval touches the closed window `[t0, t1]`.
    pub fn intersects(&self, t0: i64, t1: i64) -> bool {
        if self.start == self.end {
            t0 <= self.start && self.start <= t1
        } else {
            self.start <= t1 && self.end > t0
        }
    }
}

/// Tree shape parameters. All three are recorded in the file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShtConfig {
    pub fanout: u32,
    pub block_size: u32,
}

impl Default for ShtConfig {
    fn default() -> Self {
        ShtConfig {
            fanout: 50,
            block_size: 64 * 1024,
        }
    }
}

impl ShtConfig {
    pub fn validate(&self) -> Result<(), ShtError> {
        let min = format::min_block_size(self.fanout);
        if self.fanout < 2 || self.block_size < min {
            return Err(ShtError::BadConfig(format!(
                "fanout {} / block size {} (need fanout >= 2 and block size >= {min})",
                self.fanout, self.block_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ShtError {
    #[error("interval end {end} precedes previously inserted end {last}")]
    OutOfOrderEnd { end: i64, last: i64 },
    #[error("interval [{start}, {end}) is inverted")]
    InvertedInterval { start: i64, end: i64 },
    #[error("interval start {start} precedes tree start {tree_start}")]
    StartBeforeTree { start: i64, tree_start: i64 },
    #[error("string value of {0} bytes exceeds the {MAX_STR_LEN}-byte limit")]
    StringTooLong(usize),
    #[error("node overflow: internal invariant violated ({0})")]
    NodeOverflowBug(String),
    #[error("time {t} outside tree range [{start}, {end}]")]
    TimeOutOfRange { t: i64, start: i64, end: i64 },
    #[error("unknown quark {0}")]
    UnknownQuark(Quark),
    #[error("unknown attribute path `{0}`")]
    UnknownPath(String),
    #[error("tree already closed")]
    Closed,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("corrupt history file: {0}")]
    Corrupt(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}
