//! Byte layout of `.sht` files. Everything is little-endian.

use std::collections::HashMap;

use super::{Quark, ShtError, StateInterval, StateValue, MAX_STR_LEN};

pub const MAGIC: &[u8; 4] = b"SHT1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 128;

pub(crate) const NONE: u64 = u64::MAX;
pub(crate) const BLOCK_HEADER_LEN: usize = 48;
pub(crate) const CHILD_ENTRY_LEN: usize = 16;
const RECORD_FIXED_LEN: usize = 4 + 8 + 8 + 1;

pub(crate) const KIND_LEAF: u8 = 1;
pub(crate) const KIND_INTERNAL: u8 = 2;
pub(crate) const KIND_CONTINUATION: u8 = 3;

const TAG_NULL: u8 = 0;
const TAG_INT: u8 = 1;
const TAG_FLOAT: u8 = 2;
const TAG_STR: u8 = 3;

pub(crate) fn min_block_size(fanout: u32) -> u32 {
    let need = BLOCK_HEADER_LEN + fanout as usize * CHILD_ENTRY_LEN + 4 + MAX_STR_LEN + RECORD_FIXED_LEN + 4;
    need as u32
}

/// File header, stored in the first `HEADER_LEN` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub fanout: u32,
    pub block_size: u32,
    pub root: u64,
    pub tree_start: i64,
    pub tree_end: i64,
    pub block_count: u64,
    pub depth: u32,
    pub leaf_count: u64,
    pub interval_count: u64,
    pub quark_count: u64,
    pub path_table_offset: u64,
    pub path_table_len: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&self.fanout.to_le_bytes());
        b[12..16].copy_from_slice(&self.block_size.to_le_bytes());
        b[16..24].copy_from_slice(&self.root.to_le_bytes());
        b[24..32].copy_from_slice(&self.tree_start.to_le_bytes());
        b[32..40].copy_from_slice(&self.tree_end.to_le_bytes());
        b[40..48].copy_from_slice(&self.block_count.to_le_bytes());
        b[48..52].copy_from_slice(&self.depth.to_le_bytes());
        b[56..64].copy_from_slice(&self.leaf_count.to_le_bytes());
        b[64..72].copy_from_slice(&self.interval_count.to_le_bytes());
        b[72..80].copy_from_slice(&self.quark_count.to_le_bytes());
        b[80..88].copy_from_slice(&self.path_table_offset.to_le_bytes());
        b[88..96].copy_from_slice(&self.path_table_len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Header, ShtError> {
        if b.len() < HEADER_LEN as usize {
            return Err(ShtError::Corrupt("short header".into()));
        }
        if &b[0..4] != MAGIC {
            return Err(ShtError::Corrupt("bad magic".into()));
        }
        let mut c = Cursor::new(&b[4..]);
        let version = c.u32()?;
        if version != VERSION {
            return Err(ShtError::Corrupt(format!("unsupported version {version}")));
        }
        let fanout = c.u32()?;
        let block_size = c.u32()?;
        let root = c.u64()?;
        let tree_start = c.i64()?;
        let tree_end = c.i64()?;
        let block_count = c.u64()?;
        let depth = c.u32()?;
        let _reserved = c.u32()?;
        let header = Header {
            fanout,
            block_size,
            root,
            tree_start,
            tree_end,
            block_count,
            depth,
            leaf_count: c.u64()?,
            interval_count: c.u64()?,
            quark_count: c.u64()?,
            path_table_offset: c.u64()?,
            path_table_len: c.u64()?,
        };
        if header.block_size == 0 || header.fanout < 2 {
            return Err(ShtError::Corrupt("bad tree parameters".into()));
        }
        Ok(header)
    }

    pub fn block_offset(&self, id: u64) -> u64 {
        block_offset(self.block_size, id)
    }
}

pub(crate) fn block_offset(block_size: u32, id: u64) -> u64 {
    HEADER_LEN + id * block_size as u64
}

/// Intervals accumulated for one block, with the block-local string table.
#[derive(Debug)]
pub(crate) struct BlockBuf {
    pub intervals: Vec<StateInterval>,
    dict: HashMap<String, u32>,
    strings: Vec<String>,
    used: usize,
    capacity: usize,
}

impl BlockBuf {
    pub fn new(capacity: usize) -> Self {
        BlockBuf {
            intervals: Vec::new(),
            dict: HashMap::new(),
            strings: Vec::new(),
            used: 0,
            capacity,
        }
    }

    fn cost(&self, iv: &StateInterval) -> usize {
        RECORD_FIXED_LEN
            + match &iv.value {
                StateValue::Null => 0,
                StateValue::Int(_) | StateValue::Float(_) => 8,
                StateValue::Str(s) => 4 + if self.dict.contains_key(s) { 0 } else { 4 + s.len() },
            }
    }

    pub fn fits(&self, iv: &StateInterval) -> bool {
        self.used + self.cost(iv) <= self.capacity
    }

    pub fn push(&mut self, iv: StateInterval) {
        self.used += self.cost(&iv);
        if let StateValue::Str(s) = &iv.value {
            if !self.dict.contains_key(s) {
                self.dict.insert(s.clone(), self.strings.len() as u32);
                self.strings.push(s.clone());
            }
        }
        self.intervals.push(iv);
    }

    /// Encodes the block. `children` is empty for leaves and continuations.
    pub fn encode(&self, meta: &BlockMeta, children: &[(u64, i64)], block_size: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(block_size as usize);
        out.push(meta.kind);
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&(self.intervals.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta.start.to_le_bytes());
        out.extend_from_slice(&meta.end.to_le_bytes());
        out.extend_from_slice(&meta.parent.to_le_bytes());
        out.extend_from_slice(&meta.prev.to_le_bytes());
        out.extend_from_slice(&(children.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.strings.len() as u32).to_le_bytes());
        for (id, start) in children {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&start.to_le_bytes());
        }
        for s in &self.strings {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for iv in &self.intervals {
            out.extend_from_slice(&iv.quark.to_le_bytes());
            out.extend_from_slice(&iv.start.to_le_bytes());
            out.extend_from_slice(&iv.end.to_le_bytes());
            match &iv.value {
                StateValue::Null => out.push(TAG_NULL),
                StateValue::Int(v) => {
                    out.push(TAG_INT);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                StateValue::Float(v) => {
                    out.push(TAG_FLOAT);
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                StateValue::Str(s) => {
                    out.push(TAG_STR);
                    out.extend_from_slice(&self.dict[s].to_le_bytes());
                }
            }
        }
        assert!(
            out.len() <= block_size as usize,
            "block encoding of {} bytes exceeds block size {block_size}",
            out.len()
        );
        out.resize(block_size as usize, 0);
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockMeta {
    pub kind: u8,
    pub start: i64,
    pub end: i64,
    pub parent: u64,
    pub prev: u64,
}

/// A block read back from disk. Intervals are sorted by `(quark, start)`.
#[derive(Debug)]
pub(crate) struct DecodedBlock {
    pub kind: u8,
    pub start: i64,
    pub end: i64,
    pub parent: u64,
    pub prev: u64,
    pub children: Vec<(u64, i64)>,
    pub intervals: Vec<StateInterval>,
}

impl DecodedBlock {
    pub fn decode(b: &[u8]) -> Result<DecodedBlock, ShtError> {
        let mut c = Cursor::new(b);
        let kind = c.u8()?;
        if !matches!(kind, KIND_LEAF | KIND_INTERNAL | KIND_CONTINUATION) {
            return Err(ShtError::Corrupt(format!("unknown block kind {kind}")));
        }
        c.skip(3)?;
        let count = c.u32()? as usize;
        let start = c.i64()?;
        let end = c.i64()?;
        let parent = c.u64()?;
        let prev = c.u64()?;
        let child_count = c.u32()? as usize;
        let dict_count = c.u32()? as usize;
        let mut children = Vec::with_capacity(child_count);
        for _ in 0..child_count {
            children.push((c.u64()?, c.i64()?));
        }
        let mut strings = Vec::with_capacity(dict_count);
        for _ in 0..dict_count {
            let len = c.u32()? as usize;
            let bytes = c.take(len)?;
            let s = std::str::from_utf8(bytes).map_err(|_| ShtError::Corrupt("non-UTF-8 string".into()))?;
            strings.push(s.to_owned());
        }
        let mut intervals = Vec::with_capacity(count);
        for _ in 0..count {
            let quark: Quark = c.u32()?;
            let s = c.i64()?;
            let e = c.i64()?;
            let value = match c.u8()? {
                TAG_NULL => StateValue::Null,
                TAG_INT => StateValue::Int(c.i64()?),
                TAG_FLOAT => StateValue::Float(f64::from_bits(c.u64()?)),
                TAG_STR => {
                    let idx = c.u32()? as usize;
                    StateValue::Str(
                        strings
                            .get(idx)
                            .cloned()
                            .ok_or_else(|| ShtError::Corrupt("bad string index".into()))?,
                    )
                }
                t => return Err(ShtError::Corrupt(format!("unknown value tag {t}"))),
            };
            intervals.push(StateInterval {
                quark,
                start: s,
                end: e,
                value,
            });
        }
        intervals.sort_by_key(|iv| (iv.quark, iv.start, iv.end));
        Ok(DecodedBlock {
            kind,
            start,
            end,
            parent,
            prev,
            children,
            intervals,
        })
    }

    /// Intervals of one quark, ordered by start.
    pub fn of_quark(&self, quark: Quark) -> &[StateInterval] {
        let lo = self.intervals.partition_point(|iv| iv.quark < quark);
        let hi = self.intervals.partition_point(|iv| iv.quark <= quark);
        &self.intervals[lo..hi]
    }
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ShtError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ShtError::Corrupt("truncated record".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn skip(&mut self, n: usize) -> Result<(), ShtError> {
        self.take(n).map(|_| ())
    }

    pub fn u8(&mut self) -> Result<u8, ShtError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ShtError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ShtError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, ShtError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }
}
