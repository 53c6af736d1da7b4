use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::format::{Cursor, DecodedBlock, Header, HEADER_LEN, KIND_CONTINUATION, NONE};
use super::{Quark, ShtError, StateInterval, StateValue};

/// Positional, thread-safe byte access to a history file.
pub trait BlockSource: Send + Sync {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()>;
}

#[cfg(unix)]
impl BlockSource for std::fs::File {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
        std::os::unix::fs::FileExt::read_exact_at(self, buf, offset)
    }
}

impl BlockSource for Vec<u8> {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
        let start = offset as usize;
        let src = start
            .checked_add(buf.len())
            .and_then(|end| self.get(start..end))
            .ok_or_else(|| std::io::Error::from(std::io::ErrorKind::UnexpectedEof))?;
        buf.copy_from_slice(src);
        Ok(())
    }
}

const CACHE_BLOCKS: usize = 256;

/// Read-only view of a closed history file. Cheap to share across threads.
pub struct ShtReader {
    source: Box<dyn BlockSource>,
    header: Header,
    paths: Vec<String>,
    by_path: HashMap<String, Quark>,
    cache: Mutex<HashMap<u64, Arc<DecodedBlock>>>,
    visits: AtomicU64,
}

impl std::fmt::Debug for ShtReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShtReader").field("header", &self.header).finish()
    }
}

impl ShtReader {
    #[cfg(unix)]
    pub fn open(path: &Path) -> Result<ShtReader, ShtError> {
        ShtReader::from_source(Box::new(std::fs::File::open(path)?))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<ShtReader, ShtError> {
        ShtReader::from_source(Box::new(bytes))
    }

    pub fn from_source(source: Box<dyn BlockSource>) -> Result<ShtReader, ShtError> {
        let mut hb = [0u8; HEADER_LEN as usize];
        source.read_at(0, &mut hb)?;
        let header = Header::decode(&hb)?;
        let mut paths = Vec::new();
        let mut by_path = HashMap::new();
        if header.path_table_len > 0 {
            let mut table = vec![0u8; header.path_table_len as usize];
            source.read_at(header.path_table_offset, &mut table)?;
            let mut c = Cursor::new(&table);
            while !c.is_empty() {
                let len = c.u32()? as usize;
                let p = std::str::from_utf8(c.take(len)?)
                    .map_err(|_| ShtError::Corrupt("non-UTF-8 path".into()))?
                    .to_owned();
                if by_path.insert(p.clone(), paths.len() as Quark).is_some() {
                    return Err(ShtError::Corrupt(format!("duplicate path `{p}`")));
                }
                paths.push(p);
            }
            if paths.len() as u64 != header.quark_count {
                return Err(ShtError::Corrupt(format!(
                    "path table has {} entries, header says {}",
                    paths.len(),
                    header.quark_count
                )));
            }
        }
        Ok(ShtReader {
            source,
            header,
            paths,
            by_path,
            cache: Mutex::new(HashMap::new()),
            visits: AtomicU64::new(0),
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn start(&self) -> i64 {
        self.header.tree_start
    }

    pub fn end(&self) -> i64 {
        self.header.tree_end
    }

    pub fn quark_count(&self) -> usize {
        self.header.quark_count as usize
    }

    /// Attribute paths indexed by quark (empty for bare trees).
    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn quark(&self, path: &str) -> Result<Quark, ShtError> {
        self.by_path
            .get(path)
            .copied()
            .ok_or_else(|| ShtError::UnknownPath(path.to_owned()))
    }

    pub fn path(&self, quark: Quark) -> Option<&str> {
        self.paths.get(quark as usize).map(String::as_str)
    }

    /// Quarks whose path starts with `prefix` followed by `/` (or equals it).
    pub fn quarks_under(&self, prefix: &str) -> Vec<Quark> {
        self.paths
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.as_str() == prefix || (p.starts_with(prefix) && p.as_bytes().get(prefix.len()) == Some(&b'/'))
            })
            .map(|(q, _)| q as Quark)
            .collect()
    }

    /// Number of tree nodes visited by queries since the last reset.
    pub fn nodes_visited(&self) -> u64 {
        self.visits.load(Ordering::Relaxed)
    }

    pub fn reset_visits(&self) {
        self.visits.store(0, Ordering::Relaxed);
    }

    fn block(&self, id: u64) -> Result<Arc<DecodedBlock>, ShtError> {
        if let Some(b) = self.cache.lock().unwrap().get(&id) {
            return Ok(b.clone());
        }
        if id >= self.header.block_count {
            return Err(ShtError::Corrupt(format!("block {id} out of range")));
        }
        let mut buf = vec![0u8; self.header.block_size as usize];
        self.source.read_at(self.header.block_offset(id), &mut buf)?;
        let block = Arc::new(DecodedBlock::decode(&buf)?);
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= CACHE_BLOCKS {
            cache.clear();
        }
        cache.insert(id, block.clone());
        Ok(block)
    }

    /// Head block of a node plus its continuation chain.
    fn node(&self, id: u64) -> Result<Vec<Arc<DecodedBlock>>, ShtError> {
        self.visits.fetch_add(1, Ordering::Relaxed);
        let head = self.block(id)?;
        if head.kind == KIND_CONTINUATION {
            return Err(ShtError::Corrupt(format!("block {id} is not a node head")));
        }
        let mut prev = head.prev;
        let mut blocks = vec![head];
        while prev != NONE {
            let b = self.block(prev)?;
            if b.kind != KIND_CONTINUATION || b.parent != id {
                return Err(ShtError::Corrupt(format!("broken continuation chain at {prev}")));
            }
            prev = b.prev;
            blocks.push(b);
        }
        Ok(blocks)
    }

    fn check_time(&self, t: i64) -> Result<(), ShtError> {
        if t < self.header.tree_start || t > self.header.tree_end {
            return Err(ShtError::TimeOutOfRange {
                t,
                start: self.header.tree_start,
                end: self.header.tree_end,
            });
        }
        Ok(())
    }

    fn check_quark(&self, quark: Quark) -> Result<(), ShtError> {
        if quark as u64 >= self.header.quark_count {
            return Err(ShtError::UnknownQuark(quark));
        }
        Ok(())
    }

    /// Walks the root-to-leaf path of nodes whose range contains `t`.
    fn stab_path(&self, t: i64, mut visit: impl FnMut(&DecodedBlock)) -> Result<(), ShtError> {
        let mut id = self.header.root;
        loop {
            let blocks = self.node(id)?;
            for b in &blocks {
                visit(b);
            }
            let head = &blocks[0];
            let next = head.children.iter().take_while(|(_, start)| *start <= t).last();
            match next {
                Some(&(child, _)) => id = child,
                None => return Ok(()),
            }
        }
    }

    /// State of every attribute at `t`, indexed by quark.
    pub fn query_full(&self, t: i64) -> Result<Vec<StateValue>, ShtError> {
        self.check_time(t)?;
        let mut out = vec![StateValue::Null; self.quark_count()];
        self.stab_path(t, |b| {
            for iv in &b.intervals {
                if iv.contains(t) {
                    if let Some(slot) = out.get_mut(iv.quark as usize) {
                        *slot = iv.value.clone();
                    }
                }
            }
        })?;
        Ok(out)
    }

    pub fn query_interval(&self, quark: Quark, t: i64) -> Result<Option<StateInterval>, ShtError> {
        self.check_quark(quark)?;
        self.check_time(t)?;
        let mut found = None;
        self.stab_path(t, |b| {
            if found.is_none() {
                found = b.of_quark(quark).iter().find(|iv| iv.contains(t)).cloned();
            }
        })?;
        Ok(found)
    }

    pub fn query_single(&self, quark: Quark, t: i64) -> Result<StateValue, ShtError> {
        Ok(self.query_interval(quark, t)?.map_or(StateValue::Null, |iv| iv.value))
    }

    /// Every interval of `quark` touching the closed window `[t0, t1]`,
    /// ordered by start.
    pub fn query_range(&self, quark: Quark, t0: i64, t1: i64) -> Result<Vec<StateInterval>, ShtError> {
        self.check_quark(quark)?;
        if t0 > t1 {
            return Err(ShtError::TimeOutOfRange {
                t: t0,
                start: t0,
                end: t1,
            });
        }
        if t1 < self.header.tree_start || t0 > self.header.tree_end {
            return Err(ShtError::TimeOutOfRange {
                t: if t1 < self.header.tree_start { t1 } else { t0 },
                start: self.header.tree_start,
                end: self.header.tree_end,
            });
        }
        // Ties on (start, end) are broken by insertion order: older nodes
        // first, then the continuation chain oldest first, then block order.
        let mut tagged = Vec::new();
        let mut stack = vec![self.header.root];
        while let Some(id) = stack.pop() {
            let blocks = self.node(id)?;
            let chain = blocks.len();
            for (rank, b) in blocks.iter().enumerate() {
                let age = chain - 1 - rank;
                tagged.extend(
                    b.of_quark(quark)
                        .iter()
                        .enumerate()
                        .filter(|(_, iv)| iv.intersects(t0, t1))
                        .map(|(i, iv)| ((iv.start, iv.end, id, age, i), iv.clone())),
                );
            }
            let head = &blocks[0];
            for (i, &(child, start)) in head.children.iter().enumerate() {
                let end = head.children.get(i + 1).map_or(head.end, |&(_, s)| s);
                if start <= t1 && end >= t0 {
                    stack.push(child);
                }
            }
        }
        tagged.sort_unstable_by_key(|(k, _)| *k);
        Ok(tagged.into_iter().map(|(_, iv)| iv).collect())
    }

    /// Every stored interval, in no particular order. Intended for tests and
    /// exports, not for queries.
    pub fn all_intervals(&self) -> Result<Vec<StateInterval>, ShtError> {
        let mut out = Vec::with_capacity(self.header.interval_count as usize);
        let mut stack = vec![self.header.root];
        while let Some(id) = stack.pop() {
            let blocks = self.node(id)?;
            for b in &blocks {
                out.extend(b.intervals.iter().cloned());
            }
            stack.extend(blocks[0].children.iter().map(|&(c, _)| c));
        }
        Ok(out)
    }

    /// Checks structural invariants: child ranges nest inside their parent,
    /// intervals sit inside their node, every leaf is at the same depth.
    /// Returns `(depth, leaf_count)`.
    pub fn verify_structure(&self) -> Result<(u32, u64), ShtError> {
        let mut leaves = 0u64;
        let mut depth = None;
        let mut stack = vec![(
            self.header.root,
            1u32,
            NONE,
            self.header.tree_start,
            self.header.tree_end,
        )];
        while let Some((id, level, parent, lo, hi)) = stack.pop() {
            let blocks = self.node(id)?;
            let head = &blocks[0];
            if head.parent != parent {
                return Err(ShtError::Corrupt(format!("node {id} has wrong parent")));
            }
            if head.start < lo || head.end > hi || head.start > head.end {
                return Err(ShtError::Corrupt(format!("node {id} escapes its parent range")));
            }
            for b in &blocks {
                if let Some(iv) = b.intervals.iter().find(|iv| iv.start < head.start || iv.end > head.end) {
                    return Err(ShtError::Corrupt(format!(
                        "interval [{}, {}) outside node {id} [{}, {}]",
                        iv.start, iv.end, head.start, head.end
                    )));
                }
            }
            if head.children.is_empty() {
                leaves += 1;
                match depth {
                    None => depth = Some(level),
                    Some(d) if d != level => return Err(ShtError::Corrupt("leaves at different depths".into())),
                    Some(_) => {}
                }
            }
            if head.children.len() > self.header.fanout as usize {
                return Err(ShtError::Corrupt(format!("node {id} exceeds fanout")));
            }
            for (i, &(child, start)) in head.children.iter().enumerate() {
                let end = head.children.get(i + 1).map_or(head.end, |&(_, s)| s);
                stack.push((child, level + 1, id, start, end));
            }
        }
        Ok((depth.unwrap_or(0), leaves))
    }
}
