use std::io::{Read, Seek, SeekFrom, Write};

use super::format::{
    block_offset, BlockBuf, BlockMeta, Header, BLOCK_HEADER_LEN, CHILD_ENTRY_LEN, HEADER_LEN, KIND_CONTINUATION,
    KIND_INTERNAL, KIND_LEAF, NONE,
};
use super::{Quark, ShtConfig, ShtError, StateInterval, StateValue, MAX_STR_LEN};

/// A node of the current branch, still accepting intervals.
#[derive(Debug)]
struct OpenNode {
    id: u64,
    start: i64,
    parent: u64,
    leaf: bool,
    children: Vec<(u64, i64)>,
    buf: BlockBuf,
    /// Most recent continuation block already on disk.
    prev: u64,
}

/// Single-writer builder. Only the current branch lives in memory; sealed
/// nodes and full continuation blocks go straight to the sink.
pub struct ShtWriter<W: Write + Seek> {
    sink: W,
    config: ShtConfig,
    tree_start: i64,
    last_end: i64,
    /// `branch[0]` is the root, the last entry is the current leaf.
    branch: Vec<OpenNode>,
    next_block: u64,
    leaf_count: u64,
    interval_count: u64,
    max_quark: Option<Quark>,
    closed: bool,
}

impl<W: Write + Seek> ShtWriter<W> {
    pub fn new(sink: W, config: ShtConfig, tree_start: i64) -> Result<Self, ShtError> {
        config.validate()?;
        let mut w = ShtWriter {
            sink,
            config,
            tree_start,
            last_end: tree_start,
            branch: Vec::new(),
            next_block: 0,
            leaf_count: 0,
            interval_count: 0,
            max_quark: None,
            closed: false,
        };
        let root = w.open_node(tree_start, NONE, true);
        w.branch.push(root);
        Ok(w)
    }

    pub fn config(&self) -> ShtConfig {
        self.config
    }

    pub fn tree_start(&self) -> i64 {
        self.tree_start
    }

    /// Largest end time inserted so far.
    pub fn last_end(&self) -> i64 {
        self.last_end
    }

    pub fn depth(&self) -> usize {
        self.branch.len()
    }

    pub fn interval_count(&self) -> u64 {
        self.interval_count
    }

    fn capacity(&self, leaf: bool) -> usize {
        let reserve = if leaf {
            0
        } else {
            self.config.fanout as usize * CHILD_ENTRY_LEN
        };
        self.config.block_size as usize - BLOCK_HEADER_LEN - reserve
    }

    fn open_node(&mut self, start: i64, parent: u64, leaf: bool) -> OpenNode {
        let id = self.next_block;
        self.next_block += 1;
        if leaf {
            self.leaf_count += 1;
        }
        OpenNode {
            id,
            start,
            parent,
            leaf,
            children: Vec::new(),
            buf: BlockBuf::new(self.capacity(leaf)),
            prev: NONE,
        }
    }

    pub fn insert(&mut self, iv: StateInterval) -> Result<(), ShtError> {
        if self.closed {
            return Err(ShtError::Closed);
        }
        if iv.end < iv.start {
            return Err(ShtError::InvertedInterval {
                start: iv.start,
                end: iv.end,
            });
        }
        if iv.end < self.last_end {
            return Err(ShtError::OutOfOrderEnd {
                end: iv.end,
                last: self.last_end,
            });
        }
        if iv.start < self.tree_start {
            return Err(ShtError::StartBeforeTree {
                start: iv.start,
                tree_start: self.tree_start,
            });
        }
        if let StateValue::Str(s) = &iv.value {
            if s.len() > MAX_STR_LEN {
                return Err(ShtError::StringTooLong(s.len()));
            }
        }
        self.last_end = iv.end;
        self.max_quark = Some(self.max_quark.map_or(iv.quark, |q| q.max(iv.quark)));
        self.interval_count += 1;

        let mut idx = self.branch.len() - 1;
        loop {
            while self.branch[idx].start > iv.start {
                // The root starts at tree_start, so this always terminates.
                idx -= 1;
            }
            if self.branch[idx].buf.fits(&iv) {
                self.branch[idx].buf.push(iv);
                return Ok(());
            }
            if self.branch[idx].leaf {
                self.add_sibling(idx)?;
                idx = self.branch.len() - 1;
            } else {
                self.spill(idx)?;
                if !self.branch[idx].buf.fits(&iv) {
                    return Err(ShtError::NodeOverflowBug("interval does not fit an empty block".into()));
                }
            }
        }
    }

    /// Writes the full block of an internal node as a continuation block.
    fn spill(&mut self, idx: usize) -> Result<(), ShtError> {
        let id = self.next_block;
        self.next_block += 1;
        let cap = self.capacity(false);
        let node = &mut self.branch[idx];
        let buf = std::mem::replace(&mut node.buf, BlockBuf::new(cap));
        let meta = BlockMeta {
            kind: KIND_CONTINUATION,
            start: node.start,
            end: node.start,
            parent: node.id,
            prev: node.prev,
        };
        node.prev = id;
        let bytes = buf.encode(&meta, &[], self.config.block_size);
        self.write_block(id, &bytes)
    }

    fn write_block(&mut self, id: u64, bytes: &[u8]) -> Result<(), ShtError> {
        self.sink
            .seek(SeekFrom::Start(block_offset(self.config.block_size, id)))?;
        self.sink.write_all(bytes)?;
        Ok(())
    }

    fn seal(&mut self, node: OpenNode, end: i64) -> Result<(), ShtError> {
        let meta = BlockMeta {
            kind: if node.leaf { KIND_LEAF } else { KIND_INTERNAL },
            start: node.start,
            end,
            parent: node.parent,
            prev: node.prev,
        };
        if node.children.len() > self.config.fanout as usize {
            return Err(ShtError::NodeOverflowBug(format!(
                "node {} has {} children",
                node.id,
                node.children.len()
            )));
        }
        let bytes = node.buf.encode(&meta, &node.children, self.config.block_size);
        self.write_block(node.id, &bytes)
    }

    /// Seals `branch[idx..]` and opens a fresh chain below the nearest
    /// ancestor with a free child slot, growing a new root when there is none.
    fn add_sibling(&mut self, idx: usize) -> Result<(), ShtError> {
        let split = self.last_end;
        let leaf_depth = self.branch.len();
        // Nearest ancestor that can take one more child.
        let mut level = idx;
        while level > 0 && self.branch[level - 1].children.len() >= self.config.fanout as usize {
            level -= 1;
        }
        let old_root = self.branch[0].id;
        if level == 0 {
            // The new root takes the next block id.
            self.branch[0].parent = self.next_block;
        }
        let sealed: Vec<OpenNode> = self.branch.drain(level..).collect();
        for node in sealed.into_iter().rev() {
            self.seal(node, split)?;
        }
        let mut depth = leaf_depth;
        if level == 0 {
            // The whole branch was sealed: grow a new root above the old one.
            let mut root = self.open_node(self.tree_start, NONE, false);
            root.children.push((old_root, self.tree_start));
            self.branch.push(root);
            depth += 1;
        }
        while self.branch.len() < depth {
            let parent_id = self.branch.last().expect("branch has a root").id;
            let leaf = self.branch.len() + 1 == depth;
            let node = self.open_node(split, parent_id, leaf);
            self.branch.last_mut().unwrap().children.push((node.id, split));
            self.branch.push(node);
        }
        Ok(())
    }

    /// Seals every open node at `t_end` and writes the header. `paths`, when
    /// given, supplies the attribute path table (one entry per quark).
    pub fn finish(&mut self, t_end: i64, paths: Option<(u64, &mut dyn Read)>) -> Result<Header, ShtError> {
        if self.closed {
            return Err(ShtError::Closed);
        }
        if t_end < self.last_end {
            return Err(ShtError::OutOfOrderEnd {
                end: t_end,
                last: self.last_end,
            });
        }
        let depth = self.branch.len() as u32;
        let root = self.branch[0].id;
        for node in std::mem::take(&mut self.branch).into_iter().rev() {
            self.seal(node, t_end)?;
        }
        self.closed = true;

        let table_offset = block_offset(self.config.block_size, self.next_block);
        self.sink.seek(SeekFrom::Start(table_offset))?;
        let (quark_count, table_len) = match paths {
            Some((count, table)) => (count, std::io::copy(table, &mut self.sink)?),
            None => (self.max_quark.map_or(0, |q| q as u64 + 1), 0),
        };
        let header = Header {
            fanout: self.config.fanout,
            block_size: self.config.block_size,
            root,
            tree_start: self.tree_start,
            tree_end: t_end,
            block_count: self.next_block,
            depth,
            leaf_count: self.leaf_count,
            interval_count: self.interval_count,
            quark_count,
            path_table_offset: table_offset,
            path_table_len: table_len,
        };
        self.sink.seek(SeekFrom::Start(0))?;
        self.sink.write_all(&header.encode())?;
        self.sink.flush()?;
        debug_assert_eq!(HEADER_LEN, header.encode().len() as u64);
        Ok(header)
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn into_inner(self) -> W {
        self.sink
    }

    pub fn sink_mut(&mut self) -> &mut W {
        &mut self.sink
    }
}
