//! Caching allocator model.
//!
//! Requests are rounded to a quantum and served from a pool of cached free
//! blocks (best fit, ties broken by segment id then offset). Only when no
//! cached block fits does the allocator reserve a new segment from the
//! [`Device`]. Freed blocks stay cached inside their segment and coalesce
//! with cached neighbours; [`Allocator::empty_cache`] hands fully unused
//! segments back to the device.
//!
//! Small requests (up to `small_request_max`) and large requests live in
//! separate pools and never share segments.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{Device, DeviceError, SegmentId};
use crate::Bytes;

const MIB: Bytes = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub u64);

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "blk#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockState {
    Live,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub segment: SegmentId,
    pub offset: Bytes,
    pub size: Bytes,
    pub state: BlockState,
    pub stream: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub id: SegmentId,
    pub size: Bytes,
    pub pool: Pool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatorConfig {
    pub rounding_quantum: Bytes,
    pub small_request_max: Bytes,
    pub small_segment_size: Bytes,
    pub segment_granularity: Bytes,
    pub split_remainder_min: Bytes,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            rounding_quantum: 512,
            small_request_max: MIB,
            small_segment_size: 2 * MIB,
            segment_granularity: 2 * MIB,
            split_remainder_min: 512,
        }
    }
}

impl AllocatorConfig {
    pub fn validate(&self) -> Result<(), AllocError> {
        let fields = [
            ("rounding_quantum", self.rounding_quantum),
            ("small_request_max", self.small_request_max),
            ("small_segment_size", self.small_segment_size),
            ("segment_granularity", self.segment_granularity),
            ("split_remainder_min", self.split_remainder_min),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(AllocError::InvalidConfig(format!("{name} must be positive")));
            }
            if value % self.rounding_quantum != 0 {
                return Err(AllocError::InvalidConfig(format!(
                    "{name} ({value}) is not a multiple of rounding_quantum ({})",
                    self.rounding_quantum
                )));
            }
        }
        if self.small_segment_size < self.small_request_max {
            return Err(AllocError::InvalidConfig(
                "small_segment_size must be at least small_request_max".into(),
            ));
        }
        if !self.small_segment_size.is_multiple_of(self.segment_granularity) {
            return Err(AllocError::InvalidConfig(
                "small_segment_size must be a multiple of segment_granularity".into(),
            ));
        }
        Ok(())
    }

    pub fn round_request(&self, request: Bytes) -> Option<Bytes> {
        round_up(request, self.rounding_quantum)
    }

    pub fn pool_for(&self, rounded: Bytes) -> Pool {
        if rounded <= self.small_request_max {
            Pool::Small
        } else {
            Pool::Large
        }
    }

    /// Size of the segment reserved when no cached block can serve `rounded`.
    pub fn segment_size_for(&self, rounded: Bytes) -> Option<Bytes> {
        match self.pool_for(rounded) {
            Pool::Small => Some(self.small_segment_size),
            Pool::Large => round_up(rounded, self.segment_granularity),
        }
    }
}

fn round_up(value: Bytes, quantum: Bytes) -> Option<Bytes> {
    value.checked_next_multiple_of(quantum)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatorStats {
    pub reserved: Bytes,
    pub allocated: Bytes,
    pub cached: Bytes,
    pub segment_count: usize,
}

impl AllocatorStats {
    pub fn fragmentation(&self) -> Bytes {
        self.reserved - self.allocated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid allocator config: {0}")]
    InvalidConfig(String),
    #[error(
        "out of memory: could not reserve {requested} B (reserved {} B, allocated {} B)",
        stats.reserved, stats.allocated
    )]
    OutOfMemory {
        requested: Bytes,
        stats: AllocatorStats,
        /// Reserved minus allocated at the failed reservation.
        frag_sample: Bytes,
    },
    #[error("double free or unknown block {0}")]
    DoubleFree(BlockId),
    #[error("segment {0} still holds live blocks")]
    IllegalRelease(SegmentId),
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
}

#[derive(Debug, Clone)]
struct SegmentEntry {
    segment: Segment,
    /// offset -> block
    blocks: BTreeMap<Bytes, BlockId>,
    live: usize,
}

type FreeKey = (Bytes, SegmentId, Bytes);

#[derive(Debug, Clone)]
pub struct Allocator {
    config: AllocatorConfig,
    device: Device,
    segments: BTreeMap<SegmentId, SegmentEntry>,
    blocks: HashMap<BlockId, Block>,
    free_small: BTreeSet<FreeKey>,
    free_large: BTreeSet<FreeKey>,
    allocated: Bytes,
    cached: Bytes,
    next_block: u64,
    event_index: usize,
    oom_retry_releases: u64,
}

impl Allocator {
    pub fn new(config: AllocatorConfig, capacity: Bytes) -> Result<Self, AllocError> {
        config.validate()?;
        let device = Device::new(capacity, config.segment_granularity);
        Ok(Self {
            config,
            device,
            segments: BTreeMap::new(),
            blocks: HashMap::new(),
            free_small: BTreeSet::new(),
            free_large: BTreeSet::new(),
            allocated: 0,
            cached: 0,
            next_block: 0,
            event_index: 0,
            oom_retry_releases: 0,
        })
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Tags subsequent device reservations with this trace position.
    pub fn set_event_index(&mut self, index: usize) {
        self.event_index = index;
    }

    /// How many times a capacity shortfall forced an internal cache release.
    pub fn oom_retry_releases(&self) -> u64 {
        self.oom_retry_releases
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(&id)
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values().map(|e| &e.segment)
    }

    /// Blocks of one segment in offset order.
    pub fn segment_blocks(&self, id: SegmentId) -> Option<Vec<&Block>> {
        let entry = self.segments.get(&id)?;
        Some(entry.blocks.values().map(|b| &self.blocks[b]).collect())
    }

    pub fn stats(&self) -> AllocatorStats {
        AllocatorStats {
            reserved: self.device.reserved_total(),
            allocated: self.allocated,
            cached: self.cached,
            segment_count: self.segments.len(),
        }
    }

    pub fn alloc(&mut self, request: Bytes, stream: u32) -> Result<BlockId, AllocError> {
        if request == 0 {
            return Err(AllocError::InvalidArgument("zero-size request".into()));
        }
        let rounded = self
            .config
            .round_request(request)
            .ok_or_else(|| AllocError::InvalidArgument(format!("request {request} B overflows")))?;
        let pool = self.config.pool_for(rounded);

        let candidate = self
            .free_set(pool)
            .range((rounded, SegmentId(0), 0)..)
            .next()
            .copied();
        let block_id = match candidate {
            Some(key) => {
                self.free_set_mut(pool).remove(&key);
                let (_, segment, offset) = key;
                self.segments[&segment].blocks[&offset]
            }
            None => self.grow(rounded, pool)?,
        };

        let (segment, offset, size) = {
            let b = &self.blocks[&block_id];
            (b.segment, b.offset, b.size)
        };
        let remainder = size - rounded;
        let live_size = if remainder > 0 && remainder >= self.config.split_remainder_min {
            let rest = self.new_block_id();
            let rest_offset = offset + rounded;
            self.blocks.insert(
                rest,
                Block {
                    id: rest,
                    segment,
                    offset: rest_offset,
                    size: remainder,
                    state: BlockState::Cached,
                    stream,
                },
            );
            self.segments
                .get_mut(&segment)
                .expect("segment of cached block")
                .blocks
                .insert(rest_offset, rest);
            self.free_set_mut(pool).insert((remainder, segment, rest_offset));
            rounded
        } else {
            size
        };

        let block = self.blocks.get_mut(&block_id).expect("candidate block");
        block.size = live_size;
        block.state = BlockState::Live;
        block.stream = stream;
        self.segments.get_mut(&segment).expect("segment").live += 1;
        self.cached -= live_size;
        self.allocated += live_size;
        Ok(block_id)
    }

    pub fn free(&mut self, id: BlockId) -> Result<(), AllocError> {
        let (segment, offset, size) = match self.blocks.get_mut(&id) {
            Some(b) if b.state == BlockState::Live => {
                b.state = BlockState::Cached;
                (b.segment, b.offset, b.size)
            }
            _ => return Err(AllocError::DoubleFree(id)),
        };
        self.allocated -= size;
        self.cached += size;

        let entry = self.segments.get_mut(&segment).expect("segment of live block");
        entry.live -= 1;
        let pool = entry.segment.pool;
        let blocks = &self.blocks;
        let is_cached = |b: &BlockId| blocks[b].state == BlockState::Cached;
        let prev = entry.blocks.range(..offset).next_back().map(|(_, b)| *b).filter(is_cached);
        let next = entry.blocks.range(offset + size..).next().map(|(_, b)| *b).filter(is_cached);

        let (mut start, mut total, mut survivor) = (offset, size, id);
        if let Some(prev) = prev {
            self.blocks.remove(&id);
            entry.blocks.remove(&offset);
            let p = &self.blocks[&prev];
            let key = (p.size, segment, p.offset);
            start = p.offset;
            total += p.size;
            survivor = prev;
            self.free_set_mut(pool).remove(&key);
        }
        if let Some(next) = next {
            let n = self.blocks.remove(&next).expect("next block");
            self.segments
                .get_mut(&segment)
                .expect("segment")
                .blocks
                .remove(&n.offset);
            total += n.size;
            self.free_set_mut(pool).remove(&(n.size, segment, n.offset));
        }
        self.blocks.get_mut(&survivor).expect("survivor").size = total;
        self.free_set_mut(pool).insert((total, segment, start));
        Ok(())
    }

    /// Releases every segment without live blocks and returns the bytes handed back.
    pub fn empty_cache(&mut self) -> Bytes {
        let idle: Vec<SegmentId> = self
            .segments
            .values()
            .filter(|e| e.live == 0)
            .map(|e| e.segment.id)
            .collect();
        idle.into_iter()
            .map(|id| self.release_segment(id).expect("idle segment releases"))
            .sum()
    }

    pub fn release_segment(&mut self, id: SegmentId) -> Result<Bytes, AllocError> {
        let entry = self.segments.get(&id).ok_or(AllocError::UnknownSegment(id))?;
        if entry.live > 0 {
            return Err(AllocError::IllegalRelease(id));
        }
        let entry = self.segments.remove(&id).expect("checked above");
        let pool = entry.segment.pool;
        for (offset, block) in entry.blocks {
            let b = self.blocks.remove(&block).expect("block of segment");
            self.free_set_mut(pool).remove(&(b.size, id, offset));
            self.cached -= b.size;
        }
        self.device
            .release_segment(id)
            .map_err(|_| AllocError::UnknownSegment(id))
    }

    /// Checks tiling, coalescing and accounting. Intended for tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut allocated = 0;
        let mut cached = 0;
        let mut reserved = 0;
        let mut free_keys = 0usize;
        for (sid, entry) in &self.segments {
            let seg = &entry.segment;
            if seg.size % self.config.segment_granularity != 0 {
                return Err(format!("{sid} size {} not granular", seg.size));
            }
            if self.device.segment_size(*sid) != Some(seg.size) {
                return Err(format!("{sid} disagrees with device"));
            }
            reserved += seg.size;
            let mut cursor = 0;
            let mut prev_cached = false;
            let mut live = 0;
            for (offset, bid) in &entry.blocks {
                let b = self
                    .blocks
                    .get(bid)
                    .ok_or_else(|| format!("{bid} missing from block table"))?;
                if b.offset != *offset || b.segment != *sid {
                    return Err(format!("{bid} location mismatch"));
                }
                if *offset != cursor {
                    return Err(format!("{sid} gap/overlap at offset {offset} (expected {cursor})"));
                }
                if b.size == 0 || b.size % self.config.rounding_quantum != 0 {
                    return Err(format!("{bid} has bad size {}", b.size));
                }
                cursor += b.size;
                match b.state {
                    BlockState::Live => {
                        allocated += b.size;
                        live += 1;
                        prev_cached = false;
                    }
                    BlockState::Cached => {
                        if prev_cached {
                            return Err(format!("{sid} has adjacent cached blocks at {offset}"));
                        }
                        if !self.free_set(seg.pool).contains(&(b.size, *sid, *offset)) {
                            return Err(format!("{bid} cached but not indexed"));
                        }
                        free_keys += 1;
                        cached += b.size;
                        prev_cached = true;
                    }
                }
            }
            if cursor != seg.size {
                return Err(format!("{sid} tiles {cursor} of {} bytes", seg.size));
            }
            if live != entry.live {
                return Err(format!("{sid} live count {} != {live}", entry.live));
            }
        }
        if free_keys != self.free_small.len() + self.free_large.len() {
            return Err("stale entries in free index".into());
        }
        if self.blocks.len() != self.segments.values().map(|e| e.blocks.len()).sum::<usize>() {
            return Err("orphan blocks".into());
        }
        let stats = self.stats();
        if stats.allocated != allocated || stats.cached != cached || stats.reserved != reserved {
            return Err(format!(
                "accounting drift: stats {stats:?} vs recomputed allocated={allocated} cached={cached} reserved={reserved}"
            ));
        }
        if stats.allocated + stats.cached != stats.reserved {
            return Err("allocated + cached != reserved".into());
        }
        Ok(())
    }

    fn grow(&mut self, rounded: Bytes, pool: Pool) -> Result<BlockId, AllocError> {
        let size = self.config.segment_size_for(rounded).ok_or_else(|| {
            AllocError::InvalidArgument(format!("request {rounded} B overflows segment sizing"))
        })?;
        let segment = match self
            .device
            .reserve_segment(size, self.event_index, self.allocated)
        {
            Ok(id) => id,
            Err(DeviceError::CapacityExceeded { .. }) => {
                self.oom_retry_releases += 1;
                self.empty_cache();
                self.device
                    .reserve_segment(size, self.event_index, self.allocated)
                    .map_err(|_| {
                        let stats = self.stats();
                        AllocError::OutOfMemory {
                            requested: size,
                            stats,
                            frag_sample: stats.fragmentation(),
                        }
                    })?
            }
            Err(other) => return Err(AllocError::InvalidArgument(other.to_string())),
        };
        let id = self.new_block_id();
        self.blocks.insert(
            id,
            Block {
                id,
                segment,
                offset: 0,
                size,
                state: BlockState::Cached,
                stream: 0,
            },
        );
        self.segments.insert(
            segment,
            SegmentEntry {
                segment: Segment {
                    id: segment,
                    size,
                    pool,
                },
                blocks: BTreeMap::from([(0, id)]),
                live: 0,
            },
        );
        self.cached += size;
        Ok(id)
    }

    fn new_block_id(&mut self) -> BlockId {
        let id = BlockId(self.next_block);
        self.next_block += 1;
        id
    }

    fn free_set(&self, pool: Pool) -> &BTreeSet<FreeKey> {
        match pool {
            Pool::Small => &self.free_small,
            Pool::Large => &self.free_large,
        }
    }

    fn free_set_mut(&mut self, pool: Pool) -> &mut BTreeSet<FreeKey> {
        match pool {
            Pool::Small => &mut self.free_small,
            Pool::Large => &mut self.free_large,
        }
    }

}
