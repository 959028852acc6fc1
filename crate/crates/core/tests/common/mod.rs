//! Brute-force reference accountant.
//!
//! Plain vectors and linear scans, written from the allocation rules alone
//! so it shares no code with the real allocator.

#![allow(dead_code)]

use fragsim::{AllocatorConfig, Bytes};

#[derive(Debug, Clone)]
struct Piece {
    offset: Bytes,
    size: Bytes,
    owner: Option<u64>,
}

#[derive(Debug, Clone)]
struct Seg {
    id: u64,
    size: Bytes,
    small: bool,
    pieces: Vec<Piece>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub event: usize,
    pub reserved_before: Bytes,
    pub allocated_before: Bytes,
}

#[derive(Debug)]
pub struct Oracle {
    quantum: Bytes,
    small_max: Bytes,
    small_seg: Bytes,
    granularity: Bytes,
    split_min: Bytes,
    capacity: Bytes,
    segs: Vec<Seg>,
    next_seg: u64,
    next_handle: u64,
    pub samples: Vec<Sample>,
    pub event: usize,
}

impl Oracle {
    pub fn new(c: &AllocatorConfig, capacity: Bytes) -> Self {
        Oracle {
            quantum: c.rounding_quantum,
            small_max: c.small_request_max,
            small_seg: c.small_segment_size,
            granularity: c.segment_granularity,
            split_min: c.split_remainder_min,
            capacity,
            segs: Vec::new(),
            next_seg: 0,
            next_handle: 0,
            samples: Vec::new(),
            event: 0,
        }
    }

    pub fn reserved(&self) -> Bytes {
        self.segs.iter().map(|s| s.size).sum()
    }

    pub fn allocated(&self) -> Bytes {
        self.segs
            .iter()
            .flat_map(|s| &s.pieces)
            .filter(|p| p.owner.is_some())
            .map(|p| p.size)
            .sum()
    }

    /// Handle of the new block, or `None` on out-of-memory.
    pub fn alloc(&mut self, request: Bytes) -> Option<u64> {
        let rounded = request.div_ceil(self.quantum) * self.quantum;
        let small = rounded <= self.small_max;

        let mut best: Option<(Bytes, u64, Bytes, usize, usize)> = None;
        for (si, s) in self.segs.iter().enumerate() {
            if s.small != small {
                continue;
            }
            for (pi, p) in s.pieces.iter().enumerate() {
                if p.owner.is_none() && p.size >= rounded {
                    let key = (p.size, s.id, p.offset, si, pi);
                    if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                        best = Some(key);
                    }
                }
            }
        }
        let (si, pi) = match best {
            Some((_, _, _, si, pi)) => (si, pi),
            None => {
                let size = if small {
                    self.small_seg
                } else {
                    rounded.div_ceil(self.granularity) * self.granularity
                };
                if self.reserved() + size > self.capacity {
                    self.empty_cache();
                    if self.reserved() + size > self.capacity {
                        return None;
                    }
                }
                self.samples.push(Sample {
                    event: self.event,
                    reserved_before: self.reserved(),
                    allocated_before: self.allocated(),
                });
                self.segs.push(Seg {
                    id: self.next_seg,
                    size,
                    small,
                    pieces: vec![Piece { offset: 0, size, owner: None }],
                });
                self.next_seg += 1;
                (self.segs.len() - 1, 0)
            }
        };

        let handle = self.next_handle;
        self.next_handle += 1;
        let split_min = self.split_min;
        let pieces = &mut self.segs[si].pieces;
        let p = pieces[pi].clone();
        let rest = p.size - rounded;
        if rest > 0 && rest >= split_min {
            pieces[pi] = Piece { offset: p.offset, size: rounded, owner: Some(handle) };
            pieces.insert(pi + 1, Piece { offset: p.offset + rounded, size: rest, owner: None });
        } else {
            pieces[pi].owner = Some(handle);
        }
        Some(handle)
    }

    pub fn free(&mut self, handle: u64) {
        for s in &mut self.segs {
            if let Some(i) = s.pieces.iter().position(|p| p.owner == Some(handle)) {
                s.pieces[i].owner = None;
                // Merge every run of adjacent free pieces.
                let mut merged: Vec<Piece> = Vec::new();
                for p in s.pieces.drain(..) {
                    match merged.last_mut() {
                        Some(last) if last.owner.is_none() && p.owner.is_none() => last.size += p.size,
                        _ => merged.push(p),
                    }
                }
                s.pieces = merged;
                return;
            }
        }
        panic!("oracle: free of unknown handle {handle}");
    }

    pub fn empty_cache(&mut self) -> Bytes {
        let before = self.reserved();
        self.segs.retain(|s| s.pieces.iter().any(|p| p.owner.is_some()));
        before - self.reserved()
    }

    /// Latest sample at or before the event where the reserved series first
    /// reaches its maximum, given that series.
    pub fn frag_at_peak(&self, reserved_series: &[Bytes]) -> Bytes {
        let peak = reserved_series.iter().copied().max().unwrap_or(0);
        let Some(at) = reserved_series.iter().position(|&r| r == peak && peak > 0) else {
            return 0;
        };
        self.samples
            .iter()
            .rev()
            .find(|s| s.event <= at)
            .map(|s| s.reserved_before - s.allocated_before)
            .unwrap_or(0)
    }
}

/// Replays a trace through the oracle with a cache policy; returns the
/// reserved and allocated series.
pub fn replay(
    oracle: &mut Oracle,
    trace: &fragsim::Trace,
    policy: fragsim::CachePolicy,
) -> Option<(Vec<Bytes>, Vec<Bytes>)> {
    use fragsim::TraceEvent;
    use std::collections::HashMap;
    let mut live = HashMap::new();
    let (mut res, mut al) = (Vec::new(), Vec::new());
    for (i, ev) in trace.events().iter().enumerate() {
        oracle.event = i;
        match ev {
            TraceEvent::Alloc { tensor_id, bytes } => {
                live.insert(tensor_id.clone(), oracle.alloc(*bytes)?);
            }
            TraceEvent::Free { tensor_id } => oracle.free(live.remove(tensor_id).unwrap()),
            TraceEvent::PhaseBegin { .. } => {}
            TraceEvent::PhaseEnd { phase_kind, .. } => {
                if policy.triggers(*phase_kind) {
                    oracle.empty_cache();
                }
            }
        }
        res.push(oracle.reserved());
        al.push(oracle.allocated());
    }
    Some((res, al))
}

/// Random alloc/free/empty_cache script: sizes log-uniform in [64 B, 8 MiB].
#[derive(Debug, Clone, Copy)]
pub enum Op {
    Alloc(Bytes),
    /// Frees the live block at this index modulo the live count.
    Free(usize),
    EmptyCache,
}

pub fn random_ops(seed: u64, n: usize) -> Vec<Op> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r: f64 = rng.gen();
            if r < 0.01 {
                Op::EmptyCache
            } else if r < 0.55 {
                let exp = rng.gen_range(6.0..=23.0f64);
                Op::Alloc(2f64.powf(exp).round() as Bytes)
            } else {
                Op::Free(rng.gen())
            }
        })
        .collect()
}
