//! Simulated device memory with finite capacity.
//!
//! Every successful [`Device::reserve_segment`] is the analog of a driver
//! allocation call and appends a [`Reservation`] record that captures the
//! allocator's reserved and allocated bytes as they stood immediately
//! before the reservation. The profiler derives its fragmentation samples
//! from this log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Bytes;

/// Identifier of a device-level reservation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentId(pub u64);

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seg#{}", self.0)
    }
}

/// One entry of the reservation log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub event_index: usize,
    pub segment: SegmentId,
    pub requested: Bytes,
    pub reserved_before: Bytes,
    pub allocated_before: Bytes,
}

impl Reservation {
    /// Reserved minus allocated at the moment the allocator had to go to the device.
    pub fn fragmentation(&self) -> Bytes {
        self.reserved_before.saturating_sub(self.allocated_before)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device capacity exceeded: requested {requested} B with {reserved} B of {capacity} B reserved")]
    CapacityExceeded {
        requested: Bytes,
        reserved: Bytes,
        capacity: Bytes,
    },
    #[error("segment size {size} B is not a multiple of the {granularity} B granularity")]
    Misaligned { size: Bytes, granularity: Bytes },
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
}

#[derive(Debug, Clone)]
pub struct Device {
    capacity: Bytes,
    granularity: Bytes,
    reserved_total: Bytes,
    segments: BTreeMap<SegmentId, Bytes>,
    next_segment: u64,
    reservation_log: Vec<Reservation>,
    released_total: Bytes,
}

impl Device {
    pub fn new(capacity: Bytes, granularity: Bytes) -> Self {
        Self {
            capacity,
            granularity: granularity.max(1),
            reserved_total: 0,
            segments: BTreeMap::new(),
            next_segment: 0,
            reservation_log: Vec::new(),
            released_total: 0,
        }
    }

    pub fn capacity(&self) -> Bytes {
        self.capacity
    }

    pub fn reserved_total(&self) -> Bytes {
        self.reserved_total
    }

    /// Total bytes ever handed back through [`Device::release_segment`].
    pub fn released_total(&self) -> Bytes {
        self.released_total
    }

    pub fn reservation_log(&self) -> &[Reservation] {
        &self.reservation_log
    }

    pub fn segment_size(&self, id: SegmentId) -> Option<Bytes> {
        self.segments.get(&id).copied()
    }

    /// Would a reservation of `size` bytes fit right now?
    pub fn fits(&self, size: Bytes) -> bool {
        self.reserved_total
            .checked_add(size)
            .is_some_and(|total| total <= self.capacity)
    }

    /// Reserves `size` bytes. `allocated_before` is the caller's live byte
    /// count; it is stored alongside the reserved total in the log entry.
    pub fn reserve_segment(
        &mut self,
        size: Bytes,
        event_index: usize,
        allocated_before: Bytes,
    ) -> Result<SegmentId, DeviceError> {
        if size == 0 || !size.is_multiple_of(self.granularity) {
            return Err(DeviceError::Misaligned {
                size,
                granularity: self.granularity,
            });
        }
        if !self.fits(size) {
            return Err(DeviceError::CapacityExceeded {
                requested: size,
                reserved: self.reserved_total,
                capacity: self.capacity,
            });
        }
        let id = SegmentId(self.next_segment);
        self.next_segment += 1;
        self.reservation_log.push(Reservation {
            event_index,
            segment: id,
            requested: size,
            reserved_before: self.reserved_total,
            allocated_before,
        });
        self.reserved_total += size;
        self.segments.insert(id, size);
        Ok(id)
    }

    /// Hands a segment back. Occupancy is the allocator's concern; see
    /// `Allocator::release_segment` for the checked entry point.
    pub fn release_segment(&mut self, id: SegmentId) -> Result<Bytes, DeviceError> {
        let size = self
            .segments
            .remove(&id)
            .ok_or(DeviceError::UnknownSegment(id))?;
        self.reserved_total -= size;
        self.released_total += size;
        Ok(size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: Bytes = 1 << 20;
    const GIB: Bytes = 1 << 30;

    #[test]
    fn reserve_logs_pre_reservation_state() {
        let mut dev = Device::new(24 * GIB, 2 * MIB);
        let id = dev.reserve_segment(2 * MIB, 0, 0).unwrap();
        assert_eq!(dev.reserved_total(), 2 * MIB);
        let log = dev.reservation_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].segment, id);
        assert_eq!(log[0].reserved_before, 0);
        assert_eq!(log[0].allocated_before, 0);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut dev = Device::new(4 * MIB, 2 * MIB);
        dev.reserve_segment(4 * MIB, 0, 0).unwrap();
        let err = dev.reserve_segment(2 * MIB, 1, 0).unwrap_err();
        assert!(matches!(err, DeviceError::CapacityExceeded { .. }));
        assert_eq!(dev.reservation_log().len(), 1);
    }

    #[test]
    fn misaligned_sizes_are_rejected() {
        let mut dev = Device::new(GIB, 2 * MIB);
        assert!(matches!(
            dev.reserve_segment(3 * MIB, 0, 0),
            Err(DeviceError::Misaligned { .. })
        ));
    }

    #[test]
    fn release_twice_is_unknown_segment() {
        let mut dev = Device::new(GIB, 2 * MIB);
        let id = dev.reserve_segment(2 * MIB, 0, 0).unwrap();
        assert_eq!(dev.release_segment(id), Ok(2 * MIB));
        assert_eq!(dev.reserved_total(), 0);
        assert_eq!(dev.release_segment(id), Err(DeviceError::UnknownSegment(id)));
    }

    #[test]
    fn log_minus_releases_matches_reserved() {
        let mut dev = Device::new(GIB, 2 * MIB);
        let a = dev.reserve_segment(2 * MIB, 0, 0).unwrap();
        dev.reserve_segment(6 * MIB, 1, 0).unwrap();
        dev.release_segment(a).unwrap();
        dev.reserve_segment(4 * MIB, 2, 0).unwrap();
        let logged: Bytes = dev.reservation_log().iter().map(|r| r.requested).sum();
        assert_eq!(logged - dev.released_total(), dev.reserved_total());
        assert!(dev
            .reservation_log()
            .windows(2)
            .all(|w| w[0].event_index <= w[1].event_index));
    }
}
