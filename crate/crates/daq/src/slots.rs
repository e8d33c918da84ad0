//! Pre-allocated packet slots.
//!
//! A [`SlotRing`] owns one contiguous memory area cut into fixed-size slots,
//! like an AF_XDP UMEM. Slots are named by [`SlotHandle`] tokens that cannot
//! be cloned; whoever holds the token owns the slot, and passing the token
//! through a queue transfers ownership. A per-ring ledger counts how many
//! slots sit in the free pool, the intake path and the workers.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam::queue::ArrayQueue;
use serde::Serialize;
use thiserror::Error;

use drop_core::protocol::MAX_SLOT_SIZE;

/// Default number of slots per receive queue.
pub const DEFAULT_SLOT_COUNT: usize = 4096;

/// Geometry of one slot ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingConfig {
    /// Number of slots, a power of two.
    pub slot_count: usize,
    /// Bytes per slot, at most 2048.
    pub slot_size: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self { slot_count: DEFAULT_SLOT_COUNT, slot_size: MAX_SLOT_SIZE }
    }
}

/// Rejected ring geometry.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RingError {
    /// Slot count zero or not a power of two.
    #[error("slot_count {0} is not a power of two")]
    SlotCount(usize),
    /// Slot size zero or above 2048.
    #[error("slot_size {0} outside 1..=2048")]
    SlotSize(usize),
}

impl RingConfig {
    /// Checks the geometry.
    pub fn validate(&self) -> Result<(), RingError> {
        if self.slot_count == 0 || !self.slot_count.is_power_of_two() || self.slot_count > u32::MAX as usize {
            return Err(RingError::SlotCount(self.slot_count));
        }
        if self.slot_size == 0 || self.slot_size > MAX_SLOT_SIZE {
            return Err(RingError::SlotSize(self.slot_size));
        }
        Ok(())
    }
}

static NEXT_RING_ID: AtomicU32 = AtomicU32::new(1);

/// Exclusive ownership of one slot.
#[derive(Debug)]
pub struct SlotHandle {
    ring: u32,
    index: u32,
}

impl SlotHandle {
    /// Slot number within its ring.
    pub fn index(&self) -> u32 {
        self.index
    }
}

struct Umem {
    id: u32,
    cells: Box<[UnsafeCell<u8>]>,
    slot_size: usize,
}

// Slot bytes are only reached through `SlotRing::slot{,_mut}`, which require
// the slot's unique handle, so no two threads ever alias the same slot.
unsafe impl Sync for Umem {}
unsafe impl Send for Umem {}

#[derive(Debug, Default)]
struct Ledger {
    free: AtomicUsize,
    intake: AtomicUsize,
    worker: AtomicUsize,
}

/// Where slots currently are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlotCensus {
    /// Ring size.
    pub slot_count: usize,
    /// In the free pool.
    pub free: usize,
    /// Held by the intake path (wire, receive queue, management thread).
    pub intake: usize,
    /// Handed to a worker.
    pub worker: usize,
    /// Handles actually sitting in the free queue.
    pub free_queued: usize,
}

impl SlotCensus {
    /// All slots accounted for.
    pub fn conserved(&self) -> bool {
        self.free + self.intake + self.worker == self.slot_count
    }

    /// Quiescent and every slot back in the free pool.
    pub fn all_free(&self) -> bool {
        self.conserved() && self.free == self.slot_count && self.free_queued == self.slot_count
    }
}

/// A pool of pre-allocated fixed-size slots. Clones share the pool.
#[derive(Clone)]
pub struct SlotRing {
    umem: Arc<Umem>,
    free: Arc<ArrayQueue<SlotHandle>>,
    ledger: Arc<Ledger>,
    cfg: RingConfig,
}

impl std::fmt::Debug for SlotRing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlotRing").field("id", &self.umem.id).field("cfg", &self.cfg).finish()
    }
}

impl SlotRing {
    /// Allocates and zeroes every slot up front; all slots start free.
    pub fn new(cfg: RingConfig) -> Result<Self, RingError> {
        cfg.validate()?;
        let id = NEXT_RING_ID.fetch_add(1, Ordering::Relaxed);
        let cells: Box<[UnsafeCell<u8>]> = (0..cfg.slot_count * cfg.slot_size).map(|_| UnsafeCell::new(0)).collect();
        let free = ArrayQueue::new(cfg.slot_count);
        for index in 0..cfg.slot_count as u32 {
            free.push(SlotHandle { ring: id, index }).expect("free queue sized to slot_count");
        }
        let ledger = Ledger { free: AtomicUsize::new(cfg.slot_count), ..Default::default() };
        Ok(Self {
            umem: Arc::new(Umem { id, cells, slot_size: cfg.slot_size }),
            free: Arc::new(free),
            ledger: Arc::new(ledger),
            cfg,
        })
    }

    /// Geometry.
    pub fn config(&self) -> RingConfig {
        self.cfg
    }

    /// Slot size in bytes.
    pub fn slot_size(&self) -> usize {
        self.cfg.slot_size
    }

    /// True if `h` belongs to this ring.
    pub fn owns(&self, h: &SlotHandle) -> bool {
        h.ring == self.umem.id
    }

    fn base(&self, h: &SlotHandle) -> *mut u8 {
        assert!(self.owns(h), "slot handle from ring {} used on ring {}", h.ring, self.umem.id);
        let start = h.index as usize * self.umem.slot_size;
        UnsafeCell::raw_get(self.umem.cells[start..].as_ptr())
    }

    /// Read access to the slot named by `h`.
    pub fn slot<'a>(&'a self, h: &'a SlotHandle) -> &'a [u8] {
        let p = self.base(h);
        // SAFETY: `h` is the only handle for this slot and is borrowed for 'a,
        // so no `&mut` to the same bytes can exist during 'a.
        unsafe { std::slice::from_raw_parts(p, self.umem.slot_size) }
    }

    /// Write access to the slot named by `h`.
    pub fn slot_mut<'a>(&'a self, h: &'a mut SlotHandle) -> &'a mut [u8] {
        let p = self.base(h);
        // SAFETY: `h` is unique and mutably borrowed for 'a.
        unsafe { std::slice::from_raw_parts_mut(p, self.umem.slot_size) }
    }

    /// Takes a slot from the free pool into the intake path.
    pub fn take_free(&self) -> Option<SlotHandle> {
        let h = self.free.pop()?;
        self.ledger.free.fetch_sub(1, Ordering::Relaxed);
        self.ledger.intake.fetch_add(1, Ordering::Relaxed);
        Some(h)
    }

    /// Takes a free slot, waiting while the pool is empty. Returns `None`
    /// if `give_up` turns true while waiting.
    pub fn take_free_blocking(&self, mut give_up: impl FnMut() -> bool) -> Option<SlotHandle> {
        let mut idle = Idle::default();
        loop {
            if let Some(h) = self.take_free() {
                return Some(h);
            }
            if give_up() {
                return None;
            }
            idle.wait();
        }
    }

    /// Returns an intake-held slot to the free pool.
    pub fn release(&self, h: SlotHandle) {
        self.ledger.intake.fetch_sub(1, Ordering::Relaxed);
        self.push_free(h);
    }

    /// Records that an intake-held slot was handed to a worker.
    pub fn mark_to_worker(&self) {
        self.ledger.intake.fetch_sub(1, Ordering::Relaxed);
        self.ledger.worker.fetch_add(1, Ordering::Relaxed);
    }

    /// Returns a worker-held slot to the free pool.
    pub fn release_from_worker(&self, h: SlotHandle) {
        self.ledger.worker.fetch_sub(1, Ordering::Relaxed);
        self.push_free(h);
    }

    fn push_free(&self, h: SlotHandle) {
        assert!(self.owns(&h), "foreign slot handle returned to ring {}", self.umem.id);
        self.ledger.free.fetch_add(1, Ordering::Relaxed);
        if self.free.push(h).is_err() {
            unreachable!("free queue holds every slot of the ring");
        }
    }

    /// Current slot distribution.
    pub fn census(&self) -> SlotCensus {
        SlotCensus {
            slot_count: self.cfg.slot_count,
            free: self.ledger.free.load(Ordering::Relaxed),
            intake: self.ledger.intake.load(Ordering::Relaxed),
            worker: self.ledger.worker.load(Ordering::Relaxed),
            free_queued: self.free.len(),
        }
    }
}

/// Spin, then yield, then sleep. Keeps idle threads cheap on small hosts.
#[derive(Debug, Default)]
pub struct Idle {
    rounds: u32,
}

impl Idle {
    /// One idle step.
    pub fn wait(&mut self) {
        self.rounds = self.rounds.saturating_add(1);
        if self.rounds <= 8 {
            std::hint::spin_loop();
        } else if self.rounds <= 40 {
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(50));
        }
    }

    /// Work was found.
    pub fn reset(&mut self) {
        self.rounds = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SlotRing {
        SlotRing::new(RingConfig { slot_count: 8, slot_size: 64 }).unwrap()
    }

    #[test]
    fn geometry_checks() {
        assert_eq!(RingConfig { slot_count: 6, slot_size: 64 }.validate(), Err(RingError::SlotCount(6)));
        assert_eq!(RingConfig { slot_count: 8, slot_size: 2049 }.validate(), Err(RingError::SlotSize(2049)));
        assert!(RingConfig::default().validate().is_ok());
    }

    #[test]
    fn slots_are_disjoint() {
        let ring = small();
        let mut a = ring.take_free().unwrap();
        let mut b = ring.take_free().unwrap();
        ring.slot_mut(&mut a).fill(1);
        ring.slot_mut(&mut b).fill(2);
        assert!(ring.slot(&a).iter().all(|&x| x == 1));
        assert!(ring.slot(&b).iter().all(|&x| x == 2));
        assert_eq!(ring.slot(&a).len(), 64);
        ring.release(a);
        ring.release(b);
    }

    #[test]
    fn census_tracks_ownership() {
        let ring = small();
        let mut held: Vec<_> = (0..5).map(|_| ring.take_free().unwrap()).collect();
        ring.mark_to_worker();
        ring.mark_to_worker();
        let c = ring.census();
        assert_eq!((c.free, c.intake, c.worker), (3, 3, 2));
        assert!(c.conserved());
        assert!(!c.all_free());
        ring.release_from_worker(held.pop().unwrap());
        ring.release_from_worker(held.pop().unwrap());
        for h in held {
            ring.release(h);
        }
        assert!(ring.census().all_free());
    }

    #[test]
    fn exhaustion() {
        let ring = small();
        let held: Vec<_> = (0..8).map(|_| ring.take_free().unwrap()).collect();
        assert!(ring.take_free().is_none());
        assert!(ring.take_free_blocking(|| true).is_none());
        for h in held {
            ring.release(h);
        }
    }

    #[test]
    #[should_panic(expected = "slot handle from ring")]
    fn foreign_handle_rejected() {
        let a = small();
        let b = small();
        let h = a.take_free().unwrap();
        let _ = b.slot(&h);
    }
}
