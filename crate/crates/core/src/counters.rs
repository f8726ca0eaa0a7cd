//! Per-thread operation and allocation counters used by the complexity audit.
//!
//! Kernels tally multiplies locally and publish the total once per call on the
//! calling thread, so counts are exact and independent of the rayon schedule.
//! Matrix buffers report their element count at allocation time; the audit
//! compares the largest allocation against an `N×M` score buffer.

use std::cell::Cell;

thread_local! {
    static MULTIPLIES: Cell<u128> = const { Cell::new(0) };
    static ALLOCATIONS: Cell<u64> = const { Cell::new(0) };
    static MAX_ALLOC: Cell<usize> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub multiplies: u128,
    pub allocations: u64,
    /// Largest single buffer (in elements) allocated since the last reset.
    pub max_alloc_elements: usize,
}

pub fn reset() {
    MULTIPLIES.with(|c| c.set(0));
    ALLOCATIONS.with(|c| c.set(0));
    MAX_ALLOC.with(|c| c.set(0));
}

pub fn snapshot() -> OpCounts {
    OpCounts {
        multiplies: MULTIPLIES.with(Cell::get),
        allocations: ALLOCATIONS.with(Cell::get),
        max_alloc_elements: MAX_ALLOC.with(Cell::get),
    }
}

pub fn add_multiplies(n: u64) {
    // u128 storage: a saturating u64 would silently cap large benchmark runs
    MULTIPLIES.with(|c| c.set(c.get() + u128::from(n)));
}

pub(crate) fn record_alloc(elements: usize) {
    ALLOCATIONS.with(|c| c.set(c.get() + 1));
    MAX_ALLOC.with(|c| c.set(c.get().max(elements)));
}

/// Runs `f` with fresh counters and returns its result with the counts it produced.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    reset();
    let out = f();
    (out, snapshot())
}
