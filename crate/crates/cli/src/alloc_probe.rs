//! Global allocator wrapper that records the largest single allocation made
//! while armed. The latency benchmark uses it to show that answering a
//! request never allocates a buffer the size of the catalog.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

pub struct ProbeAlloc;

static ARMED: AtomicBool = AtomicBool::new(false);
static LARGEST: AtomicUsize = AtomicUsize::new(0);
static COUNT: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for ProbeAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[inline]
fn note(size: usize) {
    if ARMED.load(Ordering::Relaxed) {
        LARGEST.fetch_max(size, Ordering::Relaxed);
        COUNT.fetch_add(1, Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: ProbeAlloc = ProbeAlloc;

/// Clears the counters and starts recording.
pub fn arm() {
    LARGEST.store(0, Ordering::Relaxed);
    COUNT.store(0, Ordering::Relaxed);
    ARMED.store(true, Ordering::SeqCst);
}

/// Stops recording and returns (largest allocation in bytes, allocation count).
pub fn disarm() -> (usize, usize) {
    ARMED.store(false, Ordering::SeqCst);
    (LARGEST.load(Ordering::Relaxed), COUNT.load(Ordering::Relaxed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_the_largest_allocation() {
        arm();
        let v: Vec<u8> = Vec::with_capacity(1 << 20);
        let (largest, count) = disarm();
        drop(v);
        assert!(largest >= 1 << 20);
        assert!(count >= 1);
        let w: Vec<u8> = Vec::with_capacity(1 << 22);
        drop(w);
        assert!(disarm().0 < 1 << 22, "disarmed allocations are not recorded");
    }
}
