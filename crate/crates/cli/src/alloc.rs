//! Global allocator wrapper that records live bytes, the peak, and the
//! largest single request. Install it with
//! `#[global_allocator] static A: TrackingAlloc = TrackingAlloc;`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};

pub struct TrackingAlloc;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);

fn grew(size: usize) {
    let now = CURRENT.fetch_add(size, Relaxed) + size;
    PEAK.fetch_max(now, Relaxed);
    LARGEST.fetch_max(size, Relaxed);
}

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grew(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grew(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Relaxed);
            grew(new_size);
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryStats {
    /// Peak live bytes above the level at the start of the window.
    pub peak_growth: usize,
    pub largest_alloc: usize,
}

/// Runs `f` and reports its allocation footprint, or `None` for the stats
/// when [`TrackingAlloc`] is not the global allocator. Allocations made by
/// other threads during the window are counted too.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, Option<MemoryStats>) {
    let installed = is_installed();
    let base = CURRENT.load(Relaxed);
    PEAK.store(base, Relaxed);
    LARGEST.store(0, Relaxed);
    let out = f();
    let stats = installed.then(|| MemoryStats {
        peak_growth: PEAK.load(Relaxed).saturating_sub(base),
        largest_alloc: LARGEST.load(Relaxed),
    });
    (out, stats)
}

pub fn is_installed() -> bool {
    let before = CURRENT.load(Relaxed);
    let probe: Vec<u8> = Vec::with_capacity(4096);
    let seen = CURRENT.load(Relaxed) != before;
    drop(std::hint::black_box(probe));
    seen
}
