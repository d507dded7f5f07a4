//! Per-thread accounting of live tensor storage.
//!
//! Every tensor buffer reports its size on allocation and release to the
//! thread that performs the operation. The profiling harness uses the peak
//! as its memory figure; buffers freed on another thread show up as negative
//! drift on the freeing thread, which only matters for cross-thread handoff.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

pub(crate) fn track_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn track_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as i64));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> i64 {
    LIVE.with(Cell::get)
}

/// Highest live byte count since the last [`reset_peak`].
pub fn peak_bytes() -> i64 {
    PEAK.with(Cell::get)
}

/// Restarts peak tracking from the current live count.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|peak| peak.set(now));
}
