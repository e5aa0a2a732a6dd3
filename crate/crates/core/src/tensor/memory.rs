//! Per-thread accounting of tensor storage.
//!
//! Every tensor buffer registers its byte size here on creation and
//! unregisters on drop. The high-water mark is what the benchmarks report
//! as peak memory; it is deterministic, unlike OS resident-set figures.
//! Counters are thread-local, so concurrently running workers do not see
//! each other's allocations.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LIMIT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Panic payload raised when an allocation would cross the configured budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExceeded {
    pub requested: usize,
    pub limit: usize,
}

pub(crate) fn register(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        if let Some(limit) = LIMIT.with(Cell::get) {
            if now > limit {
                std::panic::panic_any(BudgetExceeded {
                    requested: now,
                    limit,
                });
            }
        }
        live.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

pub(crate) fn unregister(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensors on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restarts peak tracking from the current live figure.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// Caps live tensor bytes on this thread; `None` removes the cap.
///
/// Crossing the cap panics with a [`BudgetExceeded`] payload, which the
/// benchmark harness catches to record an out-of-memory row.
pub fn set_limit(limit: Option<usize>) {
    LIMIT.with(|l| l.set(limit));
}
