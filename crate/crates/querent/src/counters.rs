//! Process-wide instrumentation counters.
//!
//! Two things are tracked:
//!
//! * multiply-accumulate counts, split by pipeline phase, covering exactly
//!   the phases the closed-form cost model prices (metadata summarization,
//!   region scoring, attention score and aggregation products); projection
//!   and head arithmetic is excluded from both the counters and the model,
//!   symmetrically;
//! * workspace allocations in scalar elements, with two peaks: `live`
//!   covers every tracked buffer alive at once (bag-lifetime buffers such
//!   as the QKV projection included), `chunk` covers only buffers whose
//!   lifetime is a single chunk iteration, so it scales with the chunk
//!   size rather than with N.
//!
//! Counters are atomic sums of schedule-independent addends, so totals are
//! identical whatever the thread count.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacPhase {
    /// Element-wise min/max folding over patch features (one count per
    /// feature element folded).
    Summarize,
    /// Query-to-region-metadata dot products.
    SelectionScore,
    /// Query-key dot products.
    AttentionScore,
    /// Probability-weighted value aggregation.
    AttentionAggregate,
}

const PHASES: usize = 4;

static MACS: [AtomicU64; PHASES] = [
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
];

static LIVE_ELEMS: AtomicU64 = AtomicU64::new(0);
static PEAK_LIVE_ELEMS: AtomicU64 = AtomicU64::new(0);
static CHUNK_ELEMS: AtomicU64 = AtomicU64::new(0);
static PEAK_CHUNK_ELEMS: AtomicU64 = AtomicU64::new(0);

/// Zero every counter. Only meaningful while no tracked buffers are alive;
/// callers reset between measured runs, never mid-computation.
pub fn reset() {
    for m in &MACS {
        m.store(0, Ordering::Relaxed);
    }
    LIVE_ELEMS.store(0, Ordering::Relaxed);
    PEAK_LIVE_ELEMS.store(0, Ordering::Relaxed);
    CHUNK_ELEMS.store(0, Ordering::Relaxed);
    PEAK_CHUNK_ELEMS.store(0, Ordering::Relaxed);
}

pub fn add_macs(phase: MacPhase, n: u64) {
    MACS[phase as usize].fetch_add(n, Ordering::Relaxed);
}

pub fn macs(phase: MacPhase) -> u64 {
    MACS[phase as usize].load(Ordering::Relaxed)
}

pub fn total_macs() -> u64 {
    MACS.iter().map(|m| m.load(Ordering::Relaxed)).sum()
}

pub fn peak_live_elems() -> u64 {
    PEAK_LIVE_ELEMS.load(Ordering::Relaxed)
}

pub fn peak_chunk_elems() -> u64 {
    PEAK_CHUNK_ELEMS.load(Ordering::Relaxed)
}

fn raise_peak(peak: &AtomicU64, candidate: u64) {
    let mut seen = peak.load(Ordering::Relaxed);
    while candidate > seen {
        match peak.compare_exchange_weak(seen, candidate, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => break,
            Err(now) => seen = now,
        }
    }
}

/// RAII registration of a tracked workspace; decrements on drop.
pub struct AllocGuard {
    elems: u64,
    chunk_scoped: bool,
}

/// Register `elems` scalar elements of workspace. `chunk_scoped` marks
/// buffers that live for one chunk iteration only.
pub fn track_alloc(elems: usize, chunk_scoped: bool) -> AllocGuard {
    let elems = elems as u64;
    let live = LIVE_ELEMS.fetch_add(elems, Ordering::Relaxed) + elems;
    raise_peak(&PEAK_LIVE_ELEMS, live);
    if chunk_scoped {
        let c = CHUNK_ELEMS.fetch_add(elems, Ordering::Relaxed) + elems;
        raise_peak(&PEAK_CHUNK_ELEMS, c);
    }
    AllocGuard {
        elems,
        chunk_scoped,
    }
}

impl Drop for AllocGuard {
    fn drop(&mut self) {
        LIVE_ELEMS.fetch_sub(self.elems, Ordering::Relaxed);
        if self.chunk_scoped {
            CHUNK_ELEMS.fetch_sub(self.elems, Ordering::Relaxed);
        }
    }
}
