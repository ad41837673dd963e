//! Live matrix-element accounting.
//!
//! Memory is measured as the number of `f64` elements held by [`Tracked`]
//! matrices at the same time, per thread. This is the quantity the complexity
//! formulas predict and it is deterministic, unlike process RSS.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn add(count: usize) {
    LIVE.with(|live| {
        let now = live.get() + count;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn sub(count: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(count)));
}

/// A matrix whose element count is registered while it is alive.
#[derive(Debug)]
pub struct Tracked(DMatrix<f64>);

impl Tracked {
    pub fn new(m: DMatrix<f64>) -> Self {
        add(m.len());
        Tracked(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(DMatrix::zeros(rows, cols))
    }

    pub fn into_inner(mut self) -> DMatrix<f64> {
        sub(self.0.len());
        std::mem::replace(&mut self.0, DMatrix::zeros(0, 0))
    }
}

impl Drop for Tracked {
    fn drop(&mut self) {
        sub(self.0.len());
    }
}

impl Deref for Tracked {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl DerefMut for Tracked {
    fn deref_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }
}

/// Records the peak number of tracked elements allocated after `start`.
pub struct MemoryProbe {
    baseline: usize,
}

impl MemoryProbe {
    pub fn start() -> Self {
        let baseline = live_elements();
        PEAK.with(|p| p.set(baseline));
        MemoryProbe { baseline }
    }

    pub fn peak(&self) -> usize {
        PEAK.with(|p| p.get()).saturating_sub(self.baseline)
    }
}

pub fn live_elements() -> usize {
    LIVE.with(|l| l.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_simultaneous_allocations() {
        let probe = MemoryProbe::start();
        {
            let _a = Tracked::zeros(10, 10);
            let _b = Tracked::zeros(5, 2);
        }
        let _c = Tracked::zeros(3, 3);
        assert_eq!(probe.peak(), 110);
        drop(_c);
        assert_eq!(live_elements(), probe.baseline);
    }

    #[test]
    fn into_inner_releases_count() {
        let before = live_elements();
        let t = Tracked::zeros(4, 4);
        assert_eq!(live_elements(), before + 16);
        let m = t.into_inner();
        assert_eq!(m.len(), 16);
        assert_eq!(live_elements(), before);
    }
}
