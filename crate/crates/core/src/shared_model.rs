//! Shared parameter array with atomic additive updates.
//!
//! Each cell packs an `f64` and a 64-bit update count into one 128-bit word
//! and updates both with a single compare-and-exchange. The count returned
//! by an add is the add's position in that cell's modification order, and a
//! read reports how many adds it observed. Together these let a finished
//! run reconstruct exactly which updates every view contained, without any
//! shared write beyond the add itself.
//!
//! All atomics use sequentially consistent ordering.

use std::sync::atomic::{AtomicU64, Ordering};

use portable_atomic::AtomicU128;

const VALUE_MASK: u128 = u64::MAX as u128;

/// An `f64` with a lock-free `fetch_add`, implemented as a CAS loop over
/// the value's bit pattern.
#[derive(Debug)]
pub struct AtomicF64(AtomicU64);

impl AtomicF64 {
    pub fn new(value: f64) -> Self {
        AtomicF64(AtomicU64::new(value.to_bits()))
    }

    pub fn load(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::SeqCst))
    }

    /// Adds `delta`, returning the previous value.
    pub fn fetch_add(&self, delta: f64) -> f64 {
        let mut current = self.0.load(Ordering::SeqCst);
        loop {
            let next = (f64::from_bits(current) + delta).to_bits();
            match self
                .0
                .compare_exchange_weak(current, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(prev) => return f64::from_bits(prev),
                Err(actual) => current = actual,
            }
        }
    }
}

/// A real-valued cell that also counts the adds applied to it.
#[derive(Debug)]
pub struct VersionedCell(AtomicU128);

#[inline]
fn pack(value: f64, version: u64) -> u128 {
    ((version as u128) << 64) | value.to_bits() as u128
}

#[inline]
fn unpack(word: u128) -> (f64, u64) {
    (f64::from_bits((word & VALUE_MASK) as u64), (word >> 64) as u64)
}

impl VersionedCell {
    pub fn new(value: f64) -> Self {
        VersionedCell(AtomicU128::new(pack(value, 0)))
    }

    /// Current value and number of adds applied so far.
    pub fn load(&self) -> (f64, u64) {
        unpack(self.0.load(Ordering::SeqCst))
    }

    /// Adds `delta`; returns the previous value and the add's position in
    /// this cell's modification order.
    pub fn fetch_add(&self, delta: f64) -> (f64, u64) {
        let mut current = self.0.load(Ordering::SeqCst);
        loop {
            let (value, version) = unpack(current);
            let next = pack(value + delta, version + 1);
            match self
                .0
                .compare_exchange_weak(current, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return (value, version),
                Err(actual) => current = actual,
            }
        }
    }
}

/// The shared state of one epoch: parameter array `X[d]`, iteration
/// counter `C`, and the epoch tag carried by every update applied to it.
#[derive(Debug)]
pub struct SharedModel {
    cells: Vec<VersionedCell>,
    counter: AtomicU64,
    epoch: u64,
}

impl SharedModel {
    pub fn new(initial: &[f64]) -> Self {
        Self::with_epoch(initial, 0)
    }

    pub fn with_epoch(initial: &[f64], epoch: u64) -> Self {
        SharedModel {
            cells: initial.iter().map(|&v| VersionedCell::new(v)).collect(),
            counter: AtomicU64::new(0),
            epoch,
        }
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// `X[j] += delta`; returns the value before the update.
    ///
    /// Panics if `j` is out of range.
    pub fn atomic_add(&self, j: usize, delta: f64) -> f64 {
        self.cells[j].fetch_add(delta).0
    }

    /// Like [`atomic_add`](Self::atomic_add) but also returns the update's
    /// position in cell `j`'s modification order.
    pub fn atomic_add_versioned(&self, j: usize, delta: f64) -> (f64, u64) {
        self.cells[j].fetch_add(delta)
    }

    /// Entry-wise reads in index order. The result may mix updates that
    /// were applied at different times.
    pub fn read_view(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.load().0).collect()
    }

    /// Reads the view into `values` and the per-entry add counts observed
    /// into `versions`.
    pub fn read_view_into(&self, values: &mut [f64], versions: &mut [u64]) {
        for ((cell, v), ver) in self.cells.iter().zip(values).zip(versions) {
            let (value, version) = cell.load();
            *v = value;
            *ver = version;
        }
    }

    /// Claims the next iteration; returns the old counter value.
    pub fn next_iteration(&self) -> u64 {
        self.counter.fetch_add(1, Ordering::SeqCst)
    }

    pub fn counter(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    /// Number of adds applied to each cell.
    pub fn versions(&self) -> Vec<u64> {
        self.cells.iter().map(|c| c.load().1).collect()
    }
}

/// One SGD iteration as observed in a run.
///
/// `index` is the iteration's rank among first updates on `X[0]`, which
/// totally orders iterations. Event ranks come from a global event clock
/// (simulator step counter, or an instrumentation clock on real threads).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub index: u64,
    pub thread: usize,
    pub start_event: u64,
    /// Event rank of the first update on `X[0]`.
    pub first_add_event: u64,
    pub end_event: u64,
    pub view: Vec<f64>,
    /// Adds observed per entry when the view was read.
    pub view_versions: Vec<u64>,
    pub gradient: Vec<f64>,
    /// Position of this iteration's add in each cell's modification order;
    /// `None` where a zero gradient entry was skipped.
    pub add_positions: Vec<Option<u64>>,
    pub epoch: u64,
}

impl IterationRecord {
    pub fn touches(&self, j: usize) -> bool {
        self.add_positions[j].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn atomic_add_returns_previous() {
        let model = SharedModel::new(&[0.0]);
        assert_eq!(model.atomic_add(0, -0.5), 0.0);
        assert_eq!(model.read_view(), vec![-0.5]);
        assert_eq!(model.versions(), vec![1]);
    }

    #[test]
    fn quiescent_view() {
        let model = SharedModel::new(&[1.0, 2.0]);
        assert_eq!(model.read_view(), vec![1.0, 2.0]);
        let mut v = [0.0; 2];
        let mut ver = [9; 2];
        model.read_view_into(&mut v, &mut ver);
        assert_eq!((v, ver), ([1.0, 2.0], [0, 0]));
    }

    #[test]
    fn counter_sequence() {
        let model = SharedModel::new(&[0.0]);
        let t = 4;
        let returns: Vec<u64> = (0..5).map(|_| model.next_iteration()).collect();
        assert_eq!(returns, vec![0, 1, 2, 3, 4]);
        let stopped: Vec<bool> = returns.iter().map(|&c| c >= t).collect();
        assert_eq!(stopped, vec![false, false, false, false, true]);
    }

    #[test]
    fn versioned_positions_are_a_permutation() {
        let model = Arc::new(SharedModel::new(&[0.0]));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let model = Arc::clone(&model);
                thread::spawn(move || {
                    (0..1000)
                        .map(|_| model.atomic_add_versioned(0, 1.0).1)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..4000).collect::<Vec<_>>());
        assert_eq!(model.read_view(), vec![4000.0]);
    }

    #[test]
    fn plain_atomic_f64() {
        let a = AtomicF64::new(1.5);
        assert_eq!(a.fetch_add(2.0), 1.5);
        assert_eq!(a.load(), 3.5);
    }

    #[test]
    fn cells_are_lock_free() {
        assert!(AtomicU128::is_lock_free());
    }
}
