use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

/// How many recent batch sizes are kept for inspection.
const BATCH_LOG: usize = 4096;

/// Service counters, updated lock-free except for the recent-batch log.
#[derive(Debug, Default)]
pub struct Stats {
    requests: AtomicU64,
    succeeded: AtomicU64,
    failed: AtomicU64,
    rejected: AtomicU64,
    batches: AtomicU64,
    batched_requests: AtomicU64,
    max_batch_seen: AtomicUsize,
    in_flight_batch: AtomicUsize,
    recent: Mutex<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub rejected: u64,
    pub batches: u64,
    pub mean_batch_size: f64,
    pub max_batch_size: usize,
    pub in_flight_batch: usize,
}

impl Stats {
    pub(crate) fn accepted(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn rejected(&self) {
        self.rejected.fetch_add(1, Ordering::Relaxed);
    }

    /// Registers a new batch and returns its id (1-based).
    pub(crate) fn batch_started(&self, size: usize) -> u64 {
        self.in_flight_batch.store(size, Ordering::Relaxed);
        self.max_batch_seen.fetch_max(size, Ordering::Relaxed);
        self.batched_requests.fetch_add(size as u64, Ordering::Relaxed);
        let mut log = self.recent.lock().unwrap();
        if log.len() == BATCH_LOG {
            log.remove(0);
        }
        log.push(size);
        self.batches.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub(crate) fn batch_finished(&self, ok: bool, size: usize) {
        self.in_flight_batch.store(0, Ordering::Relaxed);
        let counter = if ok { &self.succeeded } else { &self.failed };
        counter.fetch_add(size as u64, Ordering::Relaxed);
    }

    /// Sizes of the most recent batches, oldest first.
    pub fn recent_batches(&self) -> Vec<usize> {
        self.recent.lock().unwrap().clone()
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let batches = self.batches.load(Ordering::Relaxed);
        let batched = self.batched_requests.load(Ordering::Relaxed);
        StatsSnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            succeeded: self.succeeded.load(Ordering::Relaxed),
            failed: self.failed.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            batches,
            mean_batch_size: if batches == 0 { 0.0 } else { batched as f64 / batches as f64 },
            max_batch_size: self.max_batch_seen.load(Ordering::Relaxed),
            in_flight_batch: self.in_flight_batch.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_counters_are_zero() {
        let s = Stats::default().snapshot();
        assert_eq!((s.requests, s.batches, s.max_batch_size), (0, 0, 0));
        assert_eq!(s.mean_batch_size, 0.0);
    }

    #[test]
    fn mean_is_requests_over_batches() {
        let s = Stats::default();
        for size in [3, 1, 2] {
            let id = s.batch_started(size);
            s.batch_finished(true, size);
            assert!(id >= 1);
        }
        let snap = s.snapshot();
        assert_eq!(snap.batches, 3);
        assert_eq!(snap.mean_batch_size, 2.0);
        assert_eq!(snap.max_batch_size, 3);
        assert_eq!(snap.succeeded, 6);
        assert_eq!(s.recent_batches(), vec![3, 1, 2]);
    }
}
