use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing from `base_lr` at `t = 0` to `min_lr` at `t = period`.
pub fn annealed_lr(base_lr: f64, min_lr: f64, t: f64, period: f64) -> f64 {
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * t / period).cos())
}

/// Warm restarts with cycles of 1, 2, 4, 8, ... epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub steps_per_epoch: usize,
}

impl SgdrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, steps_per_epoch: usize) -> Result<Self> {
        if !(base_lr > min_lr && min_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need base_lr > min_lr >= 0, got {base_lr} and {min_lr}"
            )));
        }
        if steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        Ok(SgdrSchedule {
            base_lr,
            min_lr,
            steps_per_epoch,
        })
    }

    /// Length of cycle `c` in epochs.
    pub fn cycle_epochs(c: u32) -> usize {
        1usize << c
    }

    /// Epoch at which cycle `c` ends (1, 3, 7, 15, ...).
    pub fn cycle_end_epoch(c: u32) -> usize {
        (1usize << (c + 1)) - 1
    }

    /// Cycle index, offset within the cycle and cycle length, all in steps.
    pub fn position(&self, global_step: usize) -> (u32, usize, usize) {
        let mut start = 0;
        let mut c = 0;
        loop {
            let len = Self::cycle_epochs(c) * self.steps_per_epoch;
            if global_step < start + len {
                return (c, global_step - start, len);
            }
            start += len;
            c += 1;
        }
    }

    pub fn lr_at(&self, global_step: usize) -> f64 {
        let (_, t, len) = self.position(global_step);
        annealed_lr(self.base_lr, self.min_lr, t as f64, len as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_boundaries_follow_doubling() {
        let ends: Vec<usize> = (0..4).map(SgdrSchedule::cycle_end_epoch).collect();
        assert_eq!(ends, vec![1, 3, 7, 15]);
        let s = SgdrSchedule::new(0.05, 0.0, 10).unwrap();
        for (c, &end) in ends.iter().enumerate() {
            let start = end * 10;
            assert_eq!(s.position(start).0, c as u32 + 1);
            assert_eq!(s.position(start).1, 0);
            assert_eq!(s.position(start - 1).0, c as u32);
        }
    }

    #[test]
    fn starts_ends_and_midpoints() {
        let (base, min) = (0.05, 0.001);
        let s = SgdrSchedule::new(base, min, 10).unwrap();
        let mut start = 0;
        for c in 0..4 {
            let len = SgdrSchedule::cycle_epochs(c) * 10;
            assert_eq!(s.lr_at(start), base);
            assert!((s.lr_at(start + len / 2) - (base + min) / 2.0).abs() < 1e-15);
            assert_eq!(
                s.lr_at(start + len - 1),
                annealed_lr(base, min, (len - 1) as f64, len as f64)
            );
            assert!((annealed_lr(base, min, len as f64, len as f64) - min).abs() < 1e-15);
            start += len;
        }
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(SgdrSchedule::new(0.01, 0.01, 1).is_err());
        assert!(SgdrSchedule::new(0.1, -0.1, 1).is_err());
        assert!(SgdrSchedule::new(0.1, 0.0, 0).is_err());
    }
}
