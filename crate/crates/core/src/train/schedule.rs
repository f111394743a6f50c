//! Cosine annealing with warm restarts.
//!
//! Cycle `i` has length `T_i = T_0 * mult^i` and covers `T_i + 1` consecutive
//! counter values: the rate falls from the peak at the first value to the floor
//! at the last, and the next value starts the following cycle at the peak.

use crate::config::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub period: usize,
    pub mult: usize,
}

impl Schedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            max_lr: cfg.lr,
            min_lr: cfg.min_lr,
            period: cfg.restart_period,
            mult: cfg.restart_mult,
        }
    }

    /// Position of `t` as (offset within its cycle, cycle length).
    pub fn cycle(&self, t: usize) -> (usize, usize) {
        let (mut start, mut len) = (0usize, self.period.max(1));
        while t > start + len {
            start += len + 1;
            len = len.saturating_mul(self.mult.max(1));
        }
        (t - start, len)
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        let (tc, len) = self.cycle(t);
        let phase = std::f64::consts::PI * tc as f64 / len as f64;
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + phase.cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(mult: usize) -> Schedule {
        Schedule {
            max_lr: 6e-4,
            min_lr: 1e-5,
            period: 10,
            mult,
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = sched(2);
        assert_eq!(s.lr_at(0), 6e-4);
        assert!((s.lr_at(5) - 0.5 * (6e-4 + 1e-5)).abs() < 1e-18);
        assert!((s.lr_at(10) - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(11), 6e-4);
        assert_eq!(s.cycle(11), (0, 20));
        assert!((s.lr_at(31) - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(32), 6e-4);
    }

    #[test]
    fn decreasing_within_a_cycle() {
        let s = sched(2);
        for t in 11..31 {
            assert!(s.lr_at(t + 1) < s.lr_at(t));
        }
    }

    proptest! {
        #[test]
        fn bounded_and_periodic(t in 0usize..5000) {
            let s = sched(1);
            let lr = s.lr_at(t);
            prop_assert!((s.min_lr..=s.max_lr).contains(&lr));
            prop_assert_eq!(lr, s.lr_at(t + 11));
        }
    }
}
