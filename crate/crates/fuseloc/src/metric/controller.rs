//! Dynamic batch sizing driven by the active-triplet count.
//!
//! When fewer than 70% of a batch's elements yield an active triplet, the
//! batch has become too easy and grows by 40% (rounded to nearest), up to a
//! hard cap. The size never shrinks.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchController {
    pub current_size: usize,
    pub growth: f64,
    pub active_threshold: f64,
    pub max_size: usize,
}

impl Default for BatchController {
    fn default() -> Self {
        Self { current_size: 8, growth: 1.4, active_threshold: 0.7, max_size: 160 }
    }
}

impl BatchController {
    pub fn validate(&self) -> Result<()> {
        if self.current_size == 0 || self.current_size > self.max_size {
            return Err(Error::validation(format!(
                "batch size {} outside 1..={}",
                self.current_size, self.max_size
            )));
        }
        if !(self.growth >= 1.0) {
            return Err(Error::validation(format!(
                "batch growth must be >= 1, got {}",
                self.growth
            )));
        }
        if !(self.active_threshold > 0.0 && self.active_threshold <= 1.0) {
            return Err(Error::validation(format!(
                "active threshold must lie in (0, 1], got {}",
                self.active_threshold
            )));
        }
        Ok(())
    }

    /// Apply one update from the number of active triplets in the batch just
    /// processed. Grows only when `active < threshold * size`; never
    /// shrinks; saturates at `max_size`.
    pub fn update(&mut self, active: usize) {
        if (active as f64) < self.active_threshold * self.current_size as f64 {
            let grown = (self.current_size as f64 * self.growth).round() as usize;
            self.current_size = grown.min(self.max_size);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn always_triggering_updates_walk_the_expected_trajectory() {
        let mut ctrl = BatchController::default();
        let expected = [8, 11, 15, 21, 29, 41, 57, 80, 112, 157, 160, 160, 160];
        let mut seen = vec![ctrl.current_size];
        for _ in 1..expected.len() {
            ctrl.update(0);
            seen.push(ctrl.current_size);
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn threshold_is_a_strict_inequality() {
        let mut ctrl = BatchController::default();
        ctrl.update(6); // 6 >= 0.7 * 8 = 5.6: batch stays.
        assert_eq!(ctrl.current_size, 8);
        ctrl.update(5); // 5 < 5.6: grow.
        assert_eq!(ctrl.current_size, 11);
    }

    #[test]
    fn growth_saturates_at_the_cap() {
        let mut ctrl = BatchController { current_size: 158, ..Default::default() };
        ctrl.update(0);
        assert_eq!(ctrl.current_size, 160);
        ctrl.update(0);
        assert_eq!(ctrl.current_size, 160);
    }

    #[test]
    fn size_never_decreases() {
        let mut ctrl = BatchController::default();
        let mut last = ctrl.current_size;
        for step in 0..50 {
            ctrl.update(if step % 3 == 0 { 0 } else { ctrl.current_size });
            assert!(ctrl.current_size >= last);
            last = ctrl.current_size;
        }
    }

    #[test]
    fn validation_rejects_degenerate_settings() {
        assert!(BatchController { current_size: 0, ..Default::default() }.validate().is_err());
        assert!(BatchController { growth: 0.9, ..Default::default() }.validate().is_err());
        assert!(
            BatchController { active_threshold: 0.0, ..Default::default() }.validate().is_err()
        );
        assert!(BatchController { current_size: 200, ..Default::default() }.validate().is_err());
        assert!(BatchController::default().validate().is_ok());
    }
}
