//! Constant-then-linear learning-rate schedule: the base rate for the warm
//! phase, then a straight line to zero at the final step.

/// Learning rate at `step` for a schedule that holds `base` for `warm` steps
/// and decays linearly to zero at `max`.
pub fn lr_schedule(step: u64, warm: u64, max: u64, base: f64) -> f64 {
    debug_assert!(warm <= max);
    if step < warm {
        base
    } else if step >= max {
        0.0
    } else {
        base * (max - step) as f64 / (max - warm) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 2000, 4000, 1e-4), 1e-4);
        assert_eq!(lr_schedule(1999, 2000, 4000, 1e-4), 1e-4);
        assert_eq!(lr_schedule(4000, 2000, 4000, 1e-4), 0.0);
        let mid = lr_schedule(3000, 2000, 4000, 1e-4);
        assert!((mid - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=500 {
            let lr = lr_schedule(step, 100, 500, 3e-4);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn degenerate_warm_equals_max() {
        assert_eq!(lr_schedule(0, 10, 10, 1e-3), 1e-3);
        assert_eq!(lr_schedule(10, 10, 10, 1e-3), 0.0);
    }
}
