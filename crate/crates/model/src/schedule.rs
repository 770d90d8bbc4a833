//! Layer-wise decayed learning rates with a linear warmup ramp.

use crate::trainer::TrainConfig;

/// Learning rate for parameter group `k` at optimization step `step`.
///
/// Group base rate is `base_lr * layer_decay^k` (head = group 0). During the
/// warmup window (`step < warmup_proportion * total_steps`) the rate ramps
/// linearly from zero; afterwards it stays at the group base.
pub fn lr_at(step: usize, total_steps: usize, k: usize, cfg: &TrainConfig) -> f64 {
    let warmup_steps = cfg.warmup_proportion * total_steps as f64;
    let mut lr = if (step as f64) < warmup_steps {
        cfg.base_lr * step as f64 / warmup_steps
    } else {
        cfg.base_lr
    };
    // repeated multiplication keeps lr(k+1) == lr(k) * layer_decay exact in
    // floating point, which the tests rely on
    for _ in 0..k {
        lr *= cfg.layer_decay;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn post_warmup_rates_per_group() {
        let c = cfg();
        assert_eq!(lr_at(100, 100, 0, &c), 5e-5);
        assert_eq!(lr_at(100, 100, 1, &c), 5e-5 * 0.12);
        assert!((lr_at(100, 100, 1, &c) - 6e-6).abs() < 1e-18);
        assert!((lr_at(100, 100, 2, &c) - 7.2e-7).abs() < 1e-18);
    }

    #[test]
    fn warmup_starts_at_zero_and_ramps_linearly() {
        let c = cfg();
        for k in 0..5 {
            assert_eq!(lr_at(0, 100, k, &c), 0.0);
        }
        // halfway through a 10-step warmup window
        assert!((lr_at(5, 100, 0, &c) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn nondecreasing_in_step_and_exact_group_ratio() {
        let c = cfg();
        let mut prev = -1.0;
        for step in 0..=200 {
            let lr = lr_at(step, 200, 0, &c);
            assert!(lr >= prev);
            prev = lr;
            for k in 0..4 {
                let a = lr_at(step, 200, k, &c);
                let b = lr_at(step, 200, k + 1, &c);
                assert_eq!(b, a * 0.12, "step {step} group {k}");
                if a > 0.0 {
                    assert!((b / a - 0.12).abs() < 1e-14);
                }
            }
        }
    }
}
