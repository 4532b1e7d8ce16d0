use std::f64::consts::PI;

/// Learning rate at `step` of `total_steps`: linear warmup from 0 to
/// `base_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64, warmup_steps: usize) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    min_lr + (base_lr - min_lr) * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries() {
        assert_eq!(cosine_lr(10, 110, 1.0, 0.1, 10), 1.0);
        assert!((cosine_lr(110, 110, 1.0, 0.1, 10) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(60, 110, 1.0, 0.1, 10) - 0.55).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 110, 1.0, 0.1, 10), 0.0);
        assert_eq!(cosine_lr(5, 110, 1.0, 0.1, 10), 0.5);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(cosine_lr(0, 10, 2.0, 0.0, 0), 2.0);
    }
}
