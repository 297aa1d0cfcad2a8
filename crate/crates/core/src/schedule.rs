//! Learning-rate schedule: linear warmup from zero, cosine decay to a
//! floor fraction of the peak at the final step.

/// Learning rate for 1-based `step` of `total_steps`. Warmup covers the
/// first `ceil(warmup_frac * total_steps)` steps, rising linearly to
/// `lr_max`; the remaining steps follow a half cosine from `lr_max` down to
/// `final_frac * lr_max` inclusive at the last step. Both branches equal
/// `lr_max` at the boundary.
pub fn lr_at(step: u64, total_steps: u64, lr_max: f64, warmup_frac: f64, final_frac: f64) -> f64 {
    assert!(step >= 1 && step <= total_steps, "step {step} outside 1..={total_steps}");
    let warmup = (warmup_frac * total_steps as f64).ceil() as u64;
    if step <= warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    let lr_final = final_frac * lr_max;
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    lr_final + (lr_max - lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
