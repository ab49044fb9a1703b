use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Linear warmup for `warmup` steps (reaching `base` on the last warmup
/// step), then cosine decay to zero at step `total - 1`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1 + warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSchedule {
    Constant,
    /// τ rises from its base value to 1 along a half cosine.
    CosineToOne,
}

pub fn tau_at(schedule: TauSchedule, base: f64, step: usize, total: usize) -> f64 {
    match schedule {
        TauSchedule::Constant => base,
        TauSchedule::CosineToOne => {
            let t = step as f64 / total.max(1) as f64;
            1.0 - (1.0 - base) * ((PI * t).cos() + 1.0) / 2.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_constant_and_cosine_endpoints() {
        assert_eq!(tau_at(TauSchedule::Constant, 0.99, 5, 10), 0.99);
        assert!((tau_at(TauSchedule::CosineToOne, 0.99, 0, 10) - 0.99).abs() < 1e-15);
        assert!((tau_at(TauSchedule::CosineToOne, 0.99, 10, 10) - 1.0).abs() < 1e-15);
    }
}
