//! Two-phase masking-ratio schedule.
//!
//! For the first quarter of training the ratio is drawn uniformly from
//! [0.15, 0.20] so the model sees mostly-complete maps. From the phase
//! boundary onward the ratio rises deterministically from 0.15 to 0.75
//! along a cosine, hitting both endpoints exactly.

use crate::rng::Rng;

/// Phase-1 sampling interval.
pub const PHASE1_LO: f64 = 0.15;
pub const PHASE1_HI: f64 = 0.20;
/// Phase-2 cosine endpoints.
pub const RATIO_LO: f64 = 0.15;
pub const RATIO_HI: f64 = 0.75;

/// Masking ratio at training progress `t` of `total`.
///
/// `t` may be fractional (e.g. epoch + batch fraction). Phase 1 covers
/// `t < total / 4` and consumes one draw from `rng`; phase 2 is
/// deterministic and monotone nondecreasing.
pub fn mask_ratio(t: f64, total: f64, rng: &mut Rng) -> f64 {
    debug_assert!(total > 0.0 && (0.0..=total).contains(&t));
    let boundary = total / 4.0;
    if t < boundary {
        return rng.uniform(PHASE1_LO, PHASE1_HI);
    }
    let u = (t - boundary) / (total - boundary);
    if u <= 0.0 {
        RATIO_LO
    } else if u >= 1.0 {
        RATIO_HI
    } else {
        RATIO_LO + (RATIO_HI - RATIO_LO) * (1.0 - (std::f64::consts::PI * u).cos()) / 2.0
    }
}

/// Schedule over a fixed number of epochs.
#[derive(Clone, Copy, Debug)]
pub struct MaskSchedule {
    pub total: f64,
}

impl MaskSchedule {
    pub fn new(total_epochs: usize) -> Self {
        MaskSchedule {
            total: total_epochs.max(1) as f64,
        }
    }

    pub fn phase_boundary(&self) -> f64 {
        self.total / 4.0
    }

    pub fn ratio_at(&self, t: f64, rng: &mut Rng) -> f64 {
        mask_ratio(t, self.total, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_exact() {
        let mut rng = Rng::new(0);
        let total = 100.0;
        assert_eq!(mask_ratio(25.0, total, &mut rng), 0.15);
        assert_eq!(mask_ratio(100.0, total, &mut rng), 0.75);
    }

    #[test]
    fn midpoint_value() {
        // u = 0.5 -> 0.15 + 0.60 * (1 - cos(pi/2)) / 2 = 0.45
        let mut rng = Rng::new(0);
        let total = 4.0;
        let t = 1.0 + 3.0 * 0.5; // boundary 1, u = 0.5
        assert!((mask_ratio(t, total, &mut rng) - 0.45).abs() < 1e-12);
    }

    #[test]
    fn phase_two_monotone() {
        let mut rng = Rng::new(0);
        let total = 80.0;
        let mut prev = 0.0;
        for i in 0..=1000 {
            let t = 20.0 + 60.0 * i as f64 / 1000.0;
            let r = mask_ratio(t, total, &mut rng);
            assert!(r >= prev - 1e-15, "not monotone at {t}: {r} < {prev}");
            prev = r;
        }
    }

    #[test]
    fn phase_one_within_interval() {
        let mut rng = Rng::new(7);
        for i in 0..1000 {
            let t = 24.9 * i as f64 / 1000.0;
            let r = mask_ratio(t, 100.0, &mut rng);
            assert!((PHASE1_LO..PHASE1_HI).contains(&r), "{r}");
        }
    }
}
