//! Iteration-indexed curricula: stride decay, pose-width growth, loss-weight
//! annealing, learning-rate decay, and discriminator re-initialization triggers.

use serde::{Deserialize, Serialize};

/// Weights of the four auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Geometry pseudo-label weight.
    pub geo: f64,
    /// Patch-critic (adversarial) weight.
    pub adv: f64,
    /// Global feature-distance weight.
    pub cls: f64,
    /// Inverse depth smoothness weight inside the geometry term.
    pub smooth: f64,
}

/// Which endpoint assignment the semantic weights use.
///
/// The default ramps the global feature weight down (0.1 -> 0) while the
/// adversarial weight grows (0 -> 0.1), so early large-stride patches are
/// steered by global structure and late small-stride patches by local texture.
/// `Printed` swaps the two ramps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaAssignment {
    #[default]
    Prose,
    Printed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    pub stride_init: u32,
    pub stride_step: u32,
    /// Iterations between stride reductions.
    pub stride_interval: u64,
    pub stride_min: u32,

    /// Gaussian pose-sampling width endpoints (radians) and ramp length.
    pub omega_init: f64,
    pub omega_max: f64,
    pub omega_ramp: u64,

    pub lambda_geo: f64,
    pub lambda_smooth: f64,
    /// Shared budget split between the adversarial and feature-distance terms.
    pub lambda_semantic: f64,
    pub lambda_assignment: LambdaAssignment,

    pub lr_init: f64,
    /// Iterations between learning-rate halvings.
    pub lr_half_interval: u64,
    /// Discriminator learning rate as a fraction of the field's.
    pub d_lr_ratio: f64,

    pub total_iterations: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            stride_init: 6,
            stride_step: 2,
            stride_interval: 10_000,
            stride_min: 1,
            omega_init: 3f64.to_radians(),
            omega_max: 15f64.to_radians(),
            omega_ramp: 20_000,
            lambda_geo: 8.0,
            lambda_smooth: 0.1,
            lambda_semantic: 0.1,
            lambda_assignment: LambdaAssignment::Prose,
            lr_init: 1e-3,
            lr_half_interval: 10_000,
            d_lr_ratio: 0.2,
            total_iterations: 40_000,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> crate::Result<()> {
        if self.stride_min < 1 || self.stride_init < self.stride_min {
            return Err(crate::Error::Config(format!(
                "require stride_init >= stride_min >= 1, got {} and {}",
                self.stride_init, self.stride_min
            )));
        }
        if self.stride_interval == 0 || self.lr_half_interval == 0 {
            return Err(crate::Error::Config("intervals must be positive".into()));
        }
        if !(self.d_lr_ratio > 0.0 && self.d_lr_ratio <= 1.0) {
            return Err(crate::Error::Config(format!(
                "d_lr_ratio must lie in (0, 1], got {}",
                self.d_lr_ratio
            )));
        }
        let weights_ok = self.lambda_geo >= 0.0
            && self.lambda_smooth >= 0.0
            && self.lambda_semantic >= 0.0
            && self.omega_init >= 0.0
            && self.omega_max >= self.omega_init;
        if !weights_ok {
            return Err(crate::Error::Config(
                "loss weights and omega endpoints must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Patch sampling stride at `iter`: starts at `stride_init` and drops by
    /// `stride_step` every `stride_interval` iterations, clamped at `stride_min`.
    pub fn stride_at(&self, iter: u64) -> u32 {
        let drops = (iter / self.stride_interval) as u32;
        self.stride_init
            .saturating_sub(self.stride_step.saturating_mul(drops))
            .max(self.stride_min)
    }

    /// Pose-sampling width at `iter`: linear ramp from `omega_init` to
    /// `omega_max` over `omega_ramp` iterations, constant afterwards.
    pub fn omega_at(&self, iter: u64) -> f64 {
        if self.omega_ramp == 0 || iter >= self.omega_ramp {
            return self.omega_max;
        }
        let t = iter as f64 / self.omega_ramp as f64;
        self.omega_init + t * (self.omega_max - self.omega_init)
    }

    /// Loss weights at `iter`. The geometry and smoothness weights are
    /// constant; the semantic budget shifts linearly between the
    /// feature-distance and adversarial terms over the whole run.
    pub fn weights_at(&self, iter: u64) -> LossWeights {
        let t = if self.total_iterations == 0 {
            1.0
        } else {
            (iter as f64 / self.total_iterations as f64).min(1.0)
        };
        let rising = self.lambda_semantic * t;
        let falling = self.lambda_semantic - rising;
        let (adv, cls) = match self.lambda_assignment {
            LambdaAssignment::Prose => (rising, falling),
            LambdaAssignment::Printed => (falling, rising),
        };
        LossWeights {
            geo: self.lambda_geo,
            adv,
            cls,
            smooth: self.lambda_smooth,
        }
    }

    /// Field and discriminator learning rates at `iter`.
    pub fn lr_at(&self, iter: u64) -> (f64, f64) {
        let halvings = (iter / self.lr_half_interval) as i32;
        let lr_field = self.lr_init * 0.5f64.powi(halvings);
        (lr_field, self.d_lr_ratio * lr_field)
    }

    /// True exactly when the stride changed between `iter - 1` and `iter`.
    pub fn should_reinit_discriminator(&self, iter: u64) -> bool {
        iter > 0 && self.stride_at(iter) != self.stride_at(iter - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_follows_published_decay() {
        let s = TrainingSchedule::default();
        assert_eq!(s.stride_at(0), 6);
        assert_eq!(s.stride_at(9_999), 6);
        assert_eq!(s.stride_at(10_000), 4);
        assert_eq!(s.stride_at(20_000), 2);
        assert_eq!(s.stride_at(30_000), 1);
        assert_eq!(s.stride_at(35_000), 1);
        assert_eq!(s.stride_at(1_000_000), 1);
    }

    #[test]
    fn omega_ramps_linearly() {
        let s = TrainingSchedule::default();
        assert_eq!(s.omega_at(0), s.omega_init);
        assert_eq!(s.omega_at(s.omega_ramp), s.omega_max);
        let mid = s.omega_at(s.omega_ramp / 2);
        assert!((mid - 0.5 * (s.omega_init + s.omega_max)).abs() < 1e-12);
        assert_eq!(s.omega_at(s.omega_ramp * 10), s.omega_max);
    }

    #[test]
    fn weights_default_assignment_endpoints() {
        let s = TrainingSchedule::default();
        let w0 = s.weights_at(0);
        assert_eq!(w0.geo, 8.0);
        assert_eq!(w0.adv, 0.0);
        assert_eq!(w0.cls, 0.1);
        assert_eq!(w0.smooth, 0.1);

        let w_end = s.weights_at(s.total_iterations);
        assert!((w_end.adv - 0.1).abs() < 1e-12);
        assert!(w_end.cls.abs() < 1e-12);

        let w_mid = s.weights_at(s.total_iterations / 2);
        assert!((w_mid.adv - 0.05).abs() < 1e-12);
        assert!((w_mid.cls - 0.05).abs() < 1e-12);
    }

    #[test]
    fn weights_printed_assignment_swaps_ramps() {
        let s = TrainingSchedule {
            lambda_assignment: LambdaAssignment::Printed,
            ..TrainingSchedule::default()
        };
        let w0 = s.weights_at(0);
        assert_eq!(w0.adv, 0.1);
        assert_eq!(w0.cls, 0.0);
        let w_end = s.weights_at(s.total_iterations);
        assert!(w_end.adv.abs() < 1e-12);
        assert!((w_end.cls - 0.1).abs() < 1e-12);
    }

    #[test]
    fn semantic_budget_is_conserved() {
        let s = TrainingSchedule::default();
        for iter in (0..=s.total_iterations).step_by(777) {
            let w = s.weights_at(iter);
            assert!((w.adv + w.cls - s.lambda_semantic).abs() < 1e-12, "iter {iter}");
            assert!(w.adv >= 0.0 && w.cls >= 0.0);
        }
    }

    #[test]
    fn lr_halves_with_fixed_discriminator_ratio() {
        let s = TrainingSchedule::default();
        assert_eq!(s.lr_at(0), (1e-3, 2e-4));
        assert_eq!(s.lr_at(10_000), (5e-4, 1e-4));
        let (f, d) = s.lr_at(25_000);
        assert!((f - 2.5e-4).abs() < 1e-18);
        assert!((d - 5e-5).abs() < 1e-18);
        for iter in (0..50_000).step_by(1234) {
            let (f, d) = s.lr_at(iter);
            assert!((d / f - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn stride_is_non_increasing() {
        let s = TrainingSchedule::default();
        let mut prev = s.stride_at(0);
        for iter in 1..45_000 {
            let cur = s.stride_at(iter);
            assert!(cur <= prev);
            assert!(cur >= s.stride_min);
            prev = cur;
        }
    }

    #[test]
    fn reinit_fires_exactly_at_stride_boundaries() {
        let s = TrainingSchedule::default();
        assert!(!s.should_reinit_discriminator(0));
        assert!(!s.should_reinit_discriminator(9_999));
        assert!(s.should_reinit_discriminator(10_000));
        assert!(s.should_reinit_discriminator(20_000));
        assert!(s.should_reinit_discriminator(30_000));
        assert!(!s.should_reinit_discriminator(30_001));
        assert!(!s.should_reinit_discriminator(40_001));

        let fires: u64 = (1..s.total_iterations)
            .filter(|&i| s.should_reinit_discriminator(i))
            .count() as u64;
        let mut distinct = vec![s.stride_at(0)];
        for i in 1..s.total_iterations {
            let v = s.stride_at(i);
            if *distinct.last().unwrap() != v {
                distinct.push(v);
            }
        }
        assert_eq!(fires, distinct.len() as u64 - 1);
    }
}
