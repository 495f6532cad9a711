use serde::{Deserialize, Serialize};

use crate::clip::{ClipAction, ScheduleConfig, StepContext};
use crate::error::{Error, Result};

/// Hyperparameters of the adaptive clipper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggcConfig {
    /// EMA decay in `[0, 1)`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Absolute floor of the lower bound.
    #[serde(default = "default_min_norm")]
    pub min_norm: f64,
    /// Denominator guard in the scale factor.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "ScheduleConfig::default_low")]
    pub low: ScheduleConfig,
    #[serde(default = "ScheduleConfig::default_high")]
    pub high: ScheduleConfig,
}

fn default_beta() -> f64 {
    0.95
}

fn default_min_norm() -> f64 {
    1e-8
}

fn default_epsilon() -> f64 {
    1e-6
}

impl Default for AggcConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            min_norm: default_min_norm(),
            epsilon: default_epsilon(),
            low: ScheduleConfig::default_low(),
            high: ScheduleConfig::default_high(),
        }
    }
}

impl AggcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(
                "beta",
                format!("must lie in [0, 1), got {}", self.beta),
            ));
        }
        if !(self.min_norm.is_finite() && self.min_norm >= 0.0) {
            return Err(Error::config(
                "min_norm",
                format!("must be nonnegative, got {}", self.min_norm),
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(
                "epsilon",
                format!("must be positive, got {}", self.epsilon),
            ));
        }
        self.low.validate("low")?;
        self.high.validate("high")?;

        // Both schedules are piecewise linear, so their difference is too;
        // checking every breakpoint covers every progress value.
        let mut points = vec![0.0, 1.0];
        points.extend(self.low.breakpoints());
        points.extend(self.high.breakpoints());
        for p in points {
            let (lo, hi) = (self.low.value_at(p), self.high.value_at(p));
            if lo >= hi {
                return Err(Error::config(
                    "low",
                    format!("alpha_low ({lo}) must stay below alpha_high ({hi}); violated at progress {p}"),
                ));
            }
        }
        Ok(())
    }

    /// `[L_j, U_j]` for a group whose EMA scale is `ema_scale`.
    pub fn compute_interval(&self, ema_scale: f64, ctx: StepContext) -> ClipInterval {
        ClipInterval::new(
            ema_scale,
            self.low.evaluate(ctx),
            self.high.evaluate(ctx),
            self.min_norm,
        )
    }
}

/// Admissible range of a group norm at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipInterval {
    pub lower: f64,
    pub upper: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
}

impl ClipInterval {
    /// `lower = max(min_norm, alpha_low * S)`, `upper = alpha_high * S`.
    ///
    /// When the floor exceeds the upper bound, the upper bound is raised to
    /// the floor, yielding a point interval.
    pub fn new(ema_scale: f64, alpha_low: f64, alpha_high: f64, min_norm: f64) -> Self {
        let lower = min_norm.max(alpha_low * ema_scale);
        let upper = (alpha_high * ema_scale).max(lower);
        Self {
            lower,
            upper,
            alpha_low,
            alpha_high,
        }
    }

    pub fn contains(&self, norm: f64) -> bool {
        self.lower <= norm && norm <= self.upper
    }
}

/// Scale factor and the action it represents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub factor: f64,
    pub action: ClipAction,
}

impl Scaling {
    pub const IDENTITY: Scaling = Scaling {
        factor: 1.0,
        action: ClipAction::None,
    };
}

/// Factor that moves `norm` to the nearest boundary of `interval`.
///
/// Returns exactly `1.0` inside the interval. Two cases also fall back to
/// the identity:
/// * `norm < epsilon`: a (near-)zero gradient has no direction to boost;
/// * `lower / (norm + epsilon) <= 1`: the norm sits within `epsilon` below
///   the lower bound and the guarded factor would shrink it instead.
pub fn compute_scale(norm: f64, interval: &ClipInterval, epsilon: f64) -> Scaling {
    if norm < epsilon {
        return Scaling::IDENTITY;
    }
    if norm > interval.upper {
        return Scaling {
            factor: interval.upper / (norm + epsilon),
            action: ClipAction::ClippedHigh,
        };
    }
    if norm < interval.lower {
        let factor = interval.lower / (norm + epsilon);
        if factor > 1.0 {
            return Scaling {
                factor,
                action: ClipAction::BoostedLow,
            };
        }
    }
    Scaling::IDENTITY
}
