use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of the current step within a run of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepContext {
    step: u64,
    total: u64,
}

impl StepContext {
    pub fn new(step: u64, total: u64) -> Result<Self> {
        if total == 0 {
            return Err(Error::config("steps", "total steps must be positive"));
        }
        if step > total {
            return Err(Error::config(
                "step",
                format!("step {step} exceeds total {total}"),
            ));
        }
        Ok(Self { step, total })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Training progress `p = t / T`.
    pub fn progress(&self) -> f64 {
        self.step as f64 / self.total as f64
    }
}

/// Linear transition of a bound coefficient from `alpha_init` to
/// `alpha_late`, starting at progress `onset` and lasting `window`.
///
/// With `constant` set the coefficient stays at `alpha_init` for the
/// whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha_init: f64,
    pub alpha_late: f64,
    #[serde(default = "default_onset")]
    pub onset: f64,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default)]
    pub constant: bool,
}

fn default_onset() -> f64 {
    0.1
}

fn default_window() -> f64 {
    0.6
}

impl ScheduleConfig {
    pub fn new(alpha_init: f64, alpha_late: f64, onset: f64, window: f64) -> Result<Self> {
        let cfg = Self {
            alpha_init,
            alpha_late,
            onset,
            window,
            constant: false,
        };
        cfg.validate("schedule")?;
        Ok(cfg)
    }

    pub fn constant(alpha: f64) -> Self {
        Self {
            alpha_init: alpha,
            alpha_late: alpha,
            onset: default_onset(),
            window: default_window(),
            constant: true,
        }
    }

    /// Default lower-bound coefficient: 0.5 early, 0.8 late.
    pub fn default_low() -> Self {
        Self {
            alpha_init: 0.5,
            alpha_late: 0.8,
            onset: default_onset(),
            window: default_window(),
            constant: false,
        }
    }

    /// Default upper-bound coefficient: 2.0 early, 1.2 late.
    pub fn default_high() -> Self {
        Self {
            alpha_init: 2.0,
            alpha_late: 1.2,
            onset: default_onset(),
            window: default_window(),
            constant: false,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.alpha_init) {
            return Err(Error::config(
                format!("{field}.alpha_init"),
                format!("must be positive and finite, got {}", self.alpha_init),
            ));
        }
        if !positive(self.alpha_late) {
            return Err(Error::config(
                format!("{field}.alpha_late"),
                format!("must be positive and finite, got {}", self.alpha_late),
            ));
        }
        if !(self.onset.is_finite() && (0.0..=1.0).contains(&self.onset)) {
            return Err(Error::config(
                format!("{field}.onset"),
                format!("must lie in [0, 1], got {}", self.onset),
            ));
        }
        // s + w is allowed to overshoot 1 by rounding noise only.
        if !(self.window.is_finite()
            && self.window > 0.0
            && self.onset + self.window <= 1.0 + 1e-12)
        {
            return Err(Error::config(
                format!("{field}.window"),
                format!(
                    "must lie in (0, 1 - onset] = (0, {}], got {}",
                    1.0 - self.onset,
                    self.window
                ),
            ));
        }
        Ok(())
    }

    /// Coefficient at progress `p`.
    pub fn value_at(&self, p: f64) -> f64 {
        if self.constant || p <= self.onset {
            return self.alpha_init;
        }
        if p >= self.onset + self.window {
            return self.alpha_late;
        }
        let lambda = (p - self.onset) / self.window;
        let v = (1.0 - lambda) * self.alpha_init + lambda * self.alpha_late;
        v.clamp(self.min_alpha(), self.max_alpha())
    }

    pub fn evaluate(&self, ctx: StepContext) -> f64 {
        self.value_at(ctx.progress())
    }

    pub fn min_alpha(&self) -> f64 {
        if self.constant {
            self.alpha_init
        } else {
            self.alpha_init.min(self.alpha_late)
        }
    }

    pub fn max_alpha(&self) -> f64 {
        if self.constant {
            self.alpha_init
        } else {
            self.alpha_init.max(self.alpha_late)
        }
    }

    /// Progress values where the schedule changes slope.
    pub(crate) fn breakpoints(&self) -> [f64; 2] {
        [self.onset, (self.onset + self.window).min(1.0)]
    }
}
