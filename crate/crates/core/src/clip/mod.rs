//! Adaptive group-wise gradient clipping.
//!
//! Parameters are partitioned into functional groups. Each group keeps an
//! exponential moving average `S_j` of its gradient norm; at every step the
//! group norm is compared against an admissible interval
//! `[max(min_norm, a_low * S_j), a_high * S_j]` whose coefficients follow a
//! piecewise-linear schedule in training progress. Groups outside their
//! interval are rescaled to the nearest boundary, independently of every
//! other group.

mod aggc;
mod ema;
mod interval;
pub(crate) mod partition;
mod schedule;
mod view;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::telemetry::ClipperSnapshot;

pub use aggc::AggcClipper;
pub use ema::EmaScaleState;
pub use interval::{compute_scale, AggcConfig, ClipInterval, Scaling};
pub use partition::{Group, GroupPartition};
pub use schedule::{ScheduleConfig, StepContext};
pub use view::{
    apply_scale, group_norm, views_of, GradElement, GroupGradientView, GroupGradients, TensorGrad,
};

/// Identifier of a functional parameter group (e.g. `"q"`, `"up"`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl GroupId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        GroupId(s.to_string())
    }
}

impl From<String> for GroupId {
    fn from(s: String) -> Self {
        GroupId(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipAction {
    None,
    ClippedHigh,
    BoostedLow,
}

impl ClipAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipAction::None => "none",
            ClipAction::ClippedHigh => "clipped_high",
            ClipAction::BoostedLow => "boosted_low",
        }
    }
}

impl fmt::Display for ClipAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the strategy compared the group norm against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecisionBounds {
    /// No clipping was attempted.
    Unbounded,
    /// A single threshold on the norm of the whole model.
    Global { max_norm: f64, total_norm: f64 },
    /// A fixed upper threshold for this group only.
    UpperOnly { max_norm: f64 },
    /// An EMA-derived two-sided interval.
    Adaptive {
        ema_scale: f64,
        interval: ClipInterval,
    },
}

/// The outcome of clipping one group at one step.
///
/// `action == None` exactly when `scale_factor == 1.0`; a clipped group has
/// a factor below one and a boosted group a factor above one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipDecision {
    pub group_id: GroupId,
    pub pre_norm: f64,
    pub scale_factor: f64,
    pub action: ClipAction,
    pub bounds: DecisionBounds,
}

impl ClipDecision {
    pub fn unchanged(group_id: GroupId, pre_norm: f64, bounds: DecisionBounds) -> Self {
        Self {
            group_id,
            pre_norm,
            scale_factor: 1.0,
            action: ClipAction::None,
            bounds,
        }
    }

    pub fn ema_scale(&self) -> Option<f64> {
        match self.bounds {
            DecisionBounds::Adaptive { ema_scale, .. } => Some(ema_scale),
            _ => None,
        }
    }

    pub fn interval(&self) -> Option<&ClipInterval> {
        match &self.bounds {
            DecisionBounds::Adaptive { interval, .. } => Some(interval),
            _ => None,
        }
    }
}

/// A gradient clipping strategy applied between backward and optimizer step.
///
/// `views` holds one view per partition group, in partition order. The
/// strategy mutates the buffers in place and reports one decision per group.
pub trait ClipStrategy: Send {
    fn name(&self) -> &'static str;

    fn step(
        &mut self,
        views: &mut [GroupGradientView<'_>],
        ctx: StepContext,
    ) -> Result<Vec<ClipDecision>>;

    /// Serializable state, for strategies that carry any across steps.
    fn snapshot(&self) -> Option<ClipperSnapshot> {
        None
    }
}
