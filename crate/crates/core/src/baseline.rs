//! Reference strategies: no clipping, global-norm clipping and fixed
//! per-group thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clip::partition::check_views;
use crate::clip::{
    group_norm, ClipAction, ClipDecision, ClipStrategy, DecisionBounds, GroupGradientView, GroupId,
    GroupPartition, StepContext,
};
use crate::error::{Error, Result};

/// Synthetic group id of the single decision produced by [`global_clip`].
pub const GLOBAL_GROUP: &str = "ALL";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalClipConfig {
    pub max_norm: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticGroupClipConfig {
    pub thresholds: BTreeMap<String, f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-6
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::config(
            "epsilon",
            format!("must be positive, got {epsilon}"),
        ));
    }
    Ok(())
}

impl GlobalClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_norm.is_finite() && self.max_norm > 0.0) {
            return Err(Error::config(
                "max_norm",
                format!("must be positive, got {}", self.max_norm),
            ));
        }
        check_epsilon(self.epsilon)
    }
}

impl StaticGroupClipConfig {
    pub fn validate(&self, partition: &GroupPartition) -> Result<()> {
        check_epsilon(self.epsilon)?;
        for id in partition.group_ids() {
            match self.thresholds.get(id.as_str()) {
                None => return Err(Error::MissingGroupThreshold(id.to_string())),
                Some(&t) if !(t.is_finite() && t > 0.0) => {
                    return Err(Error::config(
                        format!("thresholds.{id}"),
                        format!("must be positive, got {t}"),
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Standard clipping: one L2 norm over every tensor of every group and one
/// factor `max_norm / (N + eps)` applied to all of them when `N > max_norm`.
pub fn global_clip(
    views: &mut [GroupGradientView<'_>],
    cfg: &GlobalClipConfig,
) -> Result<ClipDecision> {
    let mut total_sq = 0.0;
    for view in views.iter() {
        total_sq += view.squared_norm()?;
    }
    let total = total_sq.sqrt();
    let bounds = DecisionBounds::Global {
        max_norm: cfg.max_norm,
        total_norm: total,
    };
    if total <= cfg.max_norm {
        return Ok(ClipDecision::unchanged(
            GroupId::from(GLOBAL_GROUP),
            total,
            bounds,
        ));
    }
    let factor = cfg.max_norm / (total + cfg.epsilon);
    for view in views.iter_mut() {
        view.scale_by(factor);
    }
    Ok(ClipDecision {
        group_id: GroupId::from(GLOBAL_GROUP),
        pre_norm: total,
        scale_factor: factor,
        action: ClipAction::ClippedHigh,
        bounds,
    })
}

/// Upper-only clipping of each group at its own fixed threshold.
pub fn static_group_clip(
    views: &mut [GroupGradientView<'_>],
    cfg: &StaticGroupClipConfig,
) -> Result<Vec<ClipDecision>> {
    let mut thresholds = Vec::with_capacity(views.len());
    let mut norms = Vec::with_capacity(views.len());
    for view in views.iter() {
        let id = view.group_id().as_str();
        let t = *cfg
            .thresholds
            .get(id)
            .ok_or_else(|| Error::MissingGroupThreshold(id.to_string()))?;
        thresholds.push(t);
        norms.push(group_norm(view)?);
    }
    let mut decisions = Vec::with_capacity(views.len());
    for ((view, norm), max_norm) in views.iter_mut().zip(norms).zip(thresholds) {
        let bounds = DecisionBounds::UpperOnly { max_norm };
        if norm <= max_norm {
            decisions.push(ClipDecision::unchanged(
                view.group_id().clone(),
                norm,
                bounds,
            ));
            continue;
        }
        let factor = max_norm / (norm + cfg.epsilon);
        view.scale_by(factor);
        decisions.push(ClipDecision {
            group_id: view.group_id().clone(),
            pre_norm: norm,
            scale_factor: factor,
            action: ClipAction::ClippedHigh,
            bounds,
        });
    }
    Ok(decisions)
}

/// Leaves gradients alone; still validates them and reports their norms.
#[derive(Debug, Clone)]
pub struct NoClip {
    group_ids: Vec<GroupId>,
}

impl NoClip {
    pub fn new(partition: &GroupPartition) -> Self {
        Self {
            group_ids: partition.group_ids().cloned().collect(),
        }
    }
}

impl ClipStrategy for NoClip {
    fn name(&self) -> &'static str {
        "none"
    }

    fn step(
        &mut self,
        views: &mut [GroupGradientView<'_>],
        _ctx: StepContext,
    ) -> Result<Vec<ClipDecision>> {
        check_views(self.group_ids.iter(), views)?;
        views
            .iter()
            .map(|v| {
                Ok(ClipDecision::unchanged(
                    v.group_id().clone(),
                    group_norm(v)?,
                    DecisionBounds::Unbounded,
                ))
            })
            .collect()
    }
}

/// [`global_clip`] as a strategy, reporting the shared factor per group.
#[derive(Debug, Clone)]
pub struct GlobalClip {
    config: GlobalClipConfig,
    group_ids: Vec<GroupId>,
}

impl GlobalClip {
    pub fn new(config: GlobalClipConfig, partition: &GroupPartition) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            group_ids: partition.group_ids().cloned().collect(),
        })
    }
}

impl ClipStrategy for GlobalClip {
    fn name(&self) -> &'static str {
        "global"
    }

    fn step(
        &mut self,
        views: &mut [GroupGradientView<'_>],
        _ctx: StepContext,
    ) -> Result<Vec<ClipDecision>> {
        check_views(self.group_ids.iter(), views)?;
        let norms = views
            .iter()
            .map(|v| group_norm(v))
            .collect::<Result<Vec<_>>>()?;
        let global = global_clip(views, &self.config)?;
        Ok(views
            .iter()
            .zip(norms)
            .map(|(v, pre_norm)| ClipDecision {
                group_id: v.group_id().clone(),
                pre_norm,
                scale_factor: global.scale_factor,
                action: global.action,
                bounds: global.bounds,
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct StaticGroupClip {
    config: StaticGroupClipConfig,
    group_ids: Vec<GroupId>,
}

impl StaticGroupClip {
    pub fn new(config: StaticGroupClipConfig, partition: &GroupPartition) -> Result<Self> {
        config.validate(partition)?;
        Ok(Self {
            config,
            group_ids: partition.group_ids().cloned().collect(),
        })
    }
}

impl ClipStrategy for StaticGroupClip {
    fn name(&self) -> &'static str {
        "static_group"
    }

    fn step(
        &mut self,
        views: &mut [GroupGradientView<'_>],
        _ctx: StepContext,
    ) -> Result<Vec<ClipDecision>> {
        check_views(self.group_ids.iter(), views)?;
        static_group_clip(views, &self.config)
    }
}
