use crate::clip::partition::check_views;
use crate::clip::{
    apply_scale, compute_scale, group_norm, AggcConfig, ClipDecision, ClipStrategy, DecisionBounds,
    EmaScaleState, GroupGradientView, GroupId, GroupPartition, StepContext,
};
use crate::error::{Error, Result};
use crate::telemetry::{ClipperSnapshot, GroupScaleSnapshot};

/// Stateful adaptive group-wise clipper.
///
/// Per step and group, in partition order: group norm, EMA update with the
/// pre-clip norm, scheduled interval, scale factor, in-place rescale.
#[derive(Debug, Clone)]
pub struct AggcClipper {
    config: AggcConfig,
    group_ids: Vec<GroupId>,
    ema: EmaScaleState,
    last_step: Option<u64>,
}

impl AggcClipper {
    pub fn new(config: AggcConfig, partition: &GroupPartition) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            ema: EmaScaleState::new(config.beta, partition.len())?,
            group_ids: partition.group_ids().cloned().collect(),
            config,
            last_step: None,
        })
    }

    pub fn config(&self) -> &AggcConfig {
        &self.config
    }

    pub fn ema(&self) -> &EmaScaleState {
        &self.ema
    }

    pub fn group_ids(&self) -> &[GroupId] {
        &self.group_ids
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    /// Clips every group in place and returns one decision per group.
    ///
    /// All norms are validated before any state or buffer is touched, so a
    /// `NonFiniteGradient` error leaves the clipper and the gradients as
    /// they were.
    pub fn step(
        &mut self,
        views: &mut [GroupGradientView<'_>],
        ctx: StepContext,
    ) -> Result<Vec<ClipDecision>> {
        if let Some(last) = self.last_step {
            if ctx.step() != last + 1 {
                return Err(Error::StepOutOfOrder {
                    expected: last + 1,
                    got: ctx.step(),
                });
            }
        }
        check_views(self.group_ids.iter(), views)?;
        let norms = views
            .iter()
            .map(|v| group_norm(v))
            .collect::<Result<Vec<_>>>()?;

        let mut decisions = Vec::with_capacity(views.len());
        for (j, (view, norm)) in views.iter_mut().zip(norms).enumerate() {
            let ema_scale = self.ema.update(j, norm);
            let interval = self.config.compute_interval(ema_scale, ctx);
            let scaling = compute_scale(norm, &interval, self.config.epsilon);
            let decision = ClipDecision {
                group_id: self.group_ids[j].clone(),
                pre_norm: norm,
                scale_factor: scaling.factor,
                action: scaling.action,
                bounds: DecisionBounds::Adaptive {
                    ema_scale,
                    interval,
                },
            };
            apply_scale(view, &decision);
            decisions.push(decision);
        }
        self.last_step = Some(ctx.step());
        Ok(decisions)
    }

    pub fn snapshot(&self) -> ClipperSnapshot {
        ClipperSnapshot {
            beta: self.ema.beta(),
            step: self.last_step,
            groups: self
                .group_ids
                .iter()
                .enumerate()
                .map(|(j, id)| GroupScaleSnapshot {
                    group_id: id.clone(),
                    ema_scale: self.ema.scales()[j],
                    initialized: self.ema.is_initialized(j),
                })
                .collect(),
        }
    }

    /// Rebuilds a clipper from a snapshot taken with the same config.
    pub fn restore(config: AggcConfig, snapshot: &ClipperSnapshot) -> Result<Self> {
        config.validate()?;
        if snapshot.beta != config.beta {
            return Err(Error::config(
                "beta",
                format!(
                    "snapshot was taken with beta {} but config has {}",
                    snapshot.beta, config.beta
                ),
            ));
        }
        let ema = EmaScaleState::from_parts(
            snapshot.beta,
            snapshot.groups.iter().map(|g| g.ema_scale).collect(),
            snapshot.groups.iter().map(|g| g.initialized).collect(),
        )?;
        Ok(Self {
            config,
            group_ids: snapshot.groups.iter().map(|g| g.group_id.clone()).collect(),
            ema,
            last_step: snapshot.step,
        })
    }
}

impl ClipStrategy for AggcClipper {
    fn name(&self) -> &'static str {
        "aggc"
    }

    fn step(
        &mut self,
        views: &mut [GroupGradientView<'_>],
        ctx: StepContext,
    ) -> Result<Vec<ClipDecision>> {
        AggcClipper::step(self, views, ctx)
    }

    fn snapshot(&self) -> Option<ClipperSnapshot> {
        Some(AggcClipper::snapshot(self))
    }
}
