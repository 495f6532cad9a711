//! Mutable views over the gradient buffers of one functional group.

use crate::clip::{ClipAction, ClipDecision, GroupId};
use crate::error::{Error, Result};

/// Element type of a gradient buffer.
///
/// Norms are always accumulated in `f64`, whatever the storage precision.
pub trait GradElement: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn scaled(self, factor: f64) -> Self;
}

impl GradElement for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn scaled(self, factor: f64) -> Self {
        self * factor
    }
}

impl GradElement for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn scaled(self, factor: f64) -> Self {
        (self as f64 * factor) as f32
    }
}

/// One gradient tensor inside a group, borrowed mutably from its owner.
#[derive(Debug)]
pub struct TensorGrad<'a, T: GradElement = f64> {
    pub id: &'a str,
    pub data: &'a mut [T],
}

/// The gradients `g_{j,i}` of every tensor in group `j`, aliasing the
/// buffers that own them. Scaling through the view mutates the owner.
#[derive(Debug)]
pub struct GroupGradientView<'a, T: GradElement = f64> {
    group_id: GroupId,
    tensors: Vec<TensorGrad<'a, T>>,
}

impl<'a, T: GradElement> GroupGradientView<'a, T> {
    pub fn new(group_id: GroupId, tensors: Vec<TensorGrad<'a, T>>) -> Self {
        Self { group_id, tensors }
    }

    pub fn group_id(&self) -> &GroupId {
        &self.group_id
    }

    pub fn tensors(&self) -> &[TensorGrad<'a, T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [TensorGrad<'a, T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Squared L2 norm of the whole group, accumulated in `f64`.
    pub fn squared_norm(&self) -> Result<f64> {
        let mut total = 0.0f64;
        for tensor in &self.tensors {
            for &v in tensor.data.iter() {
                let v = v.to_f64();
                if !v.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        group_id: self.group_id.to_string(),
                        tensor_id: tensor.id.to_string(),
                    });
                }
                total += v * v;
            }
            // finite elements can still overflow the sum
            if !total.is_finite() {
                return Err(Error::NonFiniteGradient {
                    group_id: self.group_id.to_string(),
                    tensor_id: tensor.id.to_string(),
                });
            }
        }
        Ok(total)
    }

    /// Multiplies every element of every tensor by `factor`.
    pub fn scale_by(&mut self, factor: f64) {
        for tensor in &mut self.tensors {
            for v in tensor.data.iter_mut() {
                *v = v.scaled(factor);
            }
        }
    }
}

/// Group gradient norm: `sqrt(sum_i ||g_{j,i}||^2)`.
///
/// Fails with [`Error::NonFiniteGradient`] naming the first offending tensor.
pub fn group_norm<T: GradElement>(view: &GroupGradientView<'_, T>) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::InvalidPartition(format!(
            "group `{}` has no tensors",
            view.group_id
        )));
    }
    Ok(view.squared_norm()?.sqrt())
}

/// Applies a decision's factor uniformly to the group. A `None` action
/// leaves the buffers untouched.
pub fn apply_scale<T: GradElement>(view: &mut GroupGradientView<'_, T>, decision: &ClipDecision) {
    if decision.action == ClipAction::None {
        return;
    }
    view.scale_by(decision.scale_factor);
}

/// Owned gradient buffers for one group, used where no parameter
/// registry backs the gradients (synthetic streams, tests).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradients {
    pub group_id: GroupId,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl GroupGradients {
    pub fn view_mut(&mut self) -> GroupGradientView<'_> {
        let tensors = self
            .tensors
            .iter_mut()
            .map(|(id, data)| TensorGrad {
                id: id.as_str(),
                data: data.as_mut_slice(),
            })
            .collect();
        GroupGradientView::new(self.group_id.clone(), tensors)
    }

    pub fn norm(&mut self) -> Result<f64> {
        group_norm(&self.view_mut())
    }
}

/// Mutable views over a slice of owned groups, in order.
pub fn views_of(groups: &mut [GroupGradients]) -> Vec<GroupGradientView<'_>> {
    groups.iter_mut().map(GroupGradients::view_mut).collect()
}
