//! Named parameter tensors, their gradients, and name-pattern grouping.

use std::collections::HashMap;

use glob::Pattern;
use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::clip::{Group, GroupGradientView, GroupId, GroupPartition, TensorGrad};
use crate::error::{Error, Result};

/// Index of a tensor inside its [`ParamRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Owns parameter tensors in registration order.
///
/// Every mutable access to parameter values bumps [`version`](Self::version),
/// which models use to detect a forward cache made stale by an update.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: Vec<ParamTensor>,
    index: HashMap<String, usize>,
    version: u64,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<f64>,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::ShapeMismatch {
                what: name,
                expected: shape.to_vec(),
                got: vec![values.len()],
            });
        }
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(ParamTensor {
            name,
            shape: shape.to_vec(),
            values,
            grad: None,
        });
        self.version += 1;
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(ParamTensor::numel).sum()
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version += 1;
        &mut self.params[id.0].values
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let p = &self.params[id.0];
        assert_eq!(p.shape.len(), 2, "`{}` is not a matrix", p.name);
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.values)
            .expect("shape checked at registration")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[id.0].values[..])
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    /// Overwrites the gradient of `id`.
    pub fn set_grad(&mut self, id: ParamId, grad: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.values.len() {
            return Err(Error::ShapeMismatch {
                what: p.name.clone(),
                expected: p.shape.clone(),
                got: vec![grad.len()],
            });
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Parameter values and gradient side by side, for optimizers.
    pub(crate) fn params_mut(&mut self) -> &mut [ParamTensor] {
        self.version += 1;
        &mut self.params
    }
}

/// One pattern of a [`GroupingRule`].
///
/// Patterns containing `*`, `?` or `[` are globs matched against the whole
/// tensor name; anything else matches as a substring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPattern {
    pub pattern: String,
    pub group: String,
}

impl GroupPattern {
    pub fn new(pattern: impl Into<String>, group: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            group: group.into(),
        }
    }
}

/// Ordered name patterns; the first match assigns the group, and names
/// matching nothing fall into `default_group`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingRule {
    #[serde(default)]
    pub rules: Vec<GroupPattern>,
    #[serde(default = "default_group")]
    pub default_group: String,
}

fn default_group() -> String {
    "other".to_string()
}

enum Matcher {
    Substring(String),
    Glob(Pattern),
}

impl Matcher {
    fn parse(pattern: &str) -> Result<Self> {
        if pattern.contains(['*', '?', '[']) {
            Pattern::new(pattern)
                .map(Matcher::Glob)
                .map_err(|e| Error::config("grouping.rules.pattern", format!("`{pattern}`: {e}")))
        } else {
            Ok(Matcher::Substring(pattern.to_string()))
        }
    }

    fn matches(&self, name: &str) -> bool {
        match self {
            Matcher::Substring(s) => name.contains(s.as_str()),
            Matcher::Glob(p) => p.matches(name),
        }
    }
}

impl GroupingRule {
    pub fn new(rules: Vec<GroupPattern>, default_group: impl Into<String>) -> Self {
        Self {
            rules,
            default_group: default_group.into(),
        }
    }

    /// Module-type taxonomy of a decoder block: attention projections,
    /// feed-forward projections, norms, embeddings and the output head.
    pub fn llm_default() -> Self {
        let rules = [
            ("q_proj", "q"),
            ("k_proj", "k"),
            ("v_proj", "v"),
            ("o_proj", "o"),
            ("gate_proj", "gate"),
            ("up_proj", "up"),
            ("down_proj", "down"),
            ("norm", "norm"),
            ("embed", "embedding"),
            ("lm_head", "head"),
        ];
        Self::new(
            rules
                .iter()
                .map(|(p, g)| GroupPattern::new(*p, *g))
                .collect(),
            "other",
        )
    }

    /// Weights and biases of a dense network as two groups.
    pub fn weight_bias() -> Self {
        Self::new(
            vec![
                GroupPattern::new("*.weight", "weight"),
                GroupPattern::new("*.bias", "bias"),
            ],
            "other",
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.default_group.is_empty() {
            return Err(Error::config("grouping.default_group", "must not be empty"));
        }
        for r in &self.rules {
            if r.group.is_empty() {
                return Err(Error::config(
                    "grouping.rules.group",
                    format!("empty group for pattern `{}`", r.pattern),
                ));
            }
            Matcher::parse(&r.pattern)?;
        }
        Ok(())
    }

    /// Group of a single tensor name.
    pub fn assign(&self, name: &str) -> Result<&str> {
        for r in &self.rules {
            if Matcher::parse(&r.pattern)?.matches(name) {
                return Ok(&r.group);
            }
        }
        Ok(&self.default_group)
    }

    /// Group ids in first-appearance order, default last.
    fn group_order(&self) -> Vec<&str> {
        let mut order: Vec<&str> = Vec::new();
        for g in self
            .rules
            .iter()
            .map(|r| r.group.as_str())
            .chain(std::iter::once(self.default_group.as_str()))
        {
            if !order.contains(&g) {
                order.push(g);
            }
        }
        order
    }
}

/// Partitions the registry by `rules`.
///
/// Groups are ordered by first appearance of their id in the rules (the
/// default group last) and hold members in registration order. Groups that
/// match no tensor are omitted.
pub fn build_partition(registry: &ParamRegistry, rules: &GroupingRule) -> Result<GroupPartition> {
    if registry.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    let matchers = rules
        .rules
        .iter()
        .map(|r| Ok((Matcher::parse(&r.pattern)?, r.group.as_str())))
        .collect::<Result<Vec<_>>>()?;
    let order = rules.group_order();
    let mut members: Vec<Vec<String>> = vec![Vec::new(); order.len()];
    for p in registry.params() {
        let group = matchers
            .iter()
            .find(|(m, _)| m.matches(&p.name))
            .map_or(rules.default_group.as_str(), |(_, g)| *g);
        let slot = order
            .iter()
            .position(|g| *g == group)
            .expect("group in order");
        members[slot].push(p.name.clone());
    }
    GroupPartition::new(
        order
            .into_iter()
            .zip(members)
            .filter(|(_, m)| !m.is_empty())
            .map(|(id, members)| Group {
                id: GroupId::from(id),
                members,
            })
            .collect(),
    )
}

/// One view per group, aliasing the registry's gradient buffers.
pub fn collect_group_views<'a>(
    registry: &'a mut ParamRegistry,
    partition: &GroupPartition,
) -> Result<Vec<GroupGradientView<'a>>> {
    // (group, position within group) for every registry slot
    let mut slots: Vec<Option<(usize, usize)>> = vec![None; registry.len()];
    for (j, group) in partition.groups().iter().enumerate() {
        for (k, name) in group.members.iter().enumerate() {
            let id = registry
                .id_of(name)
                .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            slots[id.0] = Some((j, k));
        }
    }

    let mut grouped: Vec<Vec<Option<TensorGrad<'a>>>> = partition
        .groups()
        .iter()
        .map(|g| (0..g.members.len()).map(|_| None).collect())
        .collect();
    for (param, slot) in registry.params.iter_mut().zip(slots) {
        let Some((j, k)) = slot else { continue };
        let grad = param
            .grad
            .as_mut()
            .ok_or_else(|| Error::MissingGradient(param.name.clone()))?;
        grouped[j][k] = Some(TensorGrad {
            id: param.name.as_str(),
            data: grad.as_mut_slice(),
        });
    }

    Ok(partition
        .groups()
        .iter()
        .zip(grouped)
        .map(|(g, tensors)| {
            GroupGradientView::new(
                g.id.clone(),
                tensors
                    .into_iter()
                    .map(|t| t.expect("every member resolved"))
                    .collect(),
            )
        })
        .collect())
}
