use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::clip::{GroupGradientView, GroupId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub id: GroupId,
    pub members: Vec<String>,
}

/// Assignment of tensors to groups. Every tensor belongs to exactly one
/// group, no group is empty, and group order never changes after
/// construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    groups: Vec<Group>,
}

impl GroupPartition {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidPartition("no groups".into()));
        }
        let mut ids = HashSet::new();
        let mut tensors = HashSet::new();
        for group in &groups {
            if !ids.insert(&group.id) {
                return Err(Error::InvalidPartition(format!(
                    "group `{}` appears twice",
                    group.id
                )));
            }
            if group.members.is_empty() {
                return Err(Error::InvalidPartition(format!(
                    "group `{}` has no members",
                    group.id
                )));
            }
            for member in &group.members {
                if !tensors.insert(member.as_str()) {
                    return Err(Error::InvalidPartition(format!(
                        "tensor `{member}` is in more than one group"
                    )));
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Number of groups `J`.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_ids(&self) -> impl Iterator<Item = &GroupId> {
        self.groups.iter().map(|g| &g.id)
    }

    pub fn index_of(&self, id: &GroupId) -> Option<usize> {
        self.groups.iter().position(|g| &g.id == id)
    }

    pub fn tensor_count(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }
}

/// Checks that `views` lines up one-to-one with `ids`.
pub(crate) fn check_views<'a>(
    ids: impl ExactSizeIterator<Item = &'a GroupId>,
    views: &[GroupGradientView<'_>],
) -> Result<()> {
    if ids.len() != views.len() {
        return Err(Error::InvalidPartition(format!(
            "expected {} group views, got {}",
            ids.len(),
            views.len()
        )));
    }
    for (id, view) in ids.zip(views) {
        if id != view.group_id() {
            return Err(Error::GroupMismatch {
                expected: id.to_string(),
                got: view.group_id().to_string(),
            });
        }
    }
    Ok(())
}
