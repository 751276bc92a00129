//! Named parameter storage with per-group trainability and learning-rate
//! multipliers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter groups. Freezing and learning-rate scaling act per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ImageEncoder,
    TextEncoder,
    Prompt,
    /// Frozen random context standing in for a hand-written template.
    FixedPrompt,
    Projector,
    Refinement,
    Upsample,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Prompt,
        ParamGroup::FixedPrompt,
        ParamGroup::Projector,
        ParamGroup::Refinement,
        ParamGroup::Upsample,
        ParamGroup::Decoder,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPolicy {
    pub trainable: bool,
    pub lr_mult: f64,
}

impl GroupPolicy {
    pub fn default_for(group: ParamGroup) -> Self {
        match group {
            ParamGroup::TextEncoder | ParamGroup::FixedPrompt => GroupPolicy {
                trainable: false,
                lr_mult: 1.0,
            },
            ParamGroup::ImageEncoder => GroupPolicy {
                trainable: true,
                lr_mult: 0.1,
            },
            _ => GroupPolicy {
                trainable: true,
                lr_mult: 1.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
    /// Per-tensor freeze on top of the group policy.
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    policy: BTreeMap<ParamGroup, GroupPolicy>,
}

impl Default for ParamStore {
    fn default() -> Self {
        let policy = ParamGroup::ALL
            .iter()
            .map(|&g| (g, GroupPolicy::default_for(g)))
            .collect();
        Self {
            params: BTreeMap::new(),
            policy,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.insert(
            name.into(),
            Param {
                value,
                group,
                frozen: false,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn policy(&self, group: ParamGroup) -> GroupPolicy {
        self.policy[&group]
    }

    pub fn set_policy(&mut self, group: ParamGroup, policy: GroupPolicy) {
        self.policy.insert(group, policy);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params
            .get(name)
            .map(|p| !p.frozen && self.policy[&p.group].trainable)
            .unwrap_or(false)
    }

    pub fn lr_mult(&self, name: &str) -> f64 {
        self.params
            .get(name)
            .map(|p| self.policy[&p.group].lr_mult)
            .unwrap_or(0.0)
    }

    /// SHA-256 over names, shapes and raw bytes of every tensor in `group`.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

/// A tape bound to a parameter store. Parameters are materialised as tape
/// leaves on first use and remembered by name.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    track_grads: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            track_grads,
        }
    }

    /// Wraps an existing tape, e.g. one whose leaves were created elsewhere.
    pub fn from_tape(store: &'a ParamStore, tape: Tape, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            bound: BTreeMap::new(),
            track_grads,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let rg = self.track_grads && self.store.is_trainable(name);
        let v = self.tape.leaf(value, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_freeze_text_and_scale_image() {
        let s = ParamStore::new();
        assert!(!s.policy(ParamGroup::TextEncoder).trainable);
        assert_eq!(s.policy(ParamGroup::ImageEncoder).lr_mult, 0.1);
        assert_eq!(s.policy(ParamGroup::Decoder).lr_mult, 1.0);
    }

    #[test]
    fn hash_changes_with_content() {
        let mut s = ParamStore::new();
        s.insert("t.w", Tensor::zeros(&[2]), ParamGroup::TextEncoder);
        let h0 = s.group_hash(ParamGroup::TextEncoder);
        s.get_mut("t.w").unwrap().data_mut()[0] = 1.0;
        assert_ne!(h0, s.group_hash(ParamGroup::TextEncoder));
        assert_eq!(h0.len(), 64);
    }
}
