use std::collections::BTreeSet;

use super::tensor::Tensor;
use super::KernelError;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    group: String,
    value: Tensor<f32>,
}

/// Named f32 parameter tensors, each owned by exactly one group.
///
/// The store doubles as the parameter-group registry: group membership is a
/// property of every entry, so groups are disjoint and cover all parameters
/// by construction. Frozen groups are bound as constants on every tape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        value: Tensor<f32>,
    ) -> Result<ParamId, KernelError> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(KernelError::DuplicateParam { name });
        }
        if !value.is_finite() {
            return Err(KernelError::NonFinite {
                op: format!("param {name}"),
            });
        }
        self.entries.push(ParamEntry {
            name,
            group: group.into(),
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].value
    }

    /// Sorted, de-duplicated group names.
    pub fn groups(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.group.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn members(&self, group: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group_of(id) == group).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces the frozen set. Unknown names are rejected and nothing changes.
    pub fn set_frozen<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<(), KernelError> {
        let known = self.groups();
        for g in groups {
            if !known.contains(&g.as_ref()) {
                return Err(KernelError::UnknownGroup {
                    name: g.as_ref().to_string(),
                    valid: known.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        self.frozen = groups.iter().map(|g| g.as_ref().to_string()).collect();
        Ok(())
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen_group(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen.contains(self.group_of(id))
    }

    /// CRC32 over the raw bytes of every tensor in a group.
    pub fn group_checksum(&self, group: &str) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for id in self.members(group) {
            for v in self.tensor(id).data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_rejects_unknown_group() {
        let mut s = ParamStore::new();
        s.add("a.w", "texture.albedo", Tensor::zeros(&[2, 2])).unwrap();
        s.add("b.w", "texture.shading", Tensor::zeros(&[2])).unwrap();
        let err = s.set_frozen(&["texture.core"]).unwrap_err();
        match err {
            KernelError::UnknownGroup { valid, .. } => {
                assert_eq!(valid, vec!["texture.albedo", "texture.shading"])
            }
            e => panic!("unexpected {e:?}"),
        }
        s.set_frozen(&["texture.albedo"]).unwrap();
        assert!(!s.is_trainable(ParamId(0)));
        assert!(s.is_trainable(ParamId(1)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("x", "g", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("x", "g", Tensor::zeros(&[1])).is_err());
    }
}
