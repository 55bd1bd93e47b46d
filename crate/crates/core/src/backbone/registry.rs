use std::fmt;

use thiserror::Error;

use crate::autograd::{BatchStats, RunningStats};
use crate::tensor::Tensor;

/// What a stored tensor is. The numeric tag is part of the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    ConvWeight,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    LinearWeight,
    LinearBias,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::ConvWeight,
        Role::BnGamma,
        Role::BnBeta,
        Role::BnRunningMean,
        Role::BnRunningVar,
        Role::LinearWeight,
        Role::LinearBias,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Running statistics are buffers, not trained parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, Role::BnRunningMean | Role::BnRunningVar)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::ConvWeight => "conv_weight",
            Role::BnGamma => "bn_gamma",
            Role::BnBeta => "bn_beta",
            Role::BnRunningMean => "bn_running_mean",
            Role::BnRunningVar => "bn_running_var",
            Role::LinearWeight => "linear_weight",
            Role::LinearBias => "linear_bias",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    /// Layer path, e.g. `stage4.block1.bn2`. A layer owns one entry per role.
    pub path: String,
    pub role: Role,
    pub tensor: Tensor,
}

impl Entry {
    pub fn key(&self) -> (&str, Role) {
        (&self.path, self.role)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("duplicate entry {path} ({role})")]
    Duplicate { path: String, role: Role },
    #[error("no entry {path} ({role})")]
    Missing { path: String, role: Role },
}

/// Ordered parameter store. Iteration order is insertion order, which the
/// builders keep topological: stem, stages in depth order, then head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: Vec<Entry>,
    init_snapshot: Option<Vec<Entry>>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(entries: Vec<Entry>, init_snapshot: Option<Vec<Entry>>) -> Result<Self, RegistryError> {
        let mut reg = Self::new();
        for e in entries {
            reg.insert(e.path, e.role, e.tensor)?;
        }
        if let Some(snap) = &init_snapshot {
            let mut seen = std::collections::HashSet::new();
            for e in snap {
                if !seen.insert((e.path.as_str(), e.role)) {
                    return Err(RegistryError::Duplicate { path: e.path.clone(), role: e.role });
                }
            }
        }
        reg.init_snapshot = init_snapshot;
        Ok(reg)
    }

    pub fn insert(&mut self, path: impl Into<String>, role: Role, tensor: Tensor) -> Result<(), RegistryError> {
        let path = path.into();
        if self.position(&path, role).is_some() {
            return Err(RegistryError::Duplicate { path, role });
        }
        self.entries.push(Entry { path, role, tensor });
        Ok(())
    }

    fn position(&self, path: &str, role: Role) -> Option<usize> {
        self.entries.iter().position(|e| e.path == path && e.role == role)
    }

    pub fn get(&self, path: &str, role: Role) -> Result<&Tensor, RegistryError> {
        self.position(path, role)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| RegistryError::Missing { path: path.into(), role })
    }

    pub fn get_mut(&mut self, path: &str, role: Role) -> Result<&mut Tensor, RegistryError> {
        match self.position(path, role) {
            Some(i) => Ok(&mut self.entries[i].tensor),
            None => Err(RegistryError::Missing { path: path.into(), role }),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Entry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct layer paths in registry order.
    pub fn layer_paths(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if out.last() != Some(&e.path.as_str()) && !out.contains(&e.path.as_str()) {
                out.push(&e.path);
            }
        }
        out
    }

    pub fn layer_entries<'a>(&'a self, path: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.path == path)
    }

    pub fn remove_where(&mut self, pred: impl Fn(&Entry) -> bool) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| !pred(e));
        before - self.entries.len()
    }

    pub fn init_snapshot(&self) -> Option<&[Entry]> {
        self.init_snapshot.as_deref()
    }

    /// Records the current entries as the initial state.
    pub fn capture_snapshot(&mut self) {
        self.init_snapshot = Some(self.entries.clone());
    }

    pub fn set_snapshot(&mut self, snapshot: Option<Vec<Entry>>) {
        self.init_snapshot = snapshot;
    }

    pub fn snapshot_get(&self, path: &str, role: Role) -> Option<&Tensor> {
        self.init_snapshot
            .as_ref()?
            .iter()
            .find(|e| e.path == path && e.role == role)
            .map(|e| &e.tensor)
    }

    pub fn running_stats(&self, bn_path: &str) -> Result<RunningStats, RegistryError> {
        Ok(RunningStats {
            mean: self.get(bn_path, Role::BnRunningMean)?.data().to_vec(),
            var: self.get(bn_path, Role::BnRunningVar)?.data().to_vec(),
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)], momentum: f32) -> Result<(), RegistryError> {
        for (path, stats) in updates {
            let mut rs = self.running_stats(path)?;
            rs.update(stats, momentum);
            self.get_mut(path, Role::BnRunningMean)?.data_mut().copy_from_slice(&rs.mean);
            self.get_mut(path, Role::BnRunningVar)?.data_mut().copy_from_slice(&rs.var);
        }
        Ok(())
    }

    /// Bitwise equality of the live entries, ignoring the snapshot.
    pub fn entries_bit_eq(&self, other: &ParamRegistry) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.path == b.path && a.role == b.role && a.tensor.bit_eq(&b.tensor)
            })
    }

    /// Bitwise equality including the snapshot.
    pub fn bit_eq(&self, other: &ParamRegistry) -> bool {
        let snap_eq = match (&self.init_snapshot, &other.init_snapshot) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.path == y.path && x.role == y.role && x.tensor.bit_eq(&y.tensor))
            }
            _ => false,
        };
        snap_eq && self.entries_bit_eq(other)
    }

    /// Stable 64-bit digest of one entry's payload.
    pub fn tensor_digest(t: &Tensor) -> u64 {
        let mut h = crate::rng::stable_hash(&format!("{:?}", t.shape()));
        for v in t.data() {
            h = (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}
