//! Re-randomization of selected backbone layers.
//!
//! A [`RerandPolicy`] names layers through path globs and picks the
//! distribution their convolution weights are redrawn from. Batch-norm layers
//! caught by the same selectors get scale one and shift zero. The `Lottery`
//! distribution instead restores matched entries from the initial-state
//! snapshot taken when the backbone was built.

mod init;
mod policy;

pub use init::{
    fan_in, kaiming_uniform, kaiming_uniform_bound, normal_init, normal_std, orthogonal_init, sparse_init,
    sparse_zeros_per_column, InitError,
};
pub use policy::{glob_match, validate_glob, Distribution, LayerPart, PolicyPreset, RerandPolicy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{ParamRegistry, Role};
use crate::rng;
use crate::tensor::Tensor;

/// Fraction of zeroed rows per column for the sparse distribution.
pub const SPARSE_FRACTION: f64 = 0.2;
/// Standard deviation of the sparse distribution's non-zero entries.
pub const SPARSE_STD: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RerandError {
    #[error("policy matches no backbone layer (selectors {0:?})")]
    EmptyMatch(Vec<String>),
    #[error("lottery needs the initial-state snapshot, which this registry lacks")]
    NoSnapshot,
    #[error("snapshot has no entry {path} ({role})")]
    SnapshotEntry { path: String, role: Role },
    #[error("malformed selector `{0}`")]
    BadGlob(String),
    #[error("cannot parse policy: {0}")]
    Parse(String),
    #[error(transparent)]
    Init(#[from] InitError),
}

/// Layers touched by one surgery, in registry order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurgeryReport {
    pub touched: Vec<String>,
}

impl SurgeryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.touched).expect("string list serializes")
    }
}

/// Layer paths selected by `policy`, in registry order. Head layers are never
/// selected; shortcut layers only when the policy allows them.
pub fn resolve_policy(policy: &RerandPolicy, registry: &ParamRegistry) -> Result<Vec<String>, RerandError> {
    for s in &policy.selectors {
        validate_glob(s)?;
    }
    Ok(registry
        .layer_paths()
        .into_iter()
        .filter(|p| !p.starts_with("head."))
        .filter(|p| policy.include_shortcut || !p.contains(".shortcut."))
        .filter(|p| policy.selectors.iter().any(|s| glob_match(s, p)))
        .map(str::to_string)
        .collect())
}

fn redraw(distribution: Distribution, shape: &[usize], rng: &mut rng::Rng) -> Result<Tensor, InitError> {
    match distribution {
        Distribution::Uniform => kaiming_uniform(shape, fan_in(shape), rng),
        Distribution::Normal => normal_init(shape, fan_in(shape), rng),
        Distribution::Orthogonal => orthogonal_init(shape, rng),
        Distribution::Sparse => sparse_init(shape, SPARSE_FRACTION, SPARSE_STD, rng),
        Distribution::Lottery => unreachable!("lottery restores, it does not draw"),
    }
}

/// Applies `policy` in place and reports the layers it touched. Every entry
/// outside the matched layers is left bit-identical.
pub fn rerandomize(registry: &mut ParamRegistry, policy: &RerandPolicy) -> Result<SurgeryReport, RerandError> {
    let touched = resolve_policy(policy, registry)?;
    if touched.is_empty() {
        return Err(RerandError::EmptyMatch(policy.selectors.clone()));
    }
    if policy.distribution == Distribution::Lottery {
        if registry.init_snapshot().is_none() {
            return Err(RerandError::NoSnapshot);
        }
        let mut restored = Vec::new();
        for path in &touched {
            for e in registry.layer_entries(path) {
                let init = registry
                    .snapshot_get(path, e.role)
                    .ok_or_else(|| RerandError::SnapshotEntry { path: path.clone(), role: e.role })?;
                restored.push((path.clone(), e.role, init.clone()));
            }
        }
        for (path, role, t) in restored {
            *registry.get_mut(&path, role).expect("entry exists") = t;
        }
        return Ok(SurgeryReport { touched });
    }

    for path in &touched {
        let roles: Vec<Role> = registry.layer_entries(path).map(|e| e.role).collect();
        for role in roles {
            let t = registry.get_mut(path, role).expect("entry exists");
            match role {
                Role::ConvWeight => {
                    // keyed by (seed, path) only, so selector order is irrelevant
                    let mut r = rng::stream(policy.seed, &format!("rerand/{path}"), 0);
                    *t = redraw(policy.distribution, t.shape(), &mut r)?;
                }
                Role::BnGamma => t.data_mut().fill(1.0),
                Role::BnBeta => t.data_mut().fill(0.0),
                Role::BnRunningMean if policy.reset_running_stats => t.data_mut().fill(0.0),
                Role::BnRunningVar if policy.reset_running_stats => t.data_mut().fill(1.0),
                _ => {}
            }
        }
    }
    Ok(SurgeryReport { touched })
}
