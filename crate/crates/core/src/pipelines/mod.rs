//! Training and evaluation procedures.
//!
//! Supervised and contrastive pre-training produce head-free backbones;
//! [`evaluate`] then runs independent few-shot episodes with one of the
//! fine-tuning methods. Every episode derives its randomness from
//! `(seed, episode index)`, so results do not depend on scheduling.

mod eval;
mod train;

pub use eval::{
    ablate_how, ablate_where, evaluate, finetune_episode, fit_linear_probe, frozen_features, stage_probe, surgery_seed,
    EpisodeOutcome, EvalParams, Evaluation,
};
pub use train::{pretrain, simclr_pretrain, PretrainOutcome, SimclrOutcome};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, ParamRegistry, RegistryError, Role};
use crate::data::{AugmentPolicy, DataError};
use crate::metrics::MetricsError;
use crate::optim::{OptimError, Sgd};
use crate::rerand::{RerandError, RerandPolicy};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String, last_good: Box<ParamRegistry> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Rerand(#[from] RerandError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<RegistryError> for PipelineError {
    fn from(e: RegistryError) -> Self {
        PipelineError::Backbone(e.into())
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

/// Pre-training hyperparameters, shared by the supervised and contrastive
/// procedures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Fractions of `epochs` at which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f32,
    /// NT-Xent temperature.
    pub temperature: f32,
    /// Output width of the projection head.
    pub proj_dim: usize,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl TrainConfig {
    pub fn supervised() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_at: vec![2.0 / 3.0, 5.0 / 6.0],
            decay_factor: 0.1,
            temperature: 0.5,
            proj_dim: 32,
            augment: AugmentPolicy::CROP_FLIP,
            seed: 0,
        }
    }

    pub fn simclr() -> Self {
        Self { epochs: 10, lr: 0.05, augment: AugmentPolicy::CONTRASTIVE, ..Self::supervised() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size < 2 {
            return Err(config_err("batch_size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(config_err("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(config_err("temperature must be positive"));
        }
        if self.proj_dim == 0 || !(self.decay_factor > 0.0) {
            return Err(config_err("proj_dim and decay_factor must be positive"));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(config_err("decay_at entries must be fractions in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self.decay_at.iter().filter(|&&f| epoch >= (f * self.epochs as f64).floor() as usize).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

/// Per-episode fine-tuning. Every step uses the whole support set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 100, lr: 0.01, momentum: 0.9, weight_decay: 0.0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(config_err("fine-tuning needs lr ≥ 0, momentum in [0, 1), weight_decay ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    Transfer,
    Refine,
    TransferRrSimclr,
    SimclrOnly,
    TransferSimclr,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Linear, Method::Transfer, Method::Refine, Method::TransferRrSimclr, Method::SimclrOnly, Method::TransferSimclr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Transfer => "transfer",
            Method::Refine => "refine",
            Method::TransferRrSimclr => "transfer_rr_simclr",
            Method::SimclrOnly => "simclr_only",
            Method::TransferSimclr => "transfer_simclr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s.trim()).ok_or_else(|| config_err(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    HeadOnly,
    FullNetwork,
}

/// A fine-tuning method with its surgery and trainable scope.
///
/// The contrastive variants differ from `transfer` only in the checkpoint
/// they start from; any surgery they involve happens before contrastive
/// training, so here they carry no policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub rerand: Option<RerandPolicy>,
    pub scope: Scope,
}

impl MethodSpec {
    pub fn linear() -> Self {
        Self { method: Method::Linear, rerand: None, scope: Scope::HeadOnly }
    }

    pub fn transfer() -> Self {
        Self { method: Method::Transfer, rerand: None, scope: Scope::FullNetwork }
    }

    pub fn refine(policy: RerandPolicy) -> Self {
        Self { method: Method::Refine, rerand: Some(policy), scope: Scope::FullNetwork }
    }

    pub fn full(method: Method) -> Self {
        Self { method, rerand: None, scope: Scope::FullNetwork }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mismatch = |what: &str| Err(config_err(format!("method {}: {what}", self.method)));
        match (self.method, self.scope) {
            (Method::Linear, Scope::FullNetwork) => return mismatch("linear probing trains the head only"),
            (Method::Linear, _) => {}
            (_, Scope::HeadOnly) => return mismatch("this method fine-tunes the full network"),
            _ => {}
        }
        let noop = self.rerand.as_ref().is_none_or(RerandPolicy::is_empty);
        match self.method {
            Method::Refine if self.rerand.is_none() => mismatch("refine needs a re-randomization policy"),
            Method::Refine => Ok(()),
            _ if !noop => mismatch("only refine applies a re-randomization policy"),
            _ => Ok(()),
        }
    }
}

/// One SGD step over the gradients returned by a bound forward pass.
pub(crate) fn apply_gradients(
    registry: &mut ParamRegistry,
    grads: Vec<(String, Role, Tensor)>,
    opt: &mut Sgd,
) -> Result<(), OptimError> {
    let mut by_key: HashMap<(String, Role), Tensor> = grads.into_iter().map(|(p, r, g)| ((p, r), g)).collect();
    let mut items: Vec<(String, &mut Tensor, Tensor)> = Vec::with_capacity(by_key.len());
    for e in registry.entries_mut() {
        if let Some(g) = by_key.remove(&(e.path.clone(), e.role)) {
            items.push((format!("{}:{}", e.path, e.role.name()), &mut e.tensor, g));
        }
    }
    let mut refs: Vec<(&str, &mut Tensor, &Tensor)> =
        items.iter_mut().map(|(name, t, g)| (name.as_str(), &mut **t, &*g)).collect();
    opt.step(&mut refs)
}

/// Index of the largest logit per row (first on ties).
pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rerand::Distribution;

    #[test]
    fn method_scope_rules() {
        MethodSpec::linear().validate().unwrap();
        MethodSpec::transfer().validate().unwrap();
        let p = RerandPolicy::new(vec!["stage4.*".into()], Distribution::Uniform, 0);
        MethodSpec::refine(p.clone()).validate().unwrap();
        assert!(MethodSpec { scope: Scope::FullNetwork, ..MethodSpec::linear() }.validate().is_err());
        assert!(MethodSpec { scope: Scope::HeadOnly, ..MethodSpec::transfer() }.validate().is_err());
        assert!(MethodSpec { rerand: None, ..MethodSpec::refine(p.clone()) }.validate().is_err());
        assert!(MethodSpec { rerand: Some(p), ..MethodSpec::transfer() }.validate().is_err());
        let noop = RerandPolicy::new(vec![], Distribution::Uniform, 0);
        MethodSpec { rerand: Some(noop), ..MethodSpec::transfer() }.validate().unwrap();
    }

    #[test]
    fn step_decay_schedule() {
        let c = TrainConfig { epochs: 30, ..TrainConfig::supervised() };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(19), 0.1);
        assert!((c.lr_at(20) - 0.01).abs() < 1e-9);
        assert!((c.lr_at(25) - 0.001).abs() < 1e-9);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("maml".parse::<Method>().is_err());
    }
}
