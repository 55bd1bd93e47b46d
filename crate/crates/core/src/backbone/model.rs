use std::collections::HashMap;

use super::config::BackboneConfig;
use super::head::{Head, HeadKind};
use super::registry::{Entry, ParamRegistry, Role};
use super::BackboneError;
use crate::autograd::{BatchStats, BnMode, Tape, Var};
use crate::rerand::{fan_in, kaiming_uniform};
use crate::rng;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
/// Weight of the new batch statistic in the running average.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A backbone layout together with its parameters and optional head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    registry: ParamRegistry,
    head: Option<Head>,
}

struct BlockSpec {
    prefix: String,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
}

impl BlockSpec {
    fn has_shortcut(&self) -> bool {
        self.in_ch != self.out_ch || self.stride != 1
    }
}

fn blocks(config: &BackboneConfig) -> Vec<BlockSpec> {
    let mut out = Vec::new();
    let mut in_ch = config.stem_channels;
    for (s, (&ch, &n)) in config.stage_channels.iter().zip(&config.blocks_per_stage).enumerate() {
        for b in 0..n {
            out.push(BlockSpec {
                prefix: format!("stage{}.block{}", s + 1, b + 1),
                in_ch,
                out_ch: ch,
                stride: if b == 0 { BackboneConfig::stage_stride(s) } else { 1 },
            });
            in_ch = ch;
        }
    }
    out
}

fn init_rng(seed: u64, path: &str) -> rng::Rng {
    rng::stream(seed, &format!("init/{path}"), 0)
}

fn push_conv(reg: &mut ParamRegistry, path: &str, shape: [usize; 4], seed: u64) -> Result<(), BackboneError> {
    let w = kaiming_uniform(&shape, fan_in(&shape), &mut init_rng(seed, path))?;
    reg.insert(path, Role::ConvWeight, w)?;
    Ok(())
}

fn push_bn(reg: &mut ParamRegistry, path: &str, channels: usize) -> Result<(), BackboneError> {
    reg.insert(path, Role::BnGamma, Tensor::ones(&[channels]))?;
    reg.insert(path, Role::BnBeta, Tensor::zeros(&[channels]))?;
    reg.insert(path, Role::BnRunningMean, Tensor::zeros(&[channels]))?;
    reg.insert(path, Role::BnRunningVar, Tensor::ones(&[channels]))?;
    Ok(())
}

fn push_linear(reg: &mut ParamRegistry, path: &str, out: usize, inp: usize, seed: u64) -> Result<(), BackboneError> {
    let w = kaiming_uniform(&[out, inp], inp, &mut init_rng(seed, path))?;
    reg.insert(path, Role::LinearWeight, w)?;
    reg.insert(path, Role::LinearBias, Tensor::zeros(&[out]))?;
    Ok(())
}

/// Tape leaves for the trainable entries of a registry.
pub struct Bound {
    vars: HashMap<(String, Role), Var>,
    order: Vec<(String, Role)>,
}

impl Bound {
    /// Binds every trainable-role entry; `requires_grad(entry)` decides which
    /// of them receive gradients.
    pub fn bind(tape: &mut Tape, registry: &ParamRegistry, requires_grad: impl Fn(&Entry) -> bool) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for e in registry.entries().iter().filter(|e| e.role.is_trainable()) {
            let v = tape.leaf(e.tensor.clone(), requires_grad(e));
            vars.insert((e.path.clone(), e.role), v);
            order.push((e.path.clone(), e.role));
        }
        Self { vars, order }
    }

    pub fn var(&self, path: &str, role: Role) -> Result<Var, BackboneError> {
        self.vars.get(&(path.to_string(), role)).copied().ok_or_else(|| {
            super::RegistryError::Missing { path: path.to_string(), role }.into()
        })
    }

    /// Gradients of bound entries that received one, in registry order.
    pub fn gradients(&self, tape: &mut Tape) -> Vec<(String, Role, Tensor)> {
        let mut out = Vec::new();
        for key in &self.order {
            let v = self.vars[key];
            if let Some(g) = tape.take_grad(v) {
                out.push((key.0.clone(), key.1, g));
            }
        }
        out
    }
}

/// Result of a backbone forward pass.
pub struct Features {
    /// Output of each stage, before pooling.
    pub stages: [Var; 4],
    /// Global average pool of the last stage, `N×d`.
    pub embedding: Var,
    /// Train-mode batch statistics per batch-norm path.
    pub bn_updates: Vec<(String, BatchStats)>,
}

struct Pass<'a> {
    tape: &'a mut Tape,
    bound: &'a Bound,
    registry: &'a ParamRegistry,
    mode: Mode,
    updates: Vec<(String, BatchStats)>,
}

impl Pass<'_> {
    fn conv(&mut self, x: Var, path: &str, stride: usize, pad: usize) -> Result<Var, BackboneError> {
        let w = self.bound.var(path, Role::ConvWeight)?;
        Ok(self.tape.conv2d(x, w, stride, pad)?)
    }

    fn bn(&mut self, x: Var, path: &str) -> Result<Var, BackboneError> {
        let g = self.bound.var(path, Role::BnGamma)?;
        let b = self.bound.var(path, Role::BnBeta)?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, g, b, BnMode::Train { eps: BN_EPS })?;
                self.updates.push((path.to_string(), stats.expect("train mode reports stats")));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.registry.get(path, Role::BnRunningMean)?.data();
                let var = self.registry.get(path, Role::BnRunningVar)?.data();
                let (y, _) = self.tape.batch_norm(x, g, b, BnMode::Eval { mean, var, eps: BN_EPS })?;
                Ok(y)
            }
        }
    }

    fn block(&mut self, x: Var, spec: &BlockSpec) -> Result<Var, BackboneError> {
        let p = &spec.prefix;
        let h = self.conv(x, &format!("{p}.conv1"), spec.stride, 1)?;
        let h = self.bn(h, &format!("{p}.bn1"))?;
        let h = self.tape.relu(h);
        let h = self.conv(h, &format!("{p}.conv2"), 1, 1)?;
        let h = self.bn(h, &format!("{p}.bn2"))?;
        let skip = if spec.has_shortcut() {
            let s = self.conv(x, &format!("{p}.shortcut.conv"), spec.stride, 0)?;
            self.bn(s, &format!("{p}.shortcut.bn"))?
        } else {
            x
        };
        let sum = self.tape.add(h, skip)?;
        Ok(self.tape.relu(sum))
    }
}

impl Backbone {
    /// Builds a freshly initialized backbone and records its initial state.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let k = config.stem_kernel;
        push_conv(&mut reg, "stem.conv", [config.stem_channels, config.input_channels, k, k], seed)?;
        push_bn(&mut reg, "stem.bn", config.stem_channels)?;
        for spec in blocks(&config) {
            let p = &spec.prefix;
            push_conv(&mut reg, &format!("{p}.conv1"), [spec.out_ch, spec.in_ch, 3, 3], seed)?;
            push_bn(&mut reg, &format!("{p}.bn1"), spec.out_ch)?;
            push_conv(&mut reg, &format!("{p}.conv2"), [spec.out_ch, spec.out_ch, 3, 3], seed)?;
            push_bn(&mut reg, &format!("{p}.bn2"), spec.out_ch)?;
            if spec.has_shortcut() {
                push_conv(&mut reg, &format!("{p}.shortcut.conv"), [spec.out_ch, spec.in_ch, 1, 1], seed)?;
                push_bn(&mut reg, &format!("{p}.shortcut.bn"), spec.out_ch)?;
            }
        }
        reg.capture_snapshot();
        Ok(Self { config, registry: reg, head: None })
    }

    /// Wraps an existing registry, inferring layout and head from its paths.
    pub fn from_registry(registry: ParamRegistry, input_size: usize) -> Result<Self, BackboneError> {
        let config = BackboneConfig::infer(&registry, input_size)?;
        config.validate()?;
        let head = Head::infer(registry.layer_paths(), |p| {
            registry.get(p, Role::LinearWeight).map(|w| w.shape()[0]).unwrap_or(0)
        });
        Ok(Self { config, registry, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.registry
    }

    pub fn into_registry(self) -> ParamRegistry {
        self.registry
    }

    pub fn head(&self) -> Option<Head> {
        self.head
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Entries belonging to the backbone proper (everything but `head.*`).
    pub fn backbone_entries(&self) -> impl Iterator<Item = &Entry> {
        self.registry.entries().iter().filter(|e| !e.path.starts_with("head."))
    }

    pub fn attach_head(&mut self, kind: HeadKind, out_dim: usize, seed: u64) -> Result<(), BackboneError> {
        if let Some(h) = self.head {
            return Err(BackboneError::HeadPresent(h.kind));
        }
        let d = self.embedding_dim();
        match kind {
            HeadKind::LinearClassifier => push_linear(&mut self.registry, "head.fc", out_dim, d, seed)?,
            HeadKind::ProjectionMlp => {
                push_linear(&mut self.registry, "head.proj1", d, d, seed)?;
                push_linear(&mut self.registry, "head.proj2", out_dim, d, seed)?;
            }
            HeadKind::AuxProbe { stage } => {
                if !(1..=4).contains(&stage) {
                    return Err(BackboneError::ProbeStage(stage));
                }
                let c = self.config.stage_channels[stage - 1];
                push_linear(&mut self.registry, &format!("head.probe{stage}"), out_dim, c, seed)?;
            }
        }
        self.head = Some(Head { kind, out_dim });
        Ok(())
    }

    pub fn detach_head(&mut self) -> Result<Head, BackboneError> {
        let head = self.head.take().ok_or(BackboneError::NoHead)?;
        self.registry.remove_where(|e| e.path.starts_with("head."));
        Ok(head)
    }

    /// Runs the stem and four stages. In train mode the batch-norm statistics
    /// are returned rather than applied, so the registry is never touched.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<Features, BackboneError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(BackboneError::InputShape { got: shape, channels: self.config.input_channels });
        }
        self.config.spatial_extents(shape[2].min(shape[3]))?;
        let mut pass = Pass { tape, bound, registry: &self.registry, mode, updates: Vec::new() };
        let h = pass.conv(x, "stem.conv", self.config.stem_stride(), self.config.stem_padding())?;
        let h = pass.bn(h, "stem.bn")?;
        let h = pass.tape.relu(h);
        let mut h = pass.tape.maxpool2x2(h)?;
        let mut stages = [h; 4];
        let specs = blocks(&self.config);
        let mut idx = 0;
        for (s, &n) in self.config.blocks_per_stage.iter().enumerate() {
            for spec in &specs[idx..idx + n] {
                h = pass.block(h, spec)?;
            }
            idx += n;
            stages[s] = h;
        }
        let embedding = pass.tape.global_avg_pool(h)?;
        Ok(Features { stages, embedding, bn_updates: pass.updates })
    }

    /// Applies the attached head: logits for classifiers and probes, the
    /// projection for the MLP.
    pub fn head_forward(&self, tape: &mut Tape, bound: &Bound, feats: &Features) -> Result<Var, BackboneError> {
        let head = self.head.ok_or(BackboneError::NoHead)?;
        let lin = |tape: &mut Tape, x: Var, path: &str| -> Result<Var, BackboneError> {
            let w = bound.var(path, Role::LinearWeight)?;
            let b = bound.var(path, Role::LinearBias)?;
            Ok(tape.linear(x, w, Some(b))?)
        };
        match head.kind {
            HeadKind::LinearClassifier => lin(tape, feats.embedding, "head.fc"),
            HeadKind::ProjectionMlp => {
                let h = lin(tape, feats.embedding, "head.proj1")?;
                let h = tape.relu(h);
                lin(tape, h, "head.proj2")
            }
            HeadKind::AuxProbe { stage } => {
                let pooled = tape.global_avg_pool(feats.stages[stage - 1])?;
                lin(tape, pooled, &format!("head.probe{stage}"))
            }
        }
    }

    fn eval_pass<R>(&self, x: &Tensor, f: impl FnOnce(&Tape, &Features) -> R) -> Result<R, BackboneError> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.registry, |_| false);
        let xv = tape.leaf(x.clone(), false);
        let feats = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        Ok(f(&tape, &feats))
    }

    /// Eval-mode embeddings, `N×d`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, BackboneError> {
        self.eval_pass(x, |tape, f| tape.value(f.embedding).clone())
    }

    /// Eval-mode output maps of the four stages.
    pub fn stage_outputs(&self, x: &Tensor) -> Result<[Tensor; 4], BackboneError> {
        self.eval_pass(x, |tape, f| f.stages.map(|v| tape.value(v).clone()))
    }

    /// Eval-mode stage outputs, each average-pooled to `N×C_s`.
    pub fn pooled_stage_features(&self, x: &Tensor) -> Result<[Tensor; 4], BackboneError> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.registry, |_| false);
        let xv = tape.leaf(x.clone(), false);
        let feats = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        let mut out = Vec::with_capacity(4);
        for (s, &v) in feats.stages.iter().enumerate() {
            // the last stage's pooled map is the embedding itself
            let pooled = if s == 3 { feats.embedding } else { tape.global_avg_pool(v)? };
            out.push(tape.value(pooled).clone());
        }
        Ok(out.try_into().expect("four stages"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_embedding_dim_and_shortcuts() {
        let b = Backbone::build(BackboneConfig::desk(), 0).unwrap();
        assert_eq!(b.embedding_dim(), 128);
        let paths = b.registry().layer_paths();
        assert!(!paths.contains(&"stage1.block1.shortcut.conv"));
        for s in 2..=4 {
            assert!(paths.contains(&format!("stage{s}.block1.shortcut.conv").as_str()));
        }
    }

    #[test]
    fn attach_then_detach_restores_registry() {
        let mut b = Backbone::build(BackboneConfig::desk(), 1).unwrap();
        let before = b.registry().clone();
        b.attach_head(HeadKind::LinearClassifier, 20, 9).unwrap();
        assert!(matches!(
            b.attach_head(HeadKind::LinearClassifier, 20, 9),
            Err(BackboneError::HeadPresent(_))
        ));
        b.detach_head().unwrap();
        assert!(b.registry().bit_eq(&before));
        assert!(matches!(b.detach_head(), Err(BackboneError::NoHead)));
    }

    #[test]
    fn projection_head_has_two_linear_layers() {
        let mut b = Backbone::build(BackboneConfig::desk(), 1).unwrap();
        let n = b.registry().len();
        b.attach_head(HeadKind::ProjectionMlp, 32, 2).unwrap();
        assert_eq!(b.registry().len(), n + 4);
        assert_eq!(b.registry().get("head.proj1", Role::LinearWeight).unwrap().shape(), &[128, 128]);
        assert_eq!(b.registry().get("head.proj2", Role::LinearWeight).unwrap().shape(), &[32, 128]);
    }

    #[test]
    fn aux_probe_matches_stage_width() {
        let mut b = Backbone::build(BackboneConfig::desk(), 1).unwrap();
        b.attach_head(HeadKind::AuxProbe { stage: 2 }, 5, 2).unwrap();
        assert_eq!(b.registry().get("head.probe2", Role::LinearWeight).unwrap().shape(), &[5, 32]);
        let mut c = Backbone::build(BackboneConfig::desk(), 1).unwrap();
        assert!(c.attach_head(HeadKind::AuxProbe { stage: 5 }, 5, 2).is_err());
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let b = Backbone::build(BackboneConfig::desk(), 0).unwrap();
        assert!(matches!(
            b.features(&Tensor::zeros(&[1, 1, 32, 32])),
            Err(BackboneError::InputShape { .. })
        ));
    }

    #[test]
    fn registry_round_trips_through_inference() {
        let mut b = Backbone::build(BackboneConfig::desk().with_resnet18_blocks(), 4).unwrap();
        b.attach_head(HeadKind::ProjectionMlp, 16, 0).unwrap();
        let again = Backbone::from_registry(b.registry().clone(), 32).unwrap();
        assert_eq!(again.config(), b.config());
        assert_eq!(again.head(), b.head());
    }
}
