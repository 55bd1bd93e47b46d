use rand::seq::SliceRandom;

use super::{accuracy, apply_gradients, config_err, PipelineError, TrainConfig};
use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, Bound, HeadKind, Mode, BN_MOMENTUM};
use crate::data::{augment, two_views, Dataset, Normalizer, Split};
use crate::optim::{OptimError, Sgd};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Head removed; initial-state snapshot kept.
    pub backbone: Backbone,
    pub epoch_losses: Vec<f32>,
    /// Eval-mode accuracy on the un-augmented training images.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SimclrOutcome {
    pub backbone: Backbone,
    pub epoch_losses: Vec<f32>,
    /// Loss of the very first batch, before any update.
    pub first_batch_loss: Option<f32>,
}

enum StepError {
    NonFinite(String),
    Other(PipelineError),
}

impl<E: Into<PipelineError>> From<E> for StepError {
    fn from(e: E) -> Self {
        StepError::Other(e.into())
    }
}

/// Forward in train mode, `loss_of(head output)`, backward, SGD update, then
/// fold in the batch-norm statistics. Returns the pre-update loss.
fn train_step(
    model: &mut Backbone,
    x: Tensor,
    opt: &mut Sgd,
    loss_of: impl FnOnce(&mut Tape, Var) -> Result<Var, crate::TensorError>,
) -> Result<f32, StepError> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, model.registry(), |_| true);
    let xv = tape.leaf(x, false);
    let feats = model.forward(&mut tape, &bound, xv, Mode::Train)?;
    let out = model.head_forward(&mut tape, &bound, &feats)?;
    let loss = loss_of(&mut tape, out)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(StepError::NonFinite(format!("loss is {value}")));
    }
    tape.backward(loss)?;
    let grads = bound.gradients(&mut tape);
    match apply_gradients(model.registry_mut(), grads, opt) {
        Err(OptimError::NonFiniteGrad(p)) => return Err(StepError::NonFinite(format!("gradient of {p}"))),
        r => r?,
    }
    model.registry_mut().apply_bn_updates(&feats.bn_updates, BN_MOMENTUM)?;
    Ok(value)
}

fn batches(n: usize, batch: usize, seed: u64, purpose: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, purpose, epoch as u64));
    // a trailing batch of one cannot be batch-normalized
    order.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

fn diverged(last_good: &Backbone, epoch: usize, reason: String) -> PipelineError {
    let mut good = last_good.clone();
    if good.head().is_some() {
        let _ = good.detach_head();
    }
    PipelineError::Diverged { epoch, reason, last_good: Box::new(good.into_registry()) }
}

/// Supervised pre-training of a fresh backbone (built from `cfg.seed`) with a
/// `|C_B|`-way linear classifier that is removed afterwards.
pub fn pretrain(
    layout: &BackboneConfig,
    cfg: &TrainConfig,
    ds: &Dataset,
    norm: &Normalizer,
) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate()?;
    if ds.split != Split::Base {
        return Err(config_err("pre-training runs on the base split"));
    }
    if ds.len() < 2 {
        return Err(config_err("pre-training needs at least two images"));
    }
    let mut model = Backbone::build(layout.clone(), cfg.seed)?;
    model.attach_head(HeadKind::LinearClassifier, ds.num_classes(), cfg.seed)?;
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        opt.lr = cfg.lr_at(epoch);
        let mut total = 0f64;
        let mut count = 0usize;
        for (b, idx) in batches(ds.len(), cfg.batch_size, cfg.seed, "pretrain/order", epoch).into_iter().enumerate() {
            let imgs: Vec<Vec<u8>> = idx
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let key = (epoch * ds.len() + b * cfg.batch_size + j) as u64;
                    augment(ds.image(i), c, h, w, &cfg.augment, &mut rng::stream(cfg.seed, "pretrain/augment", key))
                })
                .collect();
            let refs: Vec<&[u8]> = imgs.iter().map(Vec::as_slice).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i] as usize).collect();
            let x = norm.tensor(&refs, c, h, w);
            match train_step(&mut model, x, &mut opt, |tape, logits| tape.softmax_cross_entropy(logits, &labels)) {
                Ok(l) => {
                    total += l as f64 * idx.len() as f64;
                    count += idx.len();
                }
                Err(StepError::NonFinite(reason)) => return Err(diverged(&last_good, epoch, reason)),
                Err(StepError::Other(e)) => return Err(e),
            }
        }
        epoch_losses.push((total / count.max(1) as f64) as f32);
    }

    let train_accuracy = eval_accuracy(&model, ds, norm)?;
    model.detach_head()?;
    Ok(PretrainOutcome { backbone: model, epoch_losses, train_accuracy })
}

/// Eval-mode accuracy of an attached classifier on the whole dataset.
fn eval_accuracy(model: &Backbone, ds: &Dataset, norm: &Normalizer) -> Result<f64, PipelineError> {
    let mut hits = 0.0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(100) {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, model.registry(), |_| false);
        let x = tape.leaf(norm.batch(ds, chunk), false);
        let feats = model.forward(&mut tape, &bound, x, Mode::Eval)?;
        let logits = model.head_forward(&mut tape, &bound, &feats)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i] as usize).collect();
        hits += accuracy(tape.value(logits), &labels) * chunk.len() as f64;
    }
    Ok(hits / ds.len() as f64)
}

/// Contrastive training of the whole backbone on unlabeled images through a
/// temporary projection head. Rows `2i` and `2i+1` of each batch are the two
/// views of image `i`.
pub fn simclr_pretrain(
    start: &Backbone,
    ds: &Dataset,
    cfg: &TrainConfig,
    norm: &Normalizer,
) -> Result<SimclrOutcome, PipelineError> {
    cfg.validate()?;
    if start.head().is_some() {
        return Err(config_err("contrastive training starts from a head-free backbone"));
    }
    if ds.len() < 2 {
        return Err(config_err("contrastive training needs at least two images"));
    }
    let mut model = start.clone();
    model.attach_head(HeadKind::ProjectionMlp, cfg.proj_dim, cfg.seed)?;
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut first_batch_loss = None;

    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        opt.lr = cfg.lr_at(epoch);
        let (mut total, mut count) = (0f64, 0usize);
        for (b, idx) in batches(ds.len(), cfg.batch_size, cfg.seed, "simclr/order", epoch).into_iter().enumerate() {
            let mut views = Vec::with_capacity(2 * idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let key = (epoch * ds.len() + b * cfg.batch_size + j) as u64;
                let (a, v) = two_views(ds.image(i), c, h, w, &cfg.augment, &mut rng::stream(cfg.seed, "simclr/views", key));
                views.push(a);
                views.push(v);
            }
            let refs: Vec<&[u8]> = views.iter().map(Vec::as_slice).collect();
            let x = norm.tensor(&refs, c, h, w);
            let tau = cfg.temperature;
            match train_step(&mut model, x, &mut opt, |tape, z| tape.nt_xent(z, tau)) {
                Ok(l) => {
                    first_batch_loss.get_or_insert(l);
                    total += l as f64;
                    count += 1;
                }
                Err(StepError::NonFinite(reason)) => return Err(diverged(&last_good, epoch, reason)),
                Err(StepError::Other(e)) => return Err(e),
            }
        }
        epoch_losses.push((total / count.max(1) as f64) as f32);
    }
    model.detach_head()?;
    Ok(SimclrOutcome { backbone: model, epoch_losses, first_batch_loss })
}
