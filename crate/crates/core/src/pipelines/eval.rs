use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, apply_gradients, config_err, FinetuneConfig, MethodSpec, PipelineError, Scope};
use crate::autograd::Tape;
use crate::backbone::{Backbone, Bound, HeadKind, Mode, BN_MOMENTUM};
use crate::data::{sample_episode, Dataset, Episode, Normalizer};
use crate::metrics::EvalReport;
use crate::optim::Sgd;
use crate::rerand::{kaiming_uniform, rerandomize, Distribution, PolicyPreset, RerandPolicy, SurgeryReport};
use crate::rng;
use crate::tensor::Tensor;

/// Few-shot protocol of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub n: usize,
    pub k: usize,
    pub k_q: usize,
    pub tasks: usize,
    pub seed: u64,
    /// Worker threads for the episode loop; results do not depend on it.
    pub workers: usize,
    /// Source-domain tag recorded in reports.
    pub source: String,
}

impl EvalParams {
    pub fn new(n: usize, k: usize, tasks: usize, seed: u64) -> Self {
        Self { n, k, k_q: crate::data::DEFAULT_QUERY, tasks, seed, workers: 1, source: "source".into() }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.tasks == 0 || self.n < 2 || self.k == 0 || self.k_q == 0 {
            return Err(config_err("evaluation needs T ≥ 1, n ≥ 2, k ≥ 1 and k_q ≥ 1"));
        }
        Ok(())
    }

    /// The episode with index `i` of this protocol on `ds`.
    pub fn episode(&self, ds: &Dataset, i: usize) -> Result<Episode, PipelineError> {
        Ok(sample_episode(ds, self.n, self.k, self.k_q, &mut rng::stream(self.seed, "episode", i as u64))?)
    }

    fn head_seed(&self, i: usize) -> u64 {
        rng::derive_seed(self.seed, "episode/head", i as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub accuracy: f64,
    /// Support loss before the first update.
    pub initial_loss: f32,
    /// Support loss after the last update.
    pub final_loss: f32,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Layers re-randomized before the episode loop, if any surgery ran.
    pub surgery: Option<SurgeryReport>,
}

/// Eval-mode, average-pooled outputs of the four stages for every image of
/// `ds` (`N×C_s` each). The stage-4 entry is the backbone embedding.
pub fn frozen_features(model: &Backbone, ds: &Dataset, norm: &Normalizer) -> Result<[Tensor; 4], PipelineError> {
    const CHUNK: usize = 64;
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut parts: [Vec<Tensor>; 4] = Default::default();
    for chunk in all.chunks(CHUNK) {
        for (s, t) in model.pooled_stage_features(&norm.batch(ds, chunk))?.into_iter().enumerate() {
            parts[s].push(t);
        }
    }
    let cat = |v: &Vec<Tensor>| Tensor::concat_rows(&v.iter().collect::<Vec<_>>());
    Ok([cat(&parts[0])?, cat(&parts[1])?, cat(&parts[2])?, cat(&parts[3])?])
}

fn probe_loss(x: &Tensor, w: &Tensor, b: &Tensor, labels: &[usize]) -> Result<(Tape, [crate::Var; 3]), PipelineError> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), false);
    let wv = t.leaf(w.clone(), true);
    let bv = t.leaf(b.clone(), true);
    let logits = t.linear(xv, wv, Some(bv))?;
    let loss = t.softmax_cross_entropy(logits, labels)?;
    Ok((t, [loss, wv, bv]))
}

/// Trains an `n`-way linear classifier on frozen support features and scores
/// the query features. The classifier is drawn from `head_seed` alone.
pub fn fit_linear_probe(
    support: &Tensor,
    support_labels: &[usize],
    query: &Tensor,
    query_labels: &[usize],
    n: usize,
    ft: &FinetuneConfig,
    head_seed: u64,
) -> Result<EpisodeOutcome, PipelineError> {
    let d = support.shape()[1];
    let mut w = kaiming_uniform(&[n, d], d, &mut rng::stream(head_seed, "probe", 0)).map_err(crate::rerand::RerandError::from)?;
    let mut b = Tensor::zeros(&[n]);
    let mut opt = Sgd::new(ft.lr, ft.momentum, ft.weight_decay);
    let mut initial_loss = None;
    for _ in 0..ft.steps {
        let (mut t, [loss, wv, bv]) = probe_loss(support, &w, &b, support_labels)?;
        initial_loss.get_or_insert(t.value(loss).data()[0]);
        t.backward(loss)?;
        let (gw, gb) = (t.take_grad(wv).expect("weight grad"), t.take_grad(bv).expect("bias grad"));
        opt.step(&mut [("head.w", &mut w, &gw), ("head.b", &mut b, &gb)])?;
    }
    let (t, [loss, ..]) = probe_loss(support, &w, &b, support_labels)?;
    let final_loss = t.value(loss).data()[0];

    let mut q = Tape::new();
    let xv = q.leaf(query.clone(), false);
    let wv = q.leaf(w, false);
    let bv = q.leaf(b, false);
    let logits = q.linear(xv, wv, Some(bv))?;
    Ok(EpisodeOutcome {
        accuracy: accuracy(q.value(logits), query_labels),
        initial_loss: initial_loss.unwrap_or(final_loss),
        final_loss,
    })
}

fn support_loss(model: &Backbone, x: &Tensor, labels: &[usize]) -> Result<f32, PipelineError> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, model.registry(), |_| false);
    let xv = tape.leaf(x.clone(), false);
    let feats = model.forward(&mut tape, &bound, xv, Mode::Train)?;
    let logits = model.head_forward(&mut tape, &bound, &feats)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Fine-tunes a copy of `model` on the episode's support set and returns
/// query accuracy. Batch norm runs in train mode while fitting (updating its
/// running statistics) and in eval mode on the query set.
fn finetune_full(
    model: &Backbone,
    support: &Tensor,
    support_labels: &[usize],
    query: &Tensor,
    query_labels: &[usize],
    n: usize,
    ft: &FinetuneConfig,
    head_seed: u64,
) -> Result<EpisodeOutcome, PipelineError> {
    let mut m = model.clone();
    m.attach_head(HeadKind::LinearClassifier, n, head_seed)?;
    let mut opt = Sgd::new(ft.lr, ft.momentum, ft.weight_decay);
    let mut initial_loss = None;
    for _ in 0..ft.steps {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, m.registry(), |_| true);
        let xv = tape.leaf(support.clone(), false);
        let feats = m.forward(&mut tape, &bound, xv, Mode::Train)?;
        let logits = m.head_forward(&mut tape, &bound, &feats)?;
        let loss = tape.softmax_cross_entropy(logits, support_labels)?;
        initial_loss.get_or_insert(tape.value(loss).data()[0]);
        tape.backward(loss)?;
        let grads = bound.gradients(&mut tape);
        apply_gradients(m.registry_mut(), grads, &mut opt)?;
        m.registry_mut().apply_bn_updates(&feats.bn_updates, BN_MOMENTUM)?;
    }
    let final_loss = support_loss(&m, support, support_labels)?;

    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, m.registry(), |_| false);
    let xv = tape.leaf(query.clone(), false);
    let feats = m.forward(&mut tape, &bound, xv, Mode::Eval)?;
    let logits = m.head_forward(&mut tape, &bound, &feats)?;
    Ok(EpisodeOutcome {
        accuracy: accuracy(tape.value(logits), query_labels),
        initial_loss: initial_loss.unwrap_or(final_loss),
        final_loss,
    })
}

/// One episode from a head-free checkpoint. The checkpoint is not modified;
/// surgery, if the method has any, must already have been applied.
pub fn finetune_episode(
    model: &Backbone,
    ds: &Dataset,
    norm: &Normalizer,
    episode: &Episode,
    method: &MethodSpec,
    ft: &FinetuneConfig,
    head_seed: u64,
) -> Result<EpisodeOutcome, PipelineError> {
    method.validate()?;
    ft.validate()?;
    if model.head().is_some() {
        return Err(config_err("fine-tuning starts from a head-free checkpoint"));
    }
    match method.scope {
        Scope::HeadOnly => {
            let s = model.features(&norm.batch(ds, &episode.support))?;
            let q = model.features(&norm.batch(ds, &episode.query))?;
            fit_linear_probe(&s, &episode.support_labels, &q, &episode.query_labels, episode.n, ft, head_seed)
        }
        Scope::FullNetwork => finetune_full(
            model,
            &norm.batch(ds, &episode.support),
            &episode.support_labels,
            &norm.batch(ds, &episode.query),
            &episode.query_labels,
            episode.n,
            ft,
            head_seed,
        ),
    }
}

/// Runs `f(i)` for every episode index, on `workers` threads, collecting in
/// index order.
fn run_episodes<R: Send>(
    tasks: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<R, PipelineError> + Sync + Send,
) -> Result<Vec<R>, PipelineError> {
    if workers <= 1 {
        return (0..tasks).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err(format!("worker pool: {e}")))?;
    pool.install(|| (0..tasks).into_par_iter().map(f).collect())
}

/// Clone of `model` with the method's surgery applied. An empty selector list
/// is a no-op.
fn prepare(model: &Backbone, method: &MethodSpec) -> Result<(Backbone, Option<SurgeryReport>), PipelineError> {
    let mut m = model.clone();
    let report = match &method.rerand {
        Some(p) if !p.is_empty() => Some(rerandomize(m.registry_mut(), p)?),
        _ => None,
    };
    Ok((m, report))
}

/// Mean few-shot accuracy of `method` over `params.tasks` episodes from `ds`.
/// Surgery runs once, before the episode loop.
pub fn evaluate(
    model: &Backbone,
    ds: &Dataset,
    norm: &Normalizer,
    method: &MethodSpec,
    params: &EvalParams,
    ft: &FinetuneConfig,
) -> Result<Evaluation, PipelineError> {
    method.validate()?;
    ft.validate()?;
    params.validate()?;
    if model.head().is_some() {
        return Err(config_err("evaluation starts from a head-free checkpoint"));
    }
    let (prepared, surgery) = prepare(model, method)?;
    let accs = match method.scope {
        Scope::HeadOnly => {
            let [.., emb] = frozen_features(&prepared, ds, norm)?;
            run_episodes(params.tasks, params.workers, |i| {
                let ep = params.episode(ds, i)?;
                probe_on_cache(&emb, &ep, ft, params.head_seed(i))
            })?
        }
        Scope::FullNetwork => run_episodes(params.tasks, params.workers, |i| {
            let ep = params.episode(ds, i)?;
            Ok(finetune_episode(&prepared, ds, norm, &ep, &MethodSpec::transfer(), ft, params.head_seed(i))?.accuracy)
        })?,
    };
    let report =
        EvalReport::new(method.method.name(), &params.source, &ds.domain_tag, params.n, params.k, params.k_q, params.seed, accs)?;
    Ok(Evaluation { report, surgery })
}

fn probe_on_cache(feats: &Tensor, ep: &Episode, ft: &FinetuneConfig, head_seed: u64) -> Result<f64, PipelineError> {
    let s = feats.select_rows(&ep.support)?;
    let q = feats.select_rows(&ep.query)?;
    Ok(fit_linear_probe(&s, &ep.support_labels, &q, &ep.query_labels, ep.n, ft, head_seed)?.accuracy)
}

/// Linear probes on the pooled output of each stage of a frozen backbone.
/// Episodes and classifier draws match [`evaluate`] with the linear method,
/// so the stage-4 report equals the linear baseline.
pub fn stage_probe(
    model: &Backbone,
    ds: &Dataset,
    norm: &Normalizer,
    params: &EvalParams,
    ft: &FinetuneConfig,
) -> Result<[EvalReport; 4], PipelineError> {
    ft.validate()?;
    params.validate()?;
    let feats = frozen_features(model, ds, norm)?;
    let per_episode = run_episodes(params.tasks, params.workers, |i| {
        let ep = params.episode(ds, i)?;
        let mut accs = [0.0; 4];
        for (s, f) in feats.iter().enumerate() {
            accs[s] = probe_on_cache(f, &ep, ft, params.head_seed(i))?;
        }
        Ok(accs)
    })?;
    let mut out = Vec::with_capacity(4);
    for s in 0..4 {
        let accs = per_episode.iter().map(|a| a[s]).collect();
        out.push(EvalReport::new(
            &format!("stage{}", s + 1),
            &params.source,
            &ds.domain_tag,
            params.n,
            params.k,
            params.k_q,
            params.seed,
            accs,
        )?);
    }
    Ok(out.try_into().expect("four stages"))
}

/// Seed used for the surgery of ablation runs.
pub fn surgery_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "rerand", 0)
}

/// ReFine under each preset (uniform draws); one report per preset, named
/// `refine[<preset>]`.
pub fn ablate_where(
    model: &Backbone,
    ds: &Dataset,
    norm: &Normalizer,
    presets: &[PolicyPreset],
    params: &EvalParams,
    ft: &FinetuneConfig,
) -> Result<Vec<EvalReport>, PipelineError> {
    presets
        .iter()
        .map(|preset| {
            let policy = preset.to_policy(model.config(), Distribution::Uniform, surgery_seed(params.seed));
            let mut r = evaluate(model, ds, norm, &MethodSpec::refine(policy), params, ft)?.report;
            r.method = format!("refine[{preset}]");
            Ok(r)
        })
        .collect()
}

/// ReFine with the `topmost` preset under each distribution; one report per
/// distribution, named `refine[<distribution>]`.
pub fn ablate_how(
    model: &Backbone,
    ds: &Dataset,
    norm: &Normalizer,
    distributions: &[Distribution],
    params: &EvalParams,
    ft: &FinetuneConfig,
) -> Result<Vec<EvalReport>, PipelineError> {
    distributions
        .iter()
        .map(|&d| {
            let policy: RerandPolicy = PolicyPreset::Topmost.to_policy(model.config(), d, surgery_seed(params.seed));
            let mut r = evaluate(model, ds, norm, &MethodSpec::refine(policy), params, ft)?.report;
            r.method = format!("refine[{d}]");
            Ok(r)
        })
        .collect()
}
