//! Episode-protocol checks shared by the data, pipeline and acceptance
//! suites.

use std::collections::BTreeSet;

use refine::backbone::{decode_checkpoint, encode_checkpoint, Backbone, BackboneConfig};
use refine::data::{
    decode_dataset, encode_dataset, generate_shapeworld, sample_episode, split_classes, Dataset, DomainSpec,
    Normalizer, Split,
};
use refine::pipelines::{evaluate, FinetuneConfig, MethodSpec, EvalParams};
use refine::rerand::{Distribution, PolicyPreset};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::rng;

/// Novel split used by the protocol checks: 12 classes, 25 images each.
pub fn novel_split(seed: u64) -> Dataset {
    let (_, novel) = split_classes(20, 12, seed).unwrap();
    generate_shapeworld(&DomainSpec::preset("invert").unwrap(), &novel, 25, 32, Split::Novel, seed).unwrap()
}

pub struct EpisodeStats {
    pub violations: Vec<String>,
    /// Chi-square p-value of per-class selection counts against uniform.
    pub class_uniformity_p: f64,
}

/// Draws `draws` episodes and checks every structural invariant directly
/// against the dataset labels.
pub fn episode_stats(ds: &Dataset, n: usize, k: usize, k_q: usize, draws: usize, seed: u64) -> EpisodeStats {
    let classes = ds.num_classes();
    let mut counts = vec![0u64; classes];
    let mut violations = Vec::new();
    let mut r = rng(seed);
    for d in 0..draws {
        let ep = sample_episode(ds, n, k, k_q, &mut r).unwrap();
        let mut bad = |what: &str| violations.push(format!("draw {d}: {what}"));
        if ep.support.len() != n * k || ep.query.len() != n * k_q {
            bad("set sizes");
        }
        let s: BTreeSet<usize> = ep.support.iter().copied().collect();
        let q: BTreeSet<usize> = ep.query.iter().copied().collect();
        if s.len() != ep.support.len() || q.len() != ep.query.len() || !s.is_disjoint(&q) {
            bad("support/query overlap or repeats");
        }
        let distinct: BTreeSet<usize> = ep.class_map.iter().copied().collect();
        if ep.class_map.len() != n || distinct.len() != n {
            bad("class count");
        }
        for (set, labels, per) in [(&ep.support, &ep.support_labels, k), (&ep.query, &ep.query_labels, k_q)] {
            for j in 0..n {
                if labels.iter().filter(|&&l| l == j).count() != per {
                    bad("per-class count");
                }
            }
            for (&i, &l) in set.iter().zip(labels.iter()) {
                if l >= n || ds.labels[i] as usize != ep.class_map[l] {
                    bad("label remapping");
                }
            }
        }
        for &c in &ep.class_map {
            counts[c] += 1;
        }
    }
    let expected = (draws * n) as f64 / classes as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((classes - 1) as f64).unwrap().cdf(chi2);
    EpisodeStats { violations, class_uniformity_p: p }
}

/// A lightly trained desk backbone: two epochs on a small base split, so
/// that batch-norm statistics and weights are no longer at their initial
/// values.
pub fn small_checkpoint(seed: u64) -> (Backbone, Normalizer) {
    let (base, _) = split_classes(6, 0, seed).unwrap();
    let ds = generate_shapeworld(&DomainSpec::identity("source"), &base, 8, 32, Split::Base, seed).unwrap();
    let norm = Normalizer::fit(&ds);
    let cfg = refine::pipelines::TrainConfig { epochs: 2, batch_size: 16, seed, ..refine::pipelines::TrainConfig::supervised() };
    let out = refine::pipelines::pretrain(&BackboneConfig::desk(), &cfg, &ds, &norm).unwrap();
    (out.backbone, norm)
}

/// Mismatch descriptions between repeated, reordered and parallel runs of
/// `evaluate` on the same inputs.
pub fn evaluation_mismatches(model: &Backbone, ds: &Dataset, norm: &Normalizer, seed: u64) -> Vec<String> {
    let ft = FinetuneConfig { steps: 3, ..FinetuneConfig::default() };
    let policy = PolicyPreset::Topmost.to_policy(model.config(), Distribution::Uniform, seed);
    let mut out = Vec::new();
    for method in [MethodSpec::linear(), MethodSpec::transfer(), MethodSpec::refine(policy)] {
        let mut params = EvalParams::new(5, 1, 6, seed);
        params.k_q = 3;
        let serial = evaluate(model, ds, norm, &method, &params, &ft).unwrap().report;
        let again = evaluate(model, ds, norm, &method, &params, &ft).unwrap().report;
        params.workers = 3;
        let parallel = evaluate(model, ds, norm, &method, &params, &ft).unwrap().report;
        if serial != again {
            out.push(format!("{}: repeated run differs", method.method));
        }
        if serial != parallel {
            out.push(format!("{}: parallel run differs", method.method));
        }
        // episodes do not depend on which others run: evaluating only the
        // first half reproduces the same per-task accuracies
        params.tasks = 3;
        let half = evaluate(model, ds, norm, &method, &params, &ft).unwrap().report;
        if half.task_accuracies[..] != serial.task_accuracies[..3] {
            out.push(format!("{}: episodes depend on the task count", method.method));
        }
    }
    out
}

/// Whether checkpoint and dataset survive encode/decode bit for bit.
pub fn round_trips_exact(model: &Backbone, ds: &Dataset) -> bool {
    let ck = encode_checkpoint(model.registry()).unwrap();
    let back = decode_checkpoint(&ck).unwrap();
    let ds_bytes = encode_dataset(ds).unwrap();
    back.bit_eq(model.registry())
        && encode_checkpoint(&back).unwrap() == ck
        && decode_dataset(&ds_bytes).unwrap() == *ds
        && encode_dataset(&decode_dataset(&ds_bytes).unwrap()).unwrap() == ds_bytes
}
