mod common;

use common::protocol::{evaluation_mismatches, novel_split, round_trips_exact, small_checkpoint};
use refine::backbone::{encode_checkpoint, Backbone, BackboneConfig};
use refine::data::{generate_shapeworld, split_classes, Dataset, DomainSpec, Normalizer, Split};
use refine::pipelines::{
    ablate_how, ablate_where, evaluate, finetune_episode, pretrain, simclr_pretrain, stage_probe, EvalParams,
    FinetuneConfig, Method, MethodSpec, PipelineError, TrainConfig,
};
use refine::rerand::{Distribution, PolicyPreset, RerandPolicy};

fn params(k: usize, tasks: usize, seed: u64) -> EvalParams {
    let mut p = EvalParams::new(5, k, tasks, seed);
    p.k_q = 5;
    p
}

fn base_split(classes: usize, per_class: usize, seed: u64) -> Dataset {
    let (base, _) = split_classes(classes, 0, seed).unwrap();
    generate_shapeworld(&DomainSpec::identity("source"), &base, per_class, 32, Split::Base, seed).unwrap()
}

#[test]
fn evaluation_is_deterministic_parallel_and_order_free() {
    let (model, norm) = small_checkpoint(1);
    let ds = novel_split(2);
    let bad = evaluation_mismatches(&model, &ds, &norm, 3);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn checkpoint_and_dataset_round_trip() {
    let (model, _) = small_checkpoint(4);
    assert!(round_trips_exact(&model, &novel_split(5)));
}

#[test]
fn evaluation_leaves_the_checkpoint_untouched() {
    let (model, norm) = small_checkpoint(6);
    let ds = novel_split(7);
    let before = encode_checkpoint(model.registry()).unwrap();
    let ft = FinetuneConfig { steps: 2, ..FinetuneConfig::default() };
    let policy = PolicyPreset::LastStage.to_policy(model.config(), Distribution::Normal, 1);
    for m in [MethodSpec::linear(), MethodSpec::transfer(), MethodSpec::refine(policy)] {
        evaluate(&model, &ds, &norm, &m, &params(1, 2, 8), &ft).unwrap();
    }
    assert_eq!(encode_checkpoint(model.registry()).unwrap(), before);
}

#[test]
fn linear_probe_trains_only_the_head() {
    let (model, norm) = small_checkpoint(9);
    let ds = novel_split(10);
    let ep = params(1, 1, 0).episode(&ds, 0).unwrap();
    let ft = FinetuneConfig { steps: 20, ..FinetuneConfig::default() };
    let before = model.registry().clone();
    let out = finetune_episode(&model, &ds, &norm, &ep, &MethodSpec::linear(), &ft, 5).unwrap();
    assert!(model.registry().bit_eq(&before));
    assert!(out.final_loss < out.initial_loss);
}

#[test]
fn one_shot_support_loss_decreases() {
    let (model, norm) = small_checkpoint(11);
    let ds = novel_split(12);
    let ft = FinetuneConfig { steps: 10, ..FinetuneConfig::default() };
    for i in 0..3 {
        let ep = params(1, 3, 13).episode(&ds, i).unwrap();
        let out = finetune_episode(&model, &ds, &norm, &ep, &MethodSpec::transfer(), &ft, i as u64).unwrap();
        assert!(out.final_loss < out.initial_loss, "episode {i}: {} → {}", out.initial_loss, out.final_loss);
    }
}

#[test]
fn untrained_head_guesses_at_chance() {
    let model = Backbone::build(BackboneConfig::desk(), 0).unwrap();
    let ds = novel_split(14);
    let norm = Normalizer::fit(&ds);
    let ft = FinetuneConfig { steps: 0, ..FinetuneConfig::default() };
    let r = evaluate(&model, &ds, &norm, &MethodSpec::linear(), &params(1, 500, 15), &ft).unwrap().report;
    assert!((r.mean - 0.2).abs() <= 0.02, "chance-level accuracy {}", r.mean);
}

#[test]
fn zero_epoch_pretraining_is_the_fresh_backbone() {
    let ds = base_split(4, 4, 16);
    let norm = Normalizer::fit(&ds);
    let cfg = TrainConfig { epochs: 0, seed: 17, ..TrainConfig::supervised() };
    let out = pretrain(&BackboneConfig::desk(), &cfg, &ds, &norm).unwrap();
    let fresh = Backbone::build(BackboneConfig::desk(), 17).unwrap();
    assert!(out.backbone.registry().bit_eq(fresh.registry()));
    assert!(out.epoch_losses.is_empty());
}

#[test]
fn pretraining_is_reproducible_and_loss_falls() {
    let ds = base_split(5, 12, 18);
    let norm = Normalizer::fit(&ds);
    let cfg = TrainConfig { epochs: 4, batch_size: 16, seed: 19, ..TrainConfig::supervised() };
    let a = pretrain(&BackboneConfig::desk(), &cfg, &ds, &norm).unwrap();
    let b = pretrain(&BackboneConfig::desk(), &cfg, &ds, &norm).unwrap();
    assert_eq!(encode_checkpoint(a.backbone.registry()).unwrap(), encode_checkpoint(b.backbone.registry()).unwrap());
    assert!(a.backbone.head().is_none());
    assert!(a.backbone.registry().init_snapshot().is_some());
    assert!(a.epoch_losses.last() < a.epoch_losses.first(), "{:?}", a.epoch_losses);
}

#[test]
fn pretraining_requires_the_base_split() {
    let ds = novel_split(20);
    let norm = Normalizer::fit(&ds);
    let err = pretrain(&BackboneConfig::desk(), &TrainConfig::supervised(), &ds, &norm).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
}

#[test]
fn divergence_returns_the_last_good_weights() {
    let ds = base_split(4, 8, 21);
    let norm = Normalizer::fit(&ds);
    let cfg = TrainConfig { epochs: 3, batch_size: 8, lr: 1e30, seed: 22, ..TrainConfig::supervised() };
    match pretrain(&BackboneConfig::desk(), &cfg, &ds, &norm) {
        Err(PipelineError::Diverged { epoch, last_good, .. }) => {
            let fresh = Backbone::build(BackboneConfig::desk(), 22).unwrap();
            if epoch == 0 {
                assert!(last_good.bit_eq(fresh.registry()));
            }
            assert!(last_good.entries().iter().all(|e| e.tensor.data().iter().all(|v| v.is_finite())));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.epoch_losses)),
    }
}

#[test]
fn first_contrastive_loss_is_near_uniform_similarity() {
    let ds = novel_split(23);
    let norm = Normalizer::fit(&ds);
    let start = Backbone::build(BackboneConfig::desk(), 24).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 32, ..TrainConfig::simclr() };
    let out = simclr_pretrain(&start, &ds, &cfg, &norm).unwrap();
    let first = out.first_batch_loss.unwrap();
    let expected = (2.0 * 32.0 - 1.0f32).ln();
    assert!((first - expected).abs() <= 0.5, "first loss {first}, expected ≈ {expected}");
    assert!(out.backbone.head().is_none());

    let zero = TrainConfig { epochs: 0, ..cfg };
    let same = simclr_pretrain(&start, &ds, &zero, &norm).unwrap();
    assert!(same.backbone.registry().bit_eq(start.registry()));
}

#[test]
fn contrastive_training_needs_a_batch() {
    let ds = novel_split(25);
    let norm = Normalizer::fit(&ds);
    let start = Backbone::build(BackboneConfig::desk(), 0).unwrap();
    let cfg = TrainConfig { batch_size: 1, ..TrainConfig::simclr() };
    assert!(matches!(simclr_pretrain(&start, &ds, &cfg, &norm), Err(PipelineError::Config(_))));
}

#[test]
fn empty_refine_policy_equals_transfer() {
    let (model, norm) = small_checkpoint(26);
    let ds = novel_split(27);
    let ft = FinetuneConfig { steps: 3, ..FinetuneConfig::default() };
    let p = params(1, 4, 28);
    let transfer = evaluate(&model, &ds, &norm, &MethodSpec::transfer(), &p, &ft).unwrap();
    let empty = MethodSpec::refine(RerandPolicy::new(vec![], Distribution::Uniform, 0));
    let refine = evaluate(&model, &ds, &norm, &empty, &p, &ft).unwrap();
    assert_eq!(refine.report.task_accuracies, transfer.report.task_accuracies);
    assert!(refine.surgery.is_none());
}

#[test]
fn lottery_after_zero_epochs_equals_transfer() {
    let ds = base_split(4, 4, 29);
    let norm = Normalizer::fit(&ds);
    let cfg = TrainConfig { epochs: 0, seed: 30, ..TrainConfig::supervised() };
    let model = pretrain(&BackboneConfig::desk(), &cfg, &ds, &norm).unwrap().backbone;
    let target = novel_split(31);
    let ft = FinetuneConfig { steps: 3, ..FinetuneConfig::default() };
    let p = params(1, 4, 32);
    let transfer = evaluate(&model, &target, &norm, &MethodSpec::transfer(), &p, &ft).unwrap();
    let lottery = PolicyPreset::LastStage.to_policy(model.config(), Distribution::Lottery, 0);
    let rr = evaluate(&model, &target, &norm, &MethodSpec::refine(lottery), &p, &ft).unwrap();
    assert_eq!(rr.report.task_accuracies, transfer.report.task_accuracies);
    assert!(!rr.surgery.unwrap().touched.is_empty());
}

#[test]
fn stage_four_probe_is_the_linear_baseline() {
    let (model, norm) = small_checkpoint(33);
    let ds = novel_split(34);
    let ft = FinetuneConfig { steps: 15, ..FinetuneConfig::default() };
    let p = params(5, 6, 35);
    let probes = stage_probe(&model, &ds, &norm, &p, &ft).unwrap();
    let linear = evaluate(&model, &ds, &norm, &MethodSpec::linear(), &p, &ft).unwrap().report;
    assert_eq!(probes[3].task_accuracies, linear.task_accuracies);
    let names: Vec<&str> = probes.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["stage1", "stage2", "stage3", "stage4"]);
}

#[test]
fn ablation_drivers_produce_one_row_per_setting() {
    let (model, norm) = small_checkpoint(36);
    let ds = novel_split(37);
    let ft = FinetuneConfig { steps: 1, ..FinetuneConfig::default() };
    let presets = PolicyPreset::last_stage_layer_columns();
    let rows = ablate_where(&model, &ds, &norm, &presets, &params(1, 1, 38), &ft).unwrap();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0].method, format!("refine[{}]", presets[0]));

    let mut how = Vec::new();
    for k in [1, 5] {
        how.extend(ablate_how(&model, &ds, &norm, &Distribution::ALL, &params(k, 1, 38), &ft).unwrap());
    }
    assert_eq!(how.len(), 10);
    assert!(how.iter().any(|r| r.method == "refine[lottery]" && r.k == 5));
}

#[test]
fn none_preset_row_equals_transfer() {
    let (model, norm) = small_checkpoint(39);
    let ds = novel_split(40);
    let ft = FinetuneConfig { steps: 2, ..FinetuneConfig::default() };
    let p = params(1, 3, 41);
    let rows = ablate_where(&model, &ds, &norm, &[PolicyPreset::None], &p, &ft).unwrap();
    let transfer = evaluate(&model, &ds, &norm, &MethodSpec::transfer(), &p, &ft).unwrap().report;
    assert_eq!(rows[0].task_accuracies, transfer.task_accuracies);
}

#[test]
fn method_scope_mismatch_is_rejected() {
    let (model, norm) = small_checkpoint(42);
    let ds = novel_split(43);
    let ep = params(1, 1, 0).episode(&ds, 0).unwrap();
    let bad = MethodSpec { method: Method::Linear, ..MethodSpec::transfer() };
    let err = finetune_episode(&model, &ds, &norm, &ep, &bad, &FinetuneConfig::default(), 0).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
}
