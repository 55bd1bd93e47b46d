//! The whole method at small scale: pre-train on source shapes, then compare
//! linear probing, full fine-tuning and ReFine on a shifted target domain.
//!
//!     cargo run --release --example few_shot

use refine::backbone::BackboneConfig;
use refine::data::{generate_shapeworld, split_classes, DomainSpec, Normalizer, Split};
use refine::pipelines::{evaluate, pretrain, surgery_seed, EvalParams, FinetuneConfig, MethodSpec, TrainConfig};
use refine::rerand::{Distribution, PolicyPreset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 0;
    let (base, novel) = split_classes(10, 10, seed)?;
    let source = generate_shapeworld(&DomainSpec::identity("source"), &base, 30, 32, Split::Base, seed)?;
    let target = generate_shapeworld(&DomainSpec::preset("invert").unwrap(), &novel, 20, 32, Split::Novel, seed)?;
    let norm = Normalizer::fit(&source);

    let cfg = TrainConfig { epochs: 12, batch_size: 32, lr: 0.05, seed, ..TrainConfig::supervised() };
    let trained = pretrain(&BackboneConfig::desk(), &cfg, &source, &norm)?;
    println!("pre-training loss per epoch: {:.3?}", trained.epoch_losses);
    println!("training accuracy {:.1}%\n", 100.0 * trained.train_accuracy);
    let model = trained.backbone;

    let mut params = EvalParams::new(5, 5, 20, seed);
    params.k_q = 10;
    let ft = FinetuneConfig { steps: 15, ..FinetuneConfig::default() };
    let policy = PolicyPreset::Topmost.to_policy(model.config(), Distribution::Uniform, surgery_seed(seed));

    for method in [MethodSpec::linear(), MethodSpec::transfer(), MethodSpec::refine(policy)] {
        let out = evaluate(&model, &target, &norm, &method, &params, &ft)?;
        let touched = out.surgery.map(|s| s.touched.join(", ")).unwrap_or_default();
        println!("{:<9} {}  {touched}", out.report.method, out.report.display());
    }
    Ok(())
}
