//! Re-randomizes the upper layers of a backbone with every preset and
//! distribution, and shows which layers each surgery touches.
//!
//!     cargo run --example rerandomize

use refine::backbone::{Backbone, BackboneConfig, Role};
use refine::rerand::{rerandomize, Distribution, PolicyPreset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = BackboneConfig::desk();
    let model = Backbone::build(config.clone(), 1)?;

    for preset in ["topmost", "last_stage", "layers:conv1+bn1", "stages:3,4"] {
        let policy = preset.parse::<PolicyPreset>()?.to_policy(&config, Distribution::Uniform, 42);
        let mut registry = model.registry().clone();
        let report = rerandomize(&mut registry, &policy)?;
        println!("{preset:<18} → {}", report.touched.join(", "));
    }

    println!();
    let path = "stage4.block1.conv2";
    for d in Distribution::ALL {
        let policy = PolicyPreset::Topmost.to_policy(&config, d, 42);
        let mut registry = model.registry().clone();
        rerandomize(&mut registry, &policy)?;
        let w = registry.get(path, Role::ConvWeight)?.data();
        let mean = w.iter().sum::<f32>() / w.len() as f32;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / w.len() as f32;
        let zeros = w.iter().filter(|&&v| v == 0.0).count();
        println!("{:<10} {path}: mean {mean:+.4}, std {:.4}, zeros {zeros}", d.name(), var.sqrt());
    }

    // the lottery distribution restores the weights the backbone was built with
    let mut trained = model.registry().clone();
    for e in trained.entries_mut() {
        e.tensor = e.tensor.map(|v| v + 0.5);
    }
    rerandomize(&mut trained, &PolicyPreset::Topmost.to_policy(&config, Distribution::Lottery, 0))?;
    let restored = trained.get(path, Role::ConvWeight)?.bit_eq(model.registry().get(path, Role::ConvWeight)?);
    println!("\nlottery restores the initial {path}: {restored}");
    Ok(())
}
