//! Builds the desk-scale residual backbone, lists its layers, runs a batch
//! through it and round-trips the parameters through a checkpoint file.
//!
//!     cargo run --example backbone

use refine::backbone::{load_checkpoint, save_checkpoint, Backbone, BackboneConfig, Role};
use refine::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = BackboneConfig::desk();
    let model = Backbone::build(config.clone(), 0)?;

    println!("{} layers, embedding width {}", model.registry().layer_paths().len(), model.embedding_dim());
    for path in model.registry().layer_paths() {
        let roles: Vec<&str> = model.registry().layer_entries(path).map(|e| e.role.name()).collect();
        println!("  {path:<28} {}", roles.join(" "));
    }

    let x = Tensor::from_fn(&[2, 3, config.input_size, config.input_size], |i| ((i % 17) as f32 - 8.0) / 8.0);
    for (s, out) in model.stage_outputs(&x)?.iter().enumerate() {
        println!("stage{} output {:?}", s + 1, out.shape());
    }
    println!("embedding {:?}", model.features(&x)?.shape());

    let path = std::env::temp_dir().join("refine-example-backbone.rfck");
    save_checkpoint(model.registry(), &path)?;
    let back = load_checkpoint(&path)?;
    println!(
        "checkpoint {} bytes, bit-identical: {}",
        std::fs::metadata(&path)?.len(),
        back.bit_eq(model.registry())
    );
    let w = back.get("stage4.block1.conv2", Role::ConvWeight)?;
    println!("stage4.block1.conv2 weight {:?}", w.shape());
    std::fs::remove_file(path)?;
    Ok(())
}
