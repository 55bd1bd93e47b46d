//! Drives the command-line pipeline from code: writes a tiny config, then runs
//! `gen-data → pretrain → rerand → eval` into a scratch directory and prints
//! the resulting report and manifest.
//!
//!     cargo run --release --example experiment

use refine::config::{ExperimentConfig, RawConfig};

const CONFIG: &str = "\
seed = 3

[data]
base_classes = 6
novel_classes = 6
base_per_class = 12
novel_per_class = 8
targets = binarize

[pretrain]
epochs = 3
batch_size = 16

[finetune]
steps = 5

[eval]
k = 1
k_q = 5
tasks = 10
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("refine-example-experiment");
    std::fs::create_dir_all(&dir)?;
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, CONFIG)?;

    let mut raw = RawConfig::parse(CONFIG)?;
    raw.set("rerand.distribution=orthogonal")?;
    let cfg = ExperimentConfig::from_raw(&raw)?;
    println!("config digest {}", raw.digest());
    println!("surgery: {}\n", cfg.rerand.policy(&cfg.backbone, 0));

    let out = dir.join("runs");
    for cmd in ["gen-data", "pretrain", "rerand", "eval"] {
        let args = [
            "refine",
            cmd,
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "rerand.distribution=orthogonal",
            "--out",
            out.to_str().unwrap(),
        ];
        let code = refine::cli::run(args);
        println!("{cmd}: exit {code}");
        if code != 0 {
            std::process::exit(code);
        }
    }
    println!("\n{}", std::fs::read_to_string(out.join("eval.csv"))?);
    let manifest = std::fs::read_to_string(out.join("eval.manifest.json"))?;
    println!("manifest: {} bytes, {} lines", manifest.len(), manifest.lines().count());
    Ok(())
}
