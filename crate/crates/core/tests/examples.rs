//! `cargo test` builds every example; these run the quick ones and check
//! their headline output.

use std::path::PathBuf;
use std::process::Command;

fn run_example(name: &str) -> String {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let exe: PathBuf = deps.parent().unwrap().join("examples").join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
    assert!(exe.exists(), "example binary {} was not built", exe.display());
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{name} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn autograd_example_matches_finite_differences() {
    let out = run_example("autograd");
    let err: f64 = out.lines().last().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-5, "{out}");
}

#[test]
fn backbone_example_round_trips() {
    assert!(run_example("backbone").contains("bit-identical: true"));
}

#[test]
fn rerandomize_example_reports_topmost_layers() {
    let out = run_example("rerandomize");
    assert!(out.contains("topmost            → stage4.block1.conv2, stage4.block1.bn2\n"));
    assert!(out.contains("lottery restores the initial stage4.block1.conv2: true"));
}

#[test]
fn shapeworld_example_samples_an_episode() {
    assert!(run_example("shapeworld").contains("support 25 images, query 75 images"));
}

#[test]
fn reporting_example_renders() {
    assert!(run_example("reporting").contains("chart written to"));
}

#[test]
fn experiment_example_runs_the_recipe() {
    let out = run_example("experiment");
    for cmd in ["gen-data", "pretrain", "rerand", "eval"] {
        assert!(out.contains(&format!("{cmd}: exit 0")), "{out}");
    }
}
