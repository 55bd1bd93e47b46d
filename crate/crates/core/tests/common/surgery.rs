//! Measurements behind the re-randomization suite.

use rand::seq::SliceRandom;
use rand::Rng;
use refine::backbone::{Backbone, BackboneConfig, ParamRegistry, Role};
use refine::rerand::{
    kaiming_uniform, kaiming_uniform_bound, normal_init, normal_std, orthogonal_init, rerandomize, sparse_init,
    sparse_zeros_per_column, Distribution, PolicyPreset, RerandPolicy,
};
use refine::Tensor;

use super::rng;

/// Distinct convolution weight shapes of a layout.
pub fn conv_shapes(config: &BackboneConfig) -> Vec<Vec<usize>> {
    let b = Backbone::build(config.clone(), 0).unwrap();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for e in b.registry().entries().iter().filter(|e| e.role == Role::ConvWeight) {
        if !out.contains(&e.tensor.shape().to_vec()) {
            out.push(e.tensor.shape().to_vec());
        }
    }
    out
}

/// Perturbs every entry so "restored" and "untouched" can be told apart.
pub fn pretend_trained(reg: &mut ParamRegistry, seed: u64) {
    let mut r = rng(seed);
    for e in reg.entries_mut() {
        for v in e.tensor.data_mut() {
            *v += r.gen_range(0.01f32..0.5);
        }
    }
}

fn random_policy(paths: &[&str], r: &mut impl Rng) -> RerandPolicy {
    const GLOBS: [&str; 8] = ["stage4.*", "stage?.block1.bn?", "*.conv1", "stem.*", "stage2.*", "*shortcut*", "*", "stage3.block1.conv?"];
    let n = r.gen_range(1..4);
    let selectors = (0..n)
        .map(|_| {
            if r.gen_bool(0.5) {
                paths.choose(r).unwrap().to_string()
            } else {
                GLOBS.choose(r).unwrap().to_string()
            }
        })
        .collect();
    let dist = *[Distribution::Uniform, Distribution::Normal, Distribution::Orthogonal, Distribution::Sparse, Distribution::Lottery]
        .choose(r)
        .unwrap();
    let mut p = RerandPolicy::new(selectors, dist, r.gen());
    p.include_shortcut = r.gen_bool(0.5);
    p.reset_running_stats = r.gen_bool(0.5);
    p
}

/// Applies random policies to a perturbed desk backbone and counts entries
/// outside the reported layers that changed, plus snapshot changes.
pub fn unmatched_violations(trials: usize, seed: u64) -> usize {
    let mut base = Backbone::build(BackboneConfig::desk(), seed).unwrap().into_registry();
    pretend_trained(&mut base, seed + 1);
    let paths: Vec<String> = base.layer_paths().iter().map(|s| s.to_string()).collect();
    let path_refs: Vec<&str> = paths.iter().map(String::as_str).collect();
    let mut r = rng(seed);
    let mut violations = 0;
    let mut done = 0;
    while done < trials {
        let policy = random_policy(&path_refs, &mut r);
        let mut reg = base.clone();
        let Ok(report) = rerandomize(&mut reg, &policy) else { continue };
        done += 1;
        for (a, b) in reg.entries().iter().zip(base.entries()) {
            if !report.touched.contains(&a.path) && !a.tensor.bit_eq(&b.tensor) {
                violations += 1;
            }
        }
        let (sa, sb) = (reg.init_snapshot().unwrap(), base.init_snapshot().unwrap());
        violations += sa.iter().zip(sb).filter(|(a, b)| !a.tensor.bit_eq(&b.tensor)).count();
    }
    violations
}

pub fn topmost_paths(config: &BackboneConfig) -> Vec<String> {
    let mut reg = Backbone::build(config.clone(), 0).unwrap().into_registry();
    let p = PolicyPreset::Topmost.to_policy(config, Distribution::Uniform, 1);
    rerandomize(&mut reg, &p).unwrap().touched
}

/// Lottery over every layer of a perturbed backbone restores the initial state.
pub fn lottery_round_trip(seed: u64) -> bool {
    let fresh = Backbone::build(BackboneConfig::desk(), seed).unwrap().into_registry();
    let mut reg = fresh.clone();
    pretend_trained(&mut reg, seed ^ 0xabc);
    let mut p = RerandPolicy::new(vec!["*".into()], Distribution::Lottery, 0);
    p.include_shortcut = true;
    rerandomize(&mut reg, &p).unwrap();
    reg.bit_eq(&fresh)
}

fn as_matrix(t: &Tensor) -> (usize, usize, Vec<f64>) {
    let rows = t.shape()[0];
    let cols = t.numel() / rows;
    (rows, cols, t.data().iter().map(|&v| v as f64).collect())
}

/// Largest deviation of `WWᵀ` (or `WᵀW` when tall) from the identity.
pub fn orthogonality_error(shapes: &[Vec<usize>], seed: u64) -> f64 {
    let mut worst = 0f64;
    for (i, shape) in shapes.iter().enumerate() {
        let w = orthogonal_init(shape, &mut rng(seed + i as u64)).unwrap();
        let (rows, cols, d) = as_matrix(&w);
        let wide = rows <= cols;
        let (n, len) = if wide { (rows, cols) } else { (cols, rows) };
        let at = |a: usize, k: usize| if wide { d[a * cols + k] } else { d[k * cols + a] };
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..len).map(|k| at(a, k) * at(b, k)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
    }
    worst
}

/// Columns whose zero count differs from `⌈0.2·rows⌉`.
pub fn sparse_count_mismatches(shapes: &[Vec<usize>], seed: u64) -> usize {
    let mut bad = 0;
    for (i, shape) in shapes.iter().enumerate() {
        let w = sparse_init(shape, 0.2, 0.01, &mut rng(seed + i as u64)).unwrap();
        let (rows, cols, d) = as_matrix(&w);
        let want = (0.2 * rows as f64).ceil() as usize;
        assert_eq!(sparse_zeros_per_column(rows, 0.2), want);
        bad += (0..cols).filter(|&c| (0..rows).filter(|&r| d[r * cols + c] == 0.0).count() != want).count();
    }
    bad
}

/// Draws at least `min_samples` values from repeated calls of `draw`.
fn pooled(min_samples: usize, mut draw: impl FnMut(u64) -> Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < min_samples {
        out.extend(draw(i).data().iter().map(|&v| v as f64));
        i += 1;
    }
    out
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[derive(Debug)]
pub struct MomentFailure {
    pub shape: Vec<usize>,
    pub what: String,
}

/// Moment checks on every given shape. Uniform: all samples within the bound,
/// mean within 0.005, variance within 5% of `b²/3`. Normal: std within 2%.
/// Sparse: std of the non-zero entries within 5% of 0.01.
pub fn moment_failures(shapes: &[Vec<usize>], seed: u64) -> Vec<MomentFailure> {
    const SAMPLES: usize = 100_000;
    let mut out = Vec::new();
    for (i, shape) in shapes.iter().enumerate() {
        let fan_in: usize = shape[1..].iter().product();
        let base = seed.wrapping_add(1000 * i as u64);
        let mut fail = |what: String| out.push(MomentFailure { shape: shape.clone(), what });

        let b = kaiming_uniform_bound(fan_in);
        let u = pooled(SAMPLES, |j| kaiming_uniform(shape, fan_in, &mut rng(base + j)).unwrap());
        if u.iter().any(|v| v.abs() > b * (1.0 + 1e-6)) {
            fail(format!("uniform sample outside ±{b}"));
        }
        let (m, v) = moments(&u);
        if m.abs() > 0.005 {
            fail(format!("uniform mean {m}"));
        }
        if (v / (b * b / 3.0) - 1.0).abs() > 0.05 {
            fail(format!("uniform variance {v} vs {}", b * b / 3.0));
        }

        let n = pooled(SAMPLES, |j| normal_init(shape, fan_in, &mut rng(base + 500 + j)).unwrap());
        let sd = moments(&n).1.sqrt();
        if (sd / normal_std(fan_in) - 1.0).abs() > 0.02 {
            fail(format!("normal std {sd} vs {}", normal_std(fan_in)));
        }

        let s = pooled(SAMPLES, |j| sparse_init(shape, 0.2, 0.01, &mut rng(base + 900 + j)).unwrap());
        let nz: Vec<f64> = s.into_iter().filter(|&v| v != 0.0).collect();
        let sd = moments(&nz).1.sqrt();
        if (sd / 0.01 - 1.0).abs() > 0.05 {
            fail(format!("sparse std {sd}"));
        }
    }
    out
}
