//! Numeric-core checks phrased as measurements, so both the focused tests and
//! the acceptance gate can apply their own thresholds.

use rand::Rng;
use refine::autograd::BnMode;
use refine::{Tape, Tensor};

use super::{brute_cross_entropy, brute_nt_xent, gradient_check, naive_conv2d, random_tensor, rng};

pub const FD_STEP: f64 = 1e-4;

/// Largest |fast − naive| over `instances` random convolutions.
pub fn conv_oracle_max_err(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = r.gen_range(1..=3);
        let c = r.gen_range(1..=4);
        let o = r.gen_range(1..=5);
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let h = r.gen_range(k.max(2)..=9);
        let w = r.gen_range(k.max(2)..=9);
        let x = random_tensor(&mut r, &[n, c, h, w]);
        let wt = random_tensor(&mut r, &[o, c, k, k]);
        let expected = naive_conv2d(&x, &wt, stride, pad);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x, false);
        let wv = tape.leaf(wt, false);
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        worst = worst.max(tape.value(y).max_abs_diff(&expected));
    }
    worst
}

/// Worst relative gradient error per op over `shapes` random shapes each.
pub fn gradcheck_all_ops(shapes: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        let worst = errs.into_iter().fold(0.0, f64::max);
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some(entry) => entry.1 = entry.1.max(worst),
            None => out.push((name, worst)),
        }
    };
    for _ in 0..shapes {
        // conv2d
        let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let (k, stride, pad) = (r.gen_range(1..=3), r.gen_range(1..=2), r.gen_range(0..=1));
        let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
        let x = random_tensor(&mut r, &[n, c, h, w]);
        let wt = random_tensor(&mut r, &[o, c, k, k]);
        let probe_shape = naive_conv2d(&x, &wt, stride, pad).shape().to_vec();
        let probe = random_tensor(&mut r, &probe_shape);
        record(
            "conv2d",
            gradient_check(&[x, wt], FD_STEP, |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad).unwrap();
                t.weighted_sum(y, &probe).unwrap()
            }),
        );

        // batchnorm, train and eval
        let (n, c, h, w) = (r.gen_range(2..=3), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=3));
        let x = random_tensor(&mut r, &[n, c, h, w]);
        let gamma = Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5));
        let beta = random_tensor(&mut r, &[c]);
        let probe = random_tensor(&mut r, &[n, c, h, w]);
        let p2 = probe.clone();
        record(
            "batchnorm_train",
            gradient_check(&[x.clone(), gamma.clone(), beta.clone()], FD_STEP, |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 }).unwrap();
                t.weighted_sum(y, &probe).unwrap()
            }),
        );
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
        record(
            "batchnorm_eval",
            gradient_check(&[x, gamma, beta], FD_STEP, |t, v| {
                let mode = BnMode::Eval { mean: &mean, var: &var, eps: 1e-5 };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], mode).unwrap();
                t.weighted_sum(y, &p2).unwrap()
            }),
        );

        // relu, maxpool, global average pool, residual add, flatten
        let shape = [r.gen_range(1..=2), r.gen_range(1..=3), 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3)];
        let a = random_tensor(&mut r, &shape);
        let b = random_tensor(&mut r, &shape);
        let probe = random_tensor(&mut r, &shape);
        record(
            "relu",
            gradient_check(std::slice::from_ref(&a), FD_STEP, |t, v| {
                let y = t.relu(v[0]);
                t.weighted_sum(y, &probe).unwrap()
            }),
        );
        record(
            "add_residual",
            gradient_check(&[a.clone(), b], FD_STEP, |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                t.weighted_sum(y, &probe).unwrap()
            }),
        );
        let pooled = [shape[0], shape[1], shape[2] / 2, shape[3] / 2];
        let pprobe = random_tensor(&mut r, &pooled);
        record(
            "maxpool2x2",
            gradient_check(std::slice::from_ref(&a), FD_STEP, |t, v| {
                let y = t.maxpool2x2(v[0]).unwrap();
                t.weighted_sum(y, &pprobe).unwrap()
            }),
        );
        let gprobe = random_tensor(&mut r, &shape[..2]);
        record(
            "global_avg_pool",
            gradient_check(std::slice::from_ref(&a), FD_STEP, |t, v| {
                let y = t.global_avg_pool(v[0]).unwrap();
                t.weighted_sum(y, &gprobe).unwrap()
            }),
        );
        let fprobe = random_tensor(&mut r, &[shape[0], shape[1] * shape[2] * shape[3]]);
        record(
            "flatten",
            gradient_check(&[a], FD_STEP, |t, v| {
                let y = t.flatten(v[0]).unwrap();
                t.weighted_sum(y, &fprobe).unwrap()
            }),
        );

        // linear
        let (n, fin, fout) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5));
        let x = random_tensor(&mut r, &[n, fin]);
        let wt = random_tensor(&mut r, &[fout, fin]);
        let bias = random_tensor(&mut r, &[fout]);
        let probe = random_tensor(&mut r, &[n, fout]);
        record(
            "linear",
            gradient_check(&[x, wt, bias], FD_STEP, |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                t.weighted_sum(y, &probe).unwrap()
            }),
        );

        // losses
        let (n, c) = (r.gen_range(1..=5), r.gen_range(2..=6));
        let logits = Tensor::from_fn(&[n, c], |_| r.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        record(
            "softmax_cross_entropy",
            gradient_check(&[logits], FD_STEP, |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap()),
        );
        let (pairs, dim) = (r.gen_range(1..=4), r.gen_range(2..=5));
        let emb = random_tensor(&mut r, &[2 * pairs, dim]);
        let tau = r.gen_range(0.1..1.0);
        record("nt_xent", gradient_check(&[emb], FD_STEP, |t, v| t.nt_xent(v[0], tau).unwrap()));
    }
    out
}

/// |library − brute force| for cross-entropy on random logits.
pub fn cross_entropy_oracle_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = random_tensor(&mut r, &[4, 5]).map(|v| v * 4.0);
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
    let expected = brute_cross_entropy(logits.data(), 5, &labels);
    let mut tape = Tape::<f64>::new();
    let lv = tape.leaf(logits.clone(), false);
    let loss = tape.softmax_cross_entropy(lv, &labels).unwrap();
    (tape.value(loss).data()[0] - expected).abs()
}

/// Cross-entropy of uniform 5-class logits, computed in f32.
pub fn uniform_cross_entropy() -> f64 {
    let mut tape = Tape::<f32>::new();
    let lv = tape.leaf(Tensor::zeros(&[7, 5]), false);
    let loss = tape.softmax_cross_entropy(lv, &[0, 1, 2, 3, 4, 0, 1]).unwrap();
    tape.value(loss).data()[0] as f64
}

/// |library − brute force| for NT-Xent on 2N = 6, τ = 0.5.
pub fn nt_xent_oracle_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let emb = random_tensor(&mut r, &[6, 4]);
    let expected = brute_nt_xent(emb.data(), 6, 4, 0.5);
    let mut tape = Tape::<f64>::new();
    let ev = tape.leaf(emb, false);
    let loss = tape.nt_xent(ev, 0.5).unwrap();
    (tape.value(loss).data()[0] - expected).abs()
}
