//! Independent reference computations shared by the integration suites.
//! Nothing here calls into the library's numeric kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use refine::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct four-deep loop convolution (cross-correlation), no bias.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdta = w.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * wdta[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Per-row cross-entropy written straight from the definition.
pub fn brute_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let rows = labels.len();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[label].exp() / denom).ln();
    }
    total / rows as f64
}

/// NT-Xent by explicit double loop over anchor/candidate pairs; rows `2i`
/// and `2i+1` are partners.
pub fn brute_nt_xent(emb: &[f64], rows: usize, dim: usize, tau: f64) -> f64 {
    let cos = |a: usize, b: usize| {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for j in 0..dim {
            dot += emb[a * dim + j] * emb[b * dim + j];
            na += emb[a * dim + j] * emb[a * dim + j];
            nb += emb[b * dim + j] * emb[b * dim + j];
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let mut total = 0.0;
    for i in 0..rows {
        let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
        let num = (cos(i, partner) / tau).exp();
        let mut den = 0.0;
        for k in 0..rows {
            if k != i {
                den += (cos(i, k) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / rows as f64
}

/// Analytic vs. central-difference gradients for every input of `f`.
/// Returns the norm-wise relative error per input.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> Vec<f64> {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();

    let mut errors = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        for e in 0..input.numel() {
            let mut vals = inputs.to_vec();
            vals[idx].data_mut()[e] = input.data()[e] + h;
            let plus = eval(&vals);
            vals[idx].data_mut()[e] = input.data()[e] - h;
            let minus = eval(&vals);
            numeric[e] = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        errors.push(diff / na.max(nn).max(1e-12));
    }
    errors
}

pub mod numeric;
pub mod protocol;
pub mod surgery;
