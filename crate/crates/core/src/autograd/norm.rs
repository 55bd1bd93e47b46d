//! Per-channel batch normalization over NCHW (or N×C) activations.

use super::{Op, Tape, Var};
use crate::tensor::{shape_err, Element, Tensor, TensorError};

/// Which statistics normalize the batch.
#[derive(Clone, Debug)]
pub enum BnMode<'a, T: Element> {
    /// Batch statistics; the op reports them for a running-average update.
    Train { eps: T },
    /// Frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Batch statistics observed in train mode. `var` is the unbiased estimate,
/// which is what running averages track.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Element = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Exponential moving averages of batch statistics used by eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Element = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * *b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (keep * *r + momentum * *b).max(T::zero());
        }
    }
}

pub(crate) struct BatchNormSaved<T: Element> {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Eval mode treats the statistics as constants.
    train: bool,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(shape_err("batchnorm", format!("expected N×C or NCHW, got {shape:?}"))),
    }
}

fn plane<T>(x: &[T], b: usize, ch: usize, c: usize, hw: usize) -> &[T] {
    &x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
}

const LANES: usize = 8;

/// `Σ f(v)` with eight independent accumulators so the loop vectorizes.
fn lane_sum<T: Element>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for ch in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = *a + f(v);
        }
    }
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &v| a + f(v));
    acc.iter().fold(tail, |a, &v| a + v)
}

fn lane_dot<T: Element>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (mut cx, mut cy) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    for (a, b) in (&mut cx).zip(&mut cy) {
        for ((s, &u), &v) in acc.iter_mut().zip(a).zip(b) {
            *s = *s + u * v;
        }
    }
    let tail = cx.remainder().iter().zip(cy.remainder()).fold(T::zero(), |a, (&u, &v)| a + u * v);
    acc.iter().fold(tail, |a, &v| a + v)
}

impl<T: Element> Tape<T> {
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let (n, c, hw) = layout(self.shape(input))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(
                    "batchnorm",
                    format!("{name} has shape {:?}, input has {c} channels", self.shape(v)),
                ));
            }
        }
        let x = self.value(input).data();
        let count = n * hw;
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                if count < 2 {
                    return Err(TensorError::Domain {
                        op: "batchnorm",
                        detail: "train mode needs more than one value per channel".into(),
                    });
                }
                let inv = T::from_f64(1.0 / count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let m = (0..n).map(|b| lane_sum(plane(x, b, ch, c, hw), |v| v)).fold(T::zero(), |a, v| a + v) * inv;
                    let sq = (0..n)
                        .map(|b| lane_sum(plane(x, b, ch, c, hw), |v| (v - m) * (v - m)))
                        .fold(T::zero(), |a, v| a + v);
                    mean[ch] = m;
                    var[ch] = sq * inv;
                }
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        "batchnorm",
                        format!("running stats have {}/{} entries for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for ((o, h), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&x[r]) {
                    *h = (v - m) * is;
                    *o = gc * *h + bc;
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let value = Tensor::new(&shape, out)?;
        let stats = train.then(|| {
            let bessel = T::from_f64(count as f64 / (count - 1) as f64);
            BatchStats { mean: mean.clone(), var: var.iter().map(|&v| v * bessel).collect() }
        });
        let rg = self.any_grad(&[input, gamma, beta]);
        let saved = BatchNormSaved { input, gamma, beta, xhat, inv_std, train };
        Ok((self.push(value, rg, Op::BatchNorm(saved)), stats))
    }
}

pub(crate) fn batch_norm_backward<T: Element>(
    tape: &Tape<T>,
    saved: &BatchNormSaved<T>,
    grad: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let shape = tape.shape(saved.input).to_vec();
    let (n, c, hw) = layout(&shape).expect("validated in forward");
    let dy = grad.data();
    let xhat = &saved.xhat;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let (d, h) = (plane(dy, b, ch, c, hw), plane(xhat, b, ch, c, hw));
            dgamma[ch] = dgamma[ch] + lane_dot(d, h);
            dbeta[ch] = dbeta[ch] + lane_sum(d, |v| v);
        }
    }
    let mut out = Vec::new();
    if tape.requires_grad(saved.input) {
        let g = tape.value(saved.gamma).data();
        let mut dx = vec![T::zero(); dy.len()];
        let inv_count = T::from_f64(1.0 / (n * hw) as f64);
        for b in 0..n {
            for ch in 0..c {
                let k = g[ch] * saved.inv_std[ch];
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let dst = &mut dx[r.clone()];
                if saved.train {
                    let (mb, mg) = (dbeta[ch] * inv_count, dgamma[ch] * inv_count);
                    for ((o, &d), &h) in dst.iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                        *o = k * (d - mb - h * mg);
                    }
                } else {
                    for (o, &d) in dst.iter_mut().zip(&dy[r]) {
                        *o = k * d;
                    }
                }
            }
        }
        out.push((saved.input, Tensor::new(&shape, dx).expect("bn input grad")));
    }
    if tape.requires_grad(saved.gamma) {
        out.push((saved.gamma, Tensor::new(&[c], dgamma).expect("bn gamma grad")));
    }
    if tape.requires_grad(saved.beta) {
        out.push((saved.beta, Tensor::new(&[c], dbeta).expect("bn beta grad")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(x: Tensor<f64>) -> (Tape<f64>, Var, Var, Var) {
        let c = x.shape()[1];
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let g = tape.leaf(Tensor::ones(&[c]), false);
        let b = tape.leaf(Tensor::zeros(&[c]), false);
        (tape, xv, g, b)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 7919) % 13) as f64 * 0.3 - 1.0);
        let (mut tape, xv, g, b) = tape_with(x);
        let (y, stats) = tape.batch_norm(xv, g, b, BnMode::Train { eps: 0.0 }).unwrap();
        assert!(stats.is_some());
        let y = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).map(move |p| (n * 2 + ch) * 4 + p))
                .map(|i| y[i])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn eval_mode_with_unit_stats_scales_by_epsilon() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 10.0);
        let eps = 1e-5;
        let (mut tape, xv, g, b) = tape_with(x.clone());
        let mean = [0.0; 3];
        let var = [1.0; 3];
        let (y, stats) = tape
            .batch_norm(xv, g, b, BnMode::Eval { mean: &mean, var: &var, eps })
            .unwrap();
        assert!(stats.is_none());
        let expected = x.map(|v| v / (1.0 + eps).sqrt());
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn single_value_per_channel_is_rejected_in_train_mode() {
        let (mut tape, xv, g, b) = tape_with(Tensor::ones(&[1, 3, 1, 1]));
        assert!(matches!(
            tape.batch_norm(xv, g, b, BnMode::Train { eps: 1e-5 }),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn gamma_length_must_match_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 3, 2, 2]), false);
        let g = tape.leaf(Tensor::ones(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        assert!(tape.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }).is_err());
    }
}
