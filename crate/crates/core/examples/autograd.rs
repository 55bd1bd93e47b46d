//! Builds a small conv → batch-norm → relu → pool → linear graph on the tape
//! in 64-bit precision and compares its analytic gradient with central
//! differences.
//!
//!     cargo run --example autograd

use refine::autograd::BnMode;
use refine::{Tape, Tensor};

fn loss_and_grad(x: &Tensor<f64>, w: &Tensor<f64>, fc: &Tensor<f64>, labels: &[usize]) -> (f64, Tensor<f64>) {
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w.clone(), true);
    let gamma = tape.leaf(Tensor::ones(&[4]), false);
    let beta = tape.leaf(Tensor::zeros(&[4]), false);
    let fcv = tape.leaf(fc.clone(), false);

    let y = tape.conv2d(xv, wv, 1, 1).unwrap();
    let (y, _) = tape.batch_norm(y, gamma, beta, BnMode::Train { eps: 1e-5 }).unwrap();
    let y = tape.relu(y);
    let y = tape.global_avg_pool(y).unwrap();
    let logits = tape.linear(y, fcv, None).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    tape.backward(loss).unwrap();
    (tape.value(loss).data()[0], tape.grad(wv).unwrap().clone())
}

fn main() {
    let mut state = 7u64;
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let x = Tensor::from_fn(&[6, 2, 5, 5], |_| next());
    let w = Tensor::from_fn(&[4, 2, 3, 3], |_| 0.5 * next());
    let fc = Tensor::from_fn(&[3, 4], |_| next());
    let labels = [0, 1, 2, 0, 1, 2];

    let (loss, grad) = loss_and_grad(&x, &w, &fc, &labels);
    println!("loss = {loss:.6}  (ln 3 = {:.6})", 3f64.ln());

    let h = 1e-6;
    let mut worst = 0f64;
    for i in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss_and_grad(&x, &plus, &fc, &labels).0 - loss_and_grad(&x, &minus, &fc, &labels).0) / (2.0 * h);
        let analytic = grad.data()[i];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8));
    }
    println!("max relative error over {} weights: {worst:.2e}", w.numel());
}
