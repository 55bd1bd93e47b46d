//! Classification and contrastive objectives. Both reduce to a mean over rows
//! and go through max-subtracted log-sum-exp.

use super::{Op, Tape, Var};
use crate::tensor::{shape_err, Element, Tensor, TensorError};

pub(crate) struct CrossEntropySaved<T: Element> {
    logits: Var,
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
}

pub(crate) struct NtXentSaved<T: Element> {
    input: Var,
    /// Row-normalized embeddings, `2N×p`.
    unit: Vec<T>,
    norms: Vec<T>,
    /// Softmax over `k ≠ i` of the scaled similarities, row `i`.
    soft: Vec<T>,
    rows: usize,
    dim: usize,
    temperature: T,
}

/// `log Σ exp(v)` with the maximum factored out.
pub(crate) fn log_sum_exp<T: Element>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

impl<T: Element> Tape<T> {
    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        let [n, c] = shape[..] else {
            return Err(shape_err("softmax_cross_entropy", format!("expected N×C logits, got {shape:?}")));
        };
        if c < 2 {
            return Err(shape_err("softmax_cross_entropy", "need at least two classes"));
        }
        if labels.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Domain {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} outside 0..{c}"),
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (r, row) in x.chunks(c).enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            total = total + (lse - row[labels[r]]);
        }
        let loss = total / T::from_f64(n as f64);
        let rg = self.requires_grad(logits);
        let saved = CrossEntropySaved { logits, probs, labels: labels.to_vec(), classes: c };
        Ok(self.push(Tensor::scalar(loss), rg, Op::SoftmaxCrossEntropy(saved)))
    }

    /// NT-Xent over `2N` embeddings where rows `2i` and `2i+1` are the two
    /// views of sample `i`. Mean over all `2N` anchors.
    pub fn nt_xent(&mut self, embeddings: Var, temperature: T) -> Result<Var, TensorError> {
        let shape = self.shape(embeddings).to_vec();
        let [rows, dim] = shape[..] else {
            return Err(shape_err("nt_xent", format!("expected 2N×p embeddings, got {shape:?}")));
        };
        if rows % 2 != 0 {
            return Err(shape_err("nt_xent", format!("{rows} rows cannot form view pairs")));
        }
        if !(temperature > T::zero()) {
            return Err(TensorError::Domain {
                op: "nt_xent",
                detail: format!("temperature must be positive, got {temperature:?}"),
            });
        }
        let x = self.value(embeddings).data();
        let mut unit = vec![T::zero(); rows * dim];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(TensorError::Domain {
                    op: "nt_xent",
                    detail: format!("row {r} has zero norm; cosine similarity undefined"),
                });
            }
            norms[r] = norm;
            for (u, &v) in unit[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *u = v / norm;
            }
        }
        let mut sim = vec![T::zero(); rows * rows];
        crate::tensor::gemm(rows, dim, rows, &unit, false, &unit, true, T::zero(), &mut sim);
        let inv_t = T::one() / temperature;
        let mut soft = vec![T::zero(); rows * rows];
        let mut total = T::zero();
        for i in 0..rows {
            let partner = i ^ 1;
            let logits = (0..rows).filter(|&k| k != i).map(|k| sim[i * rows + k] * inv_t);
            let lse = log_sum_exp(logits);
            for k in (0..rows).filter(|&k| k != i) {
                soft[i * rows + k] = (sim[i * rows + k] * inv_t - lse).exp();
            }
            total = total + lse - sim[i * rows + partner] * inv_t;
        }
        let loss = total / T::from_f64(rows as f64);
        let rg = self.requires_grad(embeddings);
        let saved = NtXentSaved { input: embeddings, unit, norms, soft, rows, dim, temperature };
        Ok(self.push(Tensor::scalar(loss), rg, Op::NtXent(saved)))
    }
}

pub(crate) fn cross_entropy_backward<T: Element>(
    saved: &CrossEntropySaved<T>,
    grad: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let c = saved.classes;
    let n = saved.labels.len();
    let scale = grad.data()[0] / T::from_f64(n as f64);
    let mut d = saved.probs.clone();
    for (r, &l) in saved.labels.iter().enumerate() {
        d[r * c + l] = d[r * c + l] - T::one();
    }
    for v in &mut d {
        *v = *v * scale;
    }
    vec![(saved.logits, Tensor::new(&[n, c], d).expect("ce grad"))]
}

pub(crate) fn nt_xent_backward<T: Element>(saved: &NtXentSaved<T>, grad: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let (rows, dim) = (saved.rows, saved.dim);
    let scale = grad.data()[0] / T::from_f64(rows as f64);
    // dL/dsim[i][k], similarities already divided by the temperature
    let mut g = saved.soft.clone();
    for i in 0..rows {
        g[i * rows + (i ^ 1)] = g[i * rows + (i ^ 1)] - T::one();
    }
    // sim = U Uᵀ / τ  ⇒  dU = (G + Gᵀ) U / τ
    let mut sym = vec![T::zero(); rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            sym[i * rows + k] = (g[i * rows + k] + g[k * rows + i]) * scale / saved.temperature;
        }
    }
    let mut du = vec![T::zero(); rows * dim];
    crate::tensor::gemm(rows, rows, dim, &sym, false, &saved.unit, false, T::zero(), &mut du);
    // through u = e / |e|
    let mut de = vec![T::zero(); rows * dim];
    for r in 0..rows {
        let u = &saved.unit[r * dim..(r + 1) * dim];
        let d = &du[r * dim..(r + 1) * dim];
        let dot: T = u.iter().zip(d).map(|(a, b)| *a * *b).sum();
        for j in 0..dim {
            de[r * dim + j] = (d[j] - u[j] * dot) / saved.norms[r];
        }
    }
    vec![(saved.input, Tensor::new(&[rows, dim], de).expect("nt-xent grad"))]
}
