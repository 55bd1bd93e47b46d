use super::{Op, Tape, Var};
use crate::tensor::{gemm, shape_err, Element, Tensor, TensorError};

impl<T: Element> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Relu { input })
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("maxpool2x2", format!("expected NCHW, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::EmptyOutput {
                op: "maxpool2x2",
                detail: format!("{h}x{w} input"),
            });
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::MaxPool2 { input, argmax }))
    }

    /// Averages each channel's spatial map, `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected NCHW, got {shape:?}")));
        }
        let hw = shape[2] * shape[3];
        let scale = T::from_f64(1.0 / hw as f64);
        let x = self.value(input).data();
        let out: Vec<T> = x.chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * scale).collect();
        let value = Tensor::new(&shape[..2], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = Tensor::new(
            self.shape(a),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect(),
        )?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    /// `y = x·Wᵀ + b` with `x: N×in`, `W: out×in`, `b: out`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {fout} outputs", bv.shape()),
                ));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, fin, fout, self.value(input).data(), false, self.value(weight).data(), true, T::one(), &mut out);
        let value = Tensor::new(&[n, fout], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Sum { input })
    }

    /// `Σ x_i · c_i` for fixed coefficients; handy for probing gradients.
    pub fn weighted_sum(&mut self, input: Var, coeffs: &Tensor<T>) -> Result<Var, TensorError> {
        if coeffs.shape() != self.shape(input) {
            return Err(shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", coeffs.shape(), self.shape(input)),
            ));
        }
        let s = self.value(input).data().iter().zip(coeffs.data()).map(|(a, b)| *a * *b).sum();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::WeightedSum { input, coeffs: coeffs.data().to_vec() },
        ))
    }
}

pub(super) fn relu_backward<T: Element>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = out.data().iter().zip(grad.data()).map(|(&o, &g)| if o > T::zero() { g } else { T::zero() }).collect();
    Tensor::new(out.shape(), data).expect("relu grad")
}

pub(super) fn maxpool_backward<T: Element>(
    input: &Tensor<T>,
    argmax: &[u32],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input.shape());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        d[idx as usize] = d[idx as usize] + g;
    }
    dx
}

pub(super) fn gap_backward<T: Element>(shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let hw = shape[2] * shape[3];
    let scale = T::from_f64(1.0 / hw as f64);
    Tensor::from_fn(shape, |i| grad.data()[i / hw] * scale)
}

pub(super) fn linear_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    grad: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let x = tape.value(input);
    let w = tape.value(weight);
    let (n, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = Vec::new();
    if tape.requires_grad(weight) {
        let mut dw = vec![T::zero(); fout * fin];
        gemm(fout, n, fin, grad.data(), true, x.data(), false, T::zero(), &mut dw);
        out.push((weight, Tensor::new(&[fout, fin], dw).expect("linear weight grad")));
    }
    if let Some(b) = bias.filter(|b| tape.requires_grad(*b)) {
        let mut db = vec![T::zero(); fout];
        for row in grad.data().chunks(fout) {
            for (acc, g) in db.iter_mut().zip(row) {
                *acc = *acc + *g;
            }
        }
        out.push((b, Tensor::new(&[fout], db).expect("linear bias grad")));
    }
    if tape.requires_grad(input) {
        let mut dx = vec![T::zero(); n * fin];
        gemm(n, fout, fin, grad.data(), false, w.data(), false, T::zero(), &mut dx);
        out.push((input, Tensor::new(&[n, fin], dx).expect("linear input grad")));
    }
    out
}
