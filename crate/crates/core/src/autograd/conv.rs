//! Bias-free 2-D convolution lowered to one matrix product per batch via
//! im2col.

use super::{Op, Tape, Var};
use crate::tensor::{gemm_new, shape_err, Element, Tensor, TensorError, View};

pub(crate) struct Conv2dSaved<T: Element> {
    input: Var,
    weight: Var,
    geom: Geometry,
    /// im2col buffer, `[C·kh·kw, N·OH·OW]`.
    cols: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn geometry(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Geometry, TensorError> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("expected NCHW input and OIHW weight, got {input:?} and {weight:?}"),
        ));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (o, ci, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if c != ci {
        return Err(shape_err(
            "conv2d",
            format!("input has {c} channels but weight expects {ci}"),
        ));
    }
    let (Some(oh), Some(ow)) = (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad))
    else {
        return Err(TensorError::EmptyOutput {
            op: "conv2d",
            detail: format!("{h}x{w} input padded by {pad} is smaller than {kh}x{kw} kernel"),
        });
    };
    Ok(Geometry { n, c, h, w, o, kh, kw, stride, pad, oh, ow })
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` lies
/// inside the image.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Element>(x: &[T], g: &Geometry) -> Vec<T> {
    // written strictly in output order, so padding is the only part that
    // needs explicit zeros
    let mut cols = Vec::with_capacity(g.k() * g.n * g.positions());
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.oh, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.ow, g.w, kj, g.stride, g.pad);
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    cols.resize(cols.len() + y_lo * g.ow, T::zero());
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        cols.resize(cols.len() + x_lo, T::zero());
                        if g.stride == 1 && x_hi > x_lo {
                            let ix0 = x_lo + kj - g.pad;
                            cols.extend_from_slice(&src[ix0..ix0 + x_hi - x_lo]);
                        } else {
                            cols.extend((x_lo..x_hi).map(|ox| src[ox * g.stride + kj - g.pad]));
                        }
                        cols.resize(cols.len() + g.ow - x_hi, T::zero());
                    }
                    cols.resize(cols.len() + (g.oh - y_hi) * g.ow, T::zero());
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], g: &Geometry) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.oh, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.ow, g.w, kj, g.stride, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    let src = &src_row[n * p..(n + 1) * p];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst = &mut x[base + iy * g.w..base + (iy + 1) * g.w];
                        let s = &src[oy * g.ow + x_lo..oy * g.ow + x_hi];
                        let ix0 = x_lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in dst[ix0..ix0 + s.len()].iter_mut().zip(s) {
                                *d = *d + v;
                            }
                        } else {
                            for (t, &v) in s.iter().enumerate() {
                                let d = &mut dst[ix0 + t * g.stride];
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Element> Tape<T> {
    /// Cross-correlation of an NCHW input with an OIHW weight, no bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let g = geometry(self.shape(input), self.shape(weight), stride, padding)?;
        let cols = im2col(self.value(input).data(), &g);
        let p = g.positions();
        let np = g.n * p;
        let w = self.value(weight).data();
        let tmp = gemm_new((g.o, g.k(), np), w, View::rows(0, g.k()), &cols, View::rows(0, np));
        // [O, N, P] -> [N, O, P]
        let mut out = Vec::with_capacity(g.n * g.o * p);
        for n in 0..g.n {
            for o in 0..g.o {
                out.extend_from_slice(&tmp[o * np + n * p..o * np + (n + 1) * p]);
            }
        }
        let value = Tensor::new(&[g.n, g.o, g.oh, g.ow], out)?;
        let rg = self.any_grad(&[input, weight]);
        let saved = Conv2dSaved { input, weight, geom: g, cols: if rg { cols } else { Vec::new() } };
        Ok(self.push(value, rg, Op::Conv2d(saved)))
    }
}

pub(crate) fn conv2d_backward<T: Element>(
    tape: &Tape<T>,
    saved: &Conv2dSaved<T>,
    grad: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let g = &saved.geom;
    let p = g.positions();
    let np = g.n * p;
    // [N, O, P] -> [O, N, P]
    let gd = grad.data();
    let mut dy = Vec::with_capacity(g.o * np);
    for o in 0..g.o {
        for n in 0..g.n {
            dy.extend_from_slice(&gd[(n * g.o + o) * p..(n * g.o + o + 1) * p]);
        }
    }
    let (w_view, dy_view, cols_view) = (View::rows(0, g.k()), View::rows(0, np), View::rows(0, np));
    let mut out = Vec::new();
    if tape.requires_grad(saved.weight) {
        let dw = gemm_new((g.o, np, g.k()), &dy, dy_view, &saved.cols, cols_view.t());
        let shape = tape.shape(saved.weight).to_vec();
        out.push((saved.weight, Tensor::new(&shape, dw).expect("conv weight grad")));
    }
    if tape.requires_grad(saved.input) {
        let w = tape.value(saved.weight).data();
        let dcols = gemm_new((g.k(), g.o, np), w, w_view.t(), &dy, dy_view);
        let dx = col2im(&dcols, g);
        out.push((saved.input, Tensor::new(&[g.n, g.c, g.h, g.w], dx).expect("conv input grad")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]), false);
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::ones(&[1, 1, 3, 3]));
    }

    #[test]
    fn strided_padded_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f32), false);
        let w = tape.leaf(Tensor::from_fn(&[4, 3, 3, 3], |i| (i % 3) as f32), false);
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_and_empty_output_are_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 3, 3]), false);
        let w = tape.leaf(Tensor::ones(&[1, 3, 1, 1]), false);
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(TensorError::Shape { .. })));
        let w5 = tape.leaf(Tensor::ones(&[1, 2, 5, 5]), false);
        assert!(matches!(tape.conv2d(x, w5, 1, 0), Err(TensorError::EmptyOutput { .. })));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = geometry(&[2, 2, 5, 4], &[3, 2, 3, 2], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..g.k() * g.n * g.positions()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, kh, kw, stride, pad) in [(5, 4, 3, 2, 2, 1), (7, 7, 7, 7, 2, 3), (4, 4, 3, 3, 1, 1), (3, 5, 1, 1, 2, 0), (2, 2, 3, 3, 1, 2), (1, 2, 5, 5, 1, 2), (3, 3, 5, 5, 2, 2)] {
            let g = geometry(&[2, 2, h, w], &[1, 2, kh, kw], stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| i as f64 + 1.0).collect();
            let cols = im2col(&x, &g);
            let np = g.n * g.positions();
            for c in 0..2 {
                for ki in 0..kh {
                    for kj in 0..kw {
                        for n in 0..2 {
                            for oy in 0..g.oh {
                                for ox in 0..g.ow {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                                    let want = if inside { x[((n * 2 + c) * h + iy as usize) * w + ix as usize] } else { 0.0 };
                                    let row = (c * kh + ki) * kw + kj;
                                    assert_eq!(cols[row * np + n * g.positions() + oy * g.ow + ox], want);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
