//! Dense row-major tensors and the scalar types they hold.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: output would be empty ({detail})")]
    EmptyOutput { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward already ran on this tape; run a fresh forward pass first")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// Scalar element type. Training runs in `f32`; `f64` exists so gradient
/// checks can use finite differences without drowning in rounding noise.
pub trait Element: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c = op(a) * op(b) + beta * c`, where `op`
/// optionally transposes. `a` is stored `m×k` (or `k×m` when `ta`), `b` is
/// `k×n` (or `n×k` when `tb`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let va = if ta { View::rows(0, m).t() } else { View::rows(0, k) };
    let vb = if tb { View::rows(0, k).t() } else { View::rows(0, n) };
    gemm_view((m, k, n), a, va, b, vb, beta, c, View::rows(0, n));
}

/// A matrix laid out inside a slice: element `(i, j)` lives at
/// `offset + i·rs + j·cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Rows of contiguous columns, `stride` apart.
    pub fn rows(offset: usize, stride: usize) -> Self {
        Self { offset, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rs: self.cs, cs: self.rs, ..self }
    }

    fn assert_within(self, len: usize, rows: usize, cols: usize) {
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "matrix view of {rows}×{cols} exceeds storage of {len}");
    }
}

/// `c = a · b + beta · c` over views; `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view<T: Element>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[vc.offset + i * vc.rs + j * vc.cs];
                *x = beta * *x;
            }
        }
        return;
    }
    va.assert_within(a.len(), m, k);
    vb.assert_within(b.len(), k, n);
    vc.assert_within(c.len(), m, n);
    // SAFETY: every view was bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        )
    }
}

/// `a · b` into fresh row-major `m×n` storage, without zero-filling it first.
pub(crate) fn gemm_new<T: Element>((m, k, n): (usize, usize, usize), a: &[T], va: View, b: &[T], vb: View) -> Vec<T> {
    if m == 0 || n == 0 || k == 0 {
        return vec![T::zero(); m * n];
    }
    va.assert_within(a.len(), m, k);
    vb.assert_within(b.len(), k, n);
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: the input views were bounds-checked and `c` has room for m·n
    // elements. With beta = 0 the kernel never reads C and writes all of it.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self, TensorError> {
        let rows = self.shape[0];
        if count == 0 || start + count > rows {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} out of 0..{rows}", start + count),
            ));
        }
        let stride = self.numel() / rows;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self { shape, data: self.data[start * stride..(start + count) * stride].to_vec() })
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, TensorError> {
        let total = self.shape[0];
        if rows.is_empty() {
            return Err(shape_err("select_rows", "no rows selected"));
        }
        let stride = self.numel() / total;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= total {
                return Err(shape_err("select_rows", format!("row {r} out of 0..{total}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped tensors along the leading axis.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "nothing to concat"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err(
                    "concat_rows",
                    format!("trailing dims {:?} vs {:?}", &p.shape[1..], tail),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl Tensor<f32> {
    /// Little-endian byte image of the payload; two tensors are bit-identical
    /// iff their shapes and these bytes match.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
