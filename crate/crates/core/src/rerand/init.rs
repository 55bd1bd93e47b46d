//! Weight samplers. All draw in `f64` and round once to `f32`.

use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("fan-in must be positive")]
    ZeroFanIn,
    #[error("sparsity must lie strictly between 0 and 1, got {0}")]
    Sparsity(f64),
    #[error("cannot view shape {0:?} as a matrix")]
    Shape(Vec<usize>),
}

/// Inputs feeding one output unit: `in_channels·kH·kW` for convolutions,
/// `in_features` for linear layers.
pub fn fan_in(shape: &[usize]) -> usize {
    if shape.len() < 2 {
        return shape.first().copied().unwrap_or(0);
    }
    shape[1..].iter().product()
}

/// Bound of the default convolution initializer: Kaiming-uniform with
/// negative slope √5, which collapses to `√(1/fan_in)`.
pub fn kaiming_uniform_bound(fan_in: usize) -> f64 {
    let a = 5f64.sqrt();
    let gain = (2.0 / (1.0 + a * a)).sqrt();
    let exact = gain * (3.0 / fan_in as f64).sqrt();
    // gain·√3 is exactly 1; use the closed form so bounds such as 1/3 are exact
    debug_assert!((exact - (1.0 / fan_in as f64).sqrt()).abs() < 1e-12);
    (1.0 / fan_in as f64).sqrt()
}

pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor, InitError> {
    if fan_in == 0 {
        return Err(InitError::ZeroFanIn);
    }
    let b = kaiming_uniform_bound(fan_in);
    Ok(Tensor::from_fn(shape, |_| rng.gen_range(-b..=b) as f32))
}

/// He-normal: `N(0, 2/fan_in)`.
pub fn normal_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub fn normal_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor, InitError> {
    if fan_in == 0 {
        return Err(InitError::ZeroFanIn);
    }
    let std = normal_std(fan_in);
    Ok(Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    }))
}

fn matrix_view(shape: &[usize]) -> Result<(usize, usize), InitError> {
    if shape.len() < 2 {
        return Err(InitError::Shape(shape.to_vec()));
    }
    Ok((shape[0], shape[1..].iter().product()))
}

/// Orthonormal columns of a Gaussian `m×n` matrix (`m ≥ n`), i.e. the `Q` of
/// a QR factorization with positive `R` diagonal. Modified Gram-Schmidt with
/// a second orthogonalization pass.
fn gaussian_orthonormal_columns(m: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    'draw: loop {
        // column-major scratch: col j is q[j*m..(j+1)*m]
        let mut q: Vec<f64> = (0..m * n).map(|_| StandardNormal.sample(rng)).collect();
        for j in 0..n {
            let norm0: f64 = q[j * m..(j + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt();
            for _pass in 0..2 {
                for i in 0..j {
                    let dot: f64 = (0..m).map(|r| q[i * m + r] * q[j * m + r]).sum();
                    for r in 0..m {
                        q[j * m + r] -= dot * q[i * m + r];
                    }
                }
            }
            let norm: f64 = q[j * m..(j + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-10 * norm0.max(1e-300)) {
                continue 'draw;
            }
            for r in 0..m {
                q[j * m + r] /= norm;
            }
        }
        return q;
    }
}

/// Orthogonal weights (gain 1). Viewing the tensor as `out×fan_in`, rows are
/// orthonormal when `out ≤ fan_in`, columns otherwise.
pub fn orthogonal_init(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor, InitError> {
    let (rows, cols) = matrix_view(shape)?;
    let (m, n) = (rows.max(cols), rows.min(cols));
    let q = gaussian_orthonormal_columns(m, n, rng);
    let value = |r: usize, c: usize| -> f64 {
        if rows >= cols {
            q[c * m + r] // W = Q
        } else {
            q[r * m + c] // W = Qᵀ
        }
    };
    Ok(Tensor::from_fn(shape, |i| value(i / cols, i % cols) as f32))
}

/// Number of zeroed entries per column.
pub fn sparse_zeros_per_column(rows: usize, sparsity: f64) -> usize {
    // tolerance keeps products like 0.2·10 from rounding up past an integer
    ((sparsity * rows as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Column-sparse Gaussian weights: in every column of the `out×fan_in` view,
/// `⌈sparsity·out⌉` entries are zero and the rest are `N(0, std²)`.
pub fn sparse_init(shape: &[usize], sparsity: f64, std: f64, rng: &mut impl Rng) -> Result<Tensor, InitError> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(InitError::Sparsity(sparsity));
    }
    let (rows, cols) = matrix_view(shape)?;
    let zeros = sparse_zeros_per_column(rows, sparsity);
    let mut w: Vec<f32> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    let mut order: Vec<usize> = (0..rows).collect();
    for c in 0..cols {
        // partial Fisher-Yates: the first `zeros` slots are a uniform subset
        for i in 0..zeros {
            let j = rng.gen_range(i..rows);
            order.swap(i, j);
        }
        for &r in &order[..zeros] {
            w[r * cols + c] = 0.0;
        }
    }
    Ok(Tensor::new(shape, w).expect("shape preserved"))
}
