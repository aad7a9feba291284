//! Weight initializers.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::tape::Tensor;

/// Uniform on `±sqrt(3 / fan_in)`, unit variance for unit-variance inputs.
pub fn lecun_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    if rows == 0 || cols == 0 {
        return Array2::zeros((rows, cols));
    }
    let limit = (3.0 / rows as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// A `rows x cols` matrix with orthonormal rows or columns (whichever is
/// fewer), from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    if rows == 0 || cols == 0 {
        return Array2::zeros((rows, cols));
    }
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Columns of an n x m matrix, n >= m.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes of modified Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    if rows >= cols {
        Array2::from_shape_fn((rows, cols), |(i, j)| basis[j][i])
    } else {
        Array2::from_shape_fn((rows, cols), |(i, j)| basis[i][j])
    }
}
