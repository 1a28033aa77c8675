//! Seeded weight initialisers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

/// He-normal: `N(0, 2 / fan_in)` with `fan_in` = product of all but the first axis.
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::rand_normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Orthogonal init of the `[rows, prod(rest)]` matrix view, scaled by `gain`.
/// Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal<T: Real, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let (a, b) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // Modified Gram-Schmidt over `a` random vectors of length `b`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(a);
    while basis.len() < a {
        let mut v: Vec<f64> = (0..b).map(|_| StandardNormal.sample(rng)).collect();
        for u in &basis {
            let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows <= cols { basis[r][c] } else { basis[c][r] };
            data[r * cols + c] = T::lit(gain * v);
        }
    }
    Tensor::from_vec(shape, data).expect("orthogonal shape")
}
