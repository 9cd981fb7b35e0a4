//! Independent oracles and random inputs shared by the integration tests.
#![allow(dead_code)]

use dmap_core::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Dense Gaussian elimination with partial pivoting on `a x = b`.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let pivot = a[col].clone();
                for (x, p) in a[row][col..n].iter_mut().zip(&pivot[col..n]) {
                    *x -= f * p;
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Solves `A V B = R` for `V` through the vectorized system
/// `(Bᵀ ⊗ A) vec(V) = vec(R)`.
pub fn kronecker_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, p) = (a.nrows(), b.nrows());
    let n = d * p;
    let mut m = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for j in 0..p {
        for i in 0..d {
            let row = j * d + i;
            for l in 0..p {
                for k in 0..d {
                    m[row][l * d + k] = b[(l, j)] * a[(i, k)];
                }
            }
            rhs[row] = r[(i, j)];
        }
    }
    DMatrix::from_column_slice(d, p, &gauss_solve(m, rhs))
}

/// Ridge map from the normal equations
/// `(XXᵀ + γI) V (KKᵀ + ηI) = X Y Kᵀ`.
pub fn ridge_oracle(x: &DMatrix<f64>, k: &DMatrix<f64>, y: &DMatrix<f64>, gamma: f64, eta: f64) -> DMatrix<f64> {
    let a = x * x.transpose() + DMatrix::identity(x.nrows(), x.nrows()) * gamma;
    let b = k * k.transpose() + DMatrix::identity(k.nrows(), k.nrows()) * eta;
    kronecker_oracle(&a, &b, &(x * y * k.transpose()))
}

/// Plain triple loop.
pub fn matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.ncols(), |i, j| {
        (0..a.ncols()).map(|l| a[(i, l)] * b[(l, j)]).sum()
    })
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Random orthogonal matrix from Gram–Schmidt on a random square matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    while cols.len() < n {
        let mut v = uniform_vec(rng, n);
        for _ in 0..2 {
            for q in &cols {
                let p = q.dot(&v);
                v -= q * p;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            cols.push(v / norm);
        }
    }
    DMatrix::from_columns(&cols)
}
