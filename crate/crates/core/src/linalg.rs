//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{DmapError, Result};

/// Gram matrices with an eigenvalue ratio above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Columns whose norm drops below this after orthogonalisation are treated as
/// linearly dependent.
pub const ORTHO_TOL: f64 = 1e-12;

/// Cholesky factor of a symmetric positive-definite system, with the
/// condition-number guard applied.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    condition: f64,
}

impl SpdFactor {
    pub fn new(matrix: DMatrix<f64>, what: &str) -> Result<Self> {
        let condition = spd_condition(&matrix);
        if !(condition <= MAX_CONDITION) {
            return Err(DmapError::SingularSystem(format!(
                "{what} has estimated condition {condition:.3e} (limit {MAX_CONDITION:.0e})"
            )));
        }
        let chol = Cholesky::new(matrix).ok_or_else(|| {
            DmapError::SingularSystem(format!("{what} is not positive definite"))
        })?;
        Ok(Self { chol, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vector(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when the
/// smallest one is not strictly positive.
pub fn spd_condition(matrix: &DMatrix<f64>) -> f64 {
    if matrix.nrows() == 0 {
        return 1.0;
    }
    let eig = matrix.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `A Aᵀ + shift·I`.
pub fn gram_outer(a: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let mut g = a * a.transpose();
    for i in 0..g.nrows() {
        g[(i, i)] += shift;
    }
    symmetrize(&mut g);
    g
}

/// `Aᵀ A + shift·I`.
pub fn gram_inner(a: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let mut g = a.transpose() * a;
    for i in 0..g.nrows() {
        g[(i, i)] += shift;
    }
    symmetrize(&mut g);
    g
}

fn symmetrize(g: &mut DMatrix<f64>) {
    let n = g.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
}

/// Orthonormal basis of the column span of `a`, by modified Gram-Schmidt with
/// one re-orthogonalisation pass. Dependent columns are dropped.
pub fn orthonormal_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = a.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(a.ncols());
    for col in a.column_iter() {
        let mut v = col.clone_owned();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > ORTHO_TOL * scale.max(1.0) {
            basis.push(v / norm);
        }
    }
    if basis.is_empty() {
        DMatrix::zeros(a.nrows(), 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

/// Removes from `v` its component in the span of the orthonormal columns of
/// `basis` (two passes).
pub fn orthogonalize_against(v: &mut DVector<f64>, basis: &DMatrix<f64>) {
    for _ in 0..2 {
        for q in basis.column_iter() {
            let proj = q.dot(v);
            v.axpy(-proj, &q, 1.0);
        }
    }
}

/// Relative Frobenius change `‖new − old‖ / ‖old‖` (absolute change when
/// `old` is zero).
pub fn relative_change(old: &DMatrix<f64>, new: &DMatrix<f64>) -> f64 {
    let diff = (new - old).norm();
    let base = old.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_drops_dependent_columns() {
        let a = DMatrix::from_column_slice(3, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let q = orthonormal_basis(&a);
        assert_eq!(q.ncols(), 2);
        let qtq = q.transpose() * &q;
        assert!((qtq - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn condition_guard_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            SpdFactor::new(m, "test"),
            Err(DmapError::SingularSystem(_))
        ));
        let ok = SpdFactor::new(DMatrix::identity(3, 3) * 2.0, "id").unwrap();
        assert!((ok.condition() - 1.0).abs() < 1e-12);
    }
}
