//! Symmetric positive-definite factorization of information matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Plans whose (diagonally equilibrated) information matrix has a 2-norm
/// condition number at or above this value are rejected as unidentifiable.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Cholesky factor of `S = D⁻¹ M D⁻¹`, `D = sqrt(diag M)`.
///
/// Equilibration makes the condition number independent of parameter units
/// (mm, rad and rad/(N·mm) columns differ by many orders of magnitude); all
/// results are mapped back to the original units.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    inv_scale: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
    condition: f64,
}

impl SpdFactor {
    /// Factors `m`; `name` labels parameter `i` in error messages.
    pub fn new(m: &DMatrix<f64>, name: impl Fn(usize) -> String) -> Result<Self> {
        let d = m.nrows();
        debug_assert_eq!(d, m.ncols());
        if let Some(i) = (0..d).find(|&i| !(m[(i, i)] > 0.0 && m[(i, i)].is_finite())) {
            return Err(Error::Unidentifiable {
                condition: f64::INFINITY,
                limit: CONDITION_LIMIT,
                directions: vec![format!("{} (no information)", name(i))],
            });
        }
        let inv_scale = DVector::from_iterator(d, (0..d).map(|i| 1.0 / m[(i, i)].sqrt()));
        let mut s = m.clone();
        for j in 0..d {
            for i in 0..d {
                s[(i, j)] *= inv_scale[i] * inv_scale[j];
            }
        }
        let eig = s.symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition < CONDITION_LIMIT) {
            return Err(Error::Unidentifiable {
                condition,
                limit: CONDITION_LIMIT,
                directions: null_directions(&s, &name),
            });
        }
        let chol = Cholesky::new(s.clone()).ok_or_else(|| Error::Unidentifiable {
            condition,
            limit: CONDITION_LIMIT,
            directions: null_directions(&s, &name),
        })?;
        let lower = chol.l();
        Ok(Self { inv_scale, chol, lower, condition })
    }

    pub fn dim(&self) -> usize {
        self.inv_scale.len()
    }

    /// 2-norm condition number of the equilibrated matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `M⁻¹ b` for a d-vector `b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled = b.component_mul(&self.inv_scale);
        self.chol.solve(&scaled).component_mul(&self.inv_scale)
    }

    /// Explicit `M⁻¹`; only used for reporting covariances.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        let d = self.dim();
        for j in 0..d {
            for i in 0..d {
                inv[(i, j)] *= self.inv_scale[i] * self.inv_scale[j];
            }
        }
        inv
    }

    /// `trace(B M⁻¹ Bᵀ)` for an r × d matrix `B`, through a triangular solve.
    pub fn weighted_trace(&self, b: &DMatrix<f64>) -> f64 {
        let mut bt = b.transpose();
        for i in 0..self.dim() {
            bt.row_mut(i).scale_mut(self.inv_scale[i]);
        }
        let x = self
            .lower
            .solve_lower_triangular(&bt)
            .expect("Cholesky factor has a positive diagonal");
        x.norm_squared()
    }
}

/// Describes the near-null eigenvectors of an equilibrated matrix.
fn null_directions(s: &DMatrix<f64>, name: &impl Fn(usize) -> String) -> Vec<String> {
    let eig = SymmetricEigen::new(s.clone());
    let hi = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::new();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > hi / CONDITION_LIMIT {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        // sign-normalise so the largest component is positive
        let imax = v.iamax();
        let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
        let terms: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() >= 0.1)
            .map(|(i, c)| format!("{:+.3}*{}", sign * c, name(i)))
            .collect();
        out.push(terms.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn label(i: usize) -> String {
        format!("p{i}")
    }

    #[test]
    fn identity_round_trip() {
        let f = SpdFactor::new(&DMatrix::identity(3, 3), label).unwrap();
        assert_relative_eq!(f.inverse(), DMatrix::identity(3, 3));
        assert_relative_eq!(f.weighted_trace(&DMatrix::identity(3, 3)), 3.0);
        assert_relative_eq!(f.condition(), 1.0);
    }

    #[test]
    fn badly_scaled_but_well_posed_is_accepted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-12, 1.0, 1e12]));
        let f = SpdFactor::new(&m, label).unwrap();
        assert_relative_eq!(f.condition(), 1.0);
        assert_relative_eq!(f.inverse()[(0, 0)], 1e12, max_relative = 1e-12);
    }

    #[test]
    fn rank_deficient_names_the_direction() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let err = SpdFactor::new(&m, label).unwrap_err();
        match err {
            Error::Unidentifiable { directions, .. } => {
                assert_eq!(directions.len(), 1);
                assert!(directions[0].contains("p0") && directions[0].contains("p1"));
                assert!(!directions[0].contains("p2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_diagonal_is_unidentifiable() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(SpdFactor::new(&m, label).unwrap_err().is_unidentifiable());
    }

    #[test]
    fn solve_matches_inverse() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = SpdFactor::new(&m, label).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_relative_eq!(f.solve_vec(&b), f.inverse() * &b, epsilon = 1e-12);
        assert_relative_eq!(&m * f.inverse(), DMatrix::identity(3, 3), epsilon = 1e-12);
    }
}
