//! Small dense helpers on top of nalgebra for the symmetric matrices that
//! show up everywhere in the estimator (information, Gram, weighting).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// How a symmetric PSD matrix was inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inversion {
    /// Plain Cholesky inverse.
    Exact,
    /// Cholesky inverse after adding `ridge * mean(diag) * I`.
    Ridge(f64),
    /// Moore-Penrose pseudo-inverse from the eigen-decomposition.
    Pseudo { rank: usize },
}

pub const RCOND_FLOOR: f64 = 1e-12;
const RIDGE_START: f64 = 1e-8;
const RIDGE_MAX: f64 = 1e-4;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && max_abs(&(m - m.transpose())) <= tol * (1.0 + max_abs(m))
}

/// Eigen-decomposition of the symmetrized input.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

/// Ratio of smallest to largest absolute eigenvalue; 0 for the zero matrix.
pub fn rcond_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = sym_eigen(m);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| {
            (lo.min(v.abs()), hi.max(v.abs()))
        });
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))?;
    let inv = chol.inverse();
    Some(symmetrize(&inv))
}

/// Solve `m x = b` for symmetric positive definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))?;
    Some(chol.solve(b))
}

/// Pseudo-inverse of a symmetric matrix, zeroing eigenvalues with
/// `|lambda| <= rel_tol * max|lambda|`.
pub fn pinv_sym(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let eig = sym_eigen(m);
    let hi = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cut = rel_tol * hi;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > cut && lambda != 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    (symmetrize(&out), rank)
}

/// Invert a symmetric PSD matrix that may be ill-conditioned.
///
/// Exactly rank-deficient input (eigenvalues at round-off level) goes to the
/// pseudo-inverse. Full-rank input is inverted by Cholesky when its
/// reciprocal condition is at least `RCOND_FLOOR`; otherwise, or when
/// Cholesky fails, a ridge `eps * mean(diag) * I` is added with eps escalating
/// tenfold from 1e-8 to 1e-4, and the pseudo-inverse is the last resort.
pub fn invert_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, Inversion) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), Inversion::Exact);
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let hi = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let roundoff = (n as f64) * f64::EPSILON * hi;
    let lo = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);

    if hi == 0.0 || lo <= roundoff {
        if lo >= -roundoff {
            let (p, rank) = pinv_sym(&sym, n as f64 * f64::EPSILON);
            return (p, Inversion::Pseudo { rank });
        }
    } else if lo / hi >= RCOND_FLOOR {
        if let Some(inv) = spd_inverse(&sym) {
            return (inv, Inversion::Exact);
        }
    }

    let mean_diag = sym.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut eps = RIDGE_START;
    while eps <= RIDGE_MAX * (1.0 + 1e-9) {
        let mut ridged = sym.clone();
        for i in 0..n {
            ridged[(i, i)] += eps * mean_diag;
        }
        if rcond_sym(&ridged) >= RCOND_FLOOR {
            if let Some(inv) = spd_inverse(&ridged) {
                log::debug!("inverted with ridge {eps:e}");
                return (inv, Inversion::Ridge(eps));
            }
        }
        eps *= 10.0;
    }
    let (p, rank) = pinv_sym(&sym, n as f64 * f64::EPSILON);
    (p, Inversion::Pseudo { rank })
}

/// Clip eigenvalues below `floor` and rescale back to unit diagonal.
/// Returns the repaired matrix and the Frobenius distance from the input.
pub fn nearest_correlation_by_clipping(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, f64) {
    let eig = sym_eigen(m);
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let n = m.nrows();
    let mut out = rebuilt.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = rebuilt[(i, j)] / (rebuilt[(i, i)] * rebuilt[(j, j)]).sqrt();
        }
    }
    let out = symmetrize(&out);
    let dist = (&out - m).norm();
    (out, dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_well_conditioned_is_exact() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let (inv, how) = invert_psd(&m);
        assert_eq!(how, Inversion::Exact);
        let id = &m * &inv;
        assert!(max_abs(&(id - DMatrix::identity(2, 2))) < 1e-14);
    }

    #[test]
    fn rank_deficient_goes_to_pseudo_inverse() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let m = &v * v.transpose();
        let (inv, how) = invert_psd(&m);
        assert_eq!(how, Inversion::Pseudo { rank: 1 });
        // pinv of v v' is v v' / |v|^4
        let expect = &m / 81.0;
        assert!(max_abs(&(inv - expect)) < 1e-14);
    }

    #[test]
    fn near_singular_uses_ridge() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let (_, how) = invert_psd(&m);
        assert_eq!(how, Inversion::Ridge(1e-8));
    }

    #[test]
    fn clipping_restores_psd_unit_diagonal() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        let (fixed, dist) = nearest_correlation_by_clipping(&m, 1e-8);
        assert!(dist > 0.0);
        let eig = sym_eigen(&fixed);
        assert!(eig.eigenvalues.iter().all(|&v| v > -1e-12));
        for i in 0..3 {
            assert!((fixed[(i, i)] - 1.0).abs() < 1e-12);
        }
    }
}
