//! Small dense helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, LU};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance for PSD tests on model data.
pub const PSD_REL_TOL: f64 = 1e-10;
/// Condition-number ceiling before a factorization is declared singular.
pub const COND_LIMIT: f64 = 1e12;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Extreme eigenvalues of the symmetric part of `m`: (min, max |λ|).
pub fn eig_extremes(m: &Mat) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max_abs = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (min, max_abs)
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    eig_extremes(m).0
}

/// PSD up to a relative tolerance on the smallest eigenvalue.
pub fn is_psd(m: &Mat) -> bool {
    let (min, max_abs) = eig_extremes(m);
    min >= -PSD_REL_TOL * max_abs
}

/// Strict definiteness with the scale-aware threshold `1e-10 * max(1, spectral radius)`.
pub fn is_pd_scaled(m: &Mat) -> bool {
    let (min, max_abs) = eig_extremes(m);
    min > PSD_REL_TOL * max_abs.max(1.0)
}

pub fn cholesky(m: &Mat) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// 2-norm condition number from singular values. Infinite for exactly singular input.
pub fn condition_number(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// LU factorization that refuses ill-conditioned input.
pub fn factor(m: &Mat) -> Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if condition_number(m) > COND_LIMIT {
        return None;
    }
    Some(m.clone().lu())
}

pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    cholesky(m).map(|c| c.inverse())
}

pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

pub fn quad_form(x: &Vector, m: &Mat) -> f64 {
    x.dot(&(m * x))
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Symmetric square root via eigen-decomposition; negative eigenvalues are clamped to zero.
pub fn psd_sqrt(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}
