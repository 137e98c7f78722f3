//! Thin singular value decomposition by one-sided Jacobi rotations.
//!
//! For a wide matrix `W` (`m <= n`) the rows of `W` are rotated pairwise until
//! they are mutually orthogonal. The accumulated rotation `Q` then satisfies
//! `Q W = diag(sigma) Vt`, so `U = Q^T`. Tall matrices are factored through
//! their transpose. Sweeps run in a fixed cyclic order, so identical inputs
//! give bit-identical factors.

use thiserror::Error;

use crate::matrix::{dot, norm2, Matrix};

/// Default relative threshold below which a singular value counts as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// A pair of rows is left alone once `|<g_p, g_q>| <= ROTATION_TOL * |g_p| |g_q|`.
const ROTATION_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvdError {
    #[error("non-finite matrix")]
    NonFinite,
    #[error("jacobi sweeps did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("rank-deficient: condition number infinite")]
    RankDeficient,
    #[error("factor dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid singular value {value} at index {index}")]
    InvalidSigma { index: usize, value: f64 },
}

/// Thin factorization `W = U diag(sigma) Vt` with `r = min(m, n)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    u: Matrix,
    sigma: Vec<f64>,
    vt: Matrix,
}

impl SvdFactors {
    /// Assembles factors, checking that `u` is `m x r`, `vt` is `r x n` and
    /// every singular value is finite and non-negative.
    pub fn new(u: Matrix, sigma: Vec<f64>, vt: Matrix) -> Result<Self, SvdError> {
        let r = sigma.len();
        if u.cols() != r || vt.rows() != r {
            return Err(SvdError::DimensionMismatch(format!(
                "u is {}x{}, sigma has {}, vt is {}x{}",
                u.rows(),
                u.cols(),
                r,
                vt.rows(),
                vt.cols()
            )));
        }
        if r != u.rows().min(vt.cols()) {
            return Err(SvdError::DimensionMismatch(format!(
                "thin factorization of a {}x{} matrix needs {} singular values, got {r}",
                u.rows(),
                vt.cols(),
                u.rows().min(vt.cols())
            )));
        }
        if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !s.is_finite() || **s < 0.0) {
            return Err(SvdError::InvalidSigma { index, value });
        }
        Ok(Self { u, sigma, vt })
    }

    /// Same singular vectors, different singular values.
    pub fn with_sigma(&self, sigma: Vec<f64>) -> Result<Self, SvdError> {
        Self::new(self.u.clone(), sigma, self.vt.clone())
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn vt(&self) -> &Matrix {
        &self.vt
    }

    /// Shape `(m, n)` of the factored matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.vt.cols())
    }

    /// Number of singular values above `tol * sigma_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let cutoff = tol * self.sigma.iter().fold(0.0_f64, |m, &s| m.max(s));
        self.sigma.iter().filter(|&&s| s > cutoff).count()
    }
}

/// Computes the thin SVD of `w`.
///
/// Singular values come back in non-increasing order (ties keep their
/// original row order). Each left singular vector is signed so that its
/// largest-magnitude component is non-negative, the first such component
/// winning ties.
pub fn svd(w: &Matrix) -> Result<SvdFactors, SvdError> {
    if !w.is_finite() {
        return Err(SvdError::NonFinite);
    }
    let (mut u, sigma, mut vt) = if w.rows() <= w.cols() {
        wide_svd(w)?
    } else {
        let (ut, sigma, vtt) = wide_svd(&w.transpose())?;
        (vtt.transpose(), sigma, ut.transpose())
    };
    fix_signs(&mut u, &mut vt);
    Ok(SvdFactors { u, sigma, vt })
}

fn wide_svd(w: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), SvdError> {
    let (m, n) = w.shape();
    let mut g = w.clone();
    let mut q = Matrix::identity(m);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for r in p + 1..m {
                let (alpha, beta, gamma) = {
                    let (gp, gq) = (g.row(p), g.row(r));
                    (dot(gp, gp), dot(gq, gq), dot(gp, gq))
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= ROTATION_TOL * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1.0_f64.hypot(zeta));
                let c = 1.0 / 1.0_f64.hypot(t);
                let s = c * t;
                rotate_rows(&mut g, p, r, c, s);
                rotate_rows(&mut q, p, r, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SvdError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = (0..m).map(|i| norm2(g.row(i))).collect();
    let mut order: Vec<usize> = (0..m).collect();
    // stable: equal singular values keep ascending row index
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let mut u = Matrix::zeros(m, m);
    let mut vt = Matrix::zeros(m, n);
    let mut missing = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        for (row, &qv) in q.row(i).iter().enumerate() {
            u[(row, k)] = qv;
        }
        let s = norms[i];
        if s > 0.0 {
            for (dst, &src) in vt.row_mut(k).iter_mut().zip(g.row(i)) {
                *dst = src / s;
            }
        } else {
            missing.push(k);
        }
    }
    complete_rows(&mut vt, &missing);
    Ok((u, sigma, vt))
}

fn rotate_rows(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = a.row_pair_mut(p, q);
    for (x, y) in head.iter_mut().zip(tail.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed (zero) rows of `vt` with unit vectors orthogonal to every
/// other row, picking the standard basis vector with the largest residual.
fn complete_rows(vt: &mut Matrix, missing: &[usize]) {
    let (r, n) = vt.shape();
    let mut filled: Vec<bool> = (0..r).map(|k| !missing.contains(&k)).collect();
    for &k in missing {
        let basis: Vec<Vec<f64>> = (0..r).filter(|&j| filled[j]).map(|j| vt.row(j).to_vec()).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for j in 0..n {
            let mut cand = vec![0.0; n];
            cand[j] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&cand, b);
                    for (c, bv) in cand.iter_mut().zip(b) {
                        *c -= proj * bv;
                    }
                }
            }
            let len = norm2(&cand);
            if best.as_ref().is_none_or(|(l, _)| len > *l) {
                best = Some((len, cand));
            }
        }
        let (len, cand) = best.expect("n >= 1");
        for (dst, c) in vt.row_mut(k).iter_mut().zip(cand) {
            *dst = c / len;
        }
        filled[k] = true;
    }
}

fn fix_signs(u: &mut Matrix, vt: &mut Matrix) {
    let (m, r) = u.shape();
    for k in 0..r {
        let mut pivot = 0;
        for i in 1..m {
            if u[(i, k)].abs() > u[(pivot, k)].abs() {
                pivot = i;
            }
        }
        if u[(pivot, k)] < 0.0 {
            for i in 0..m {
                u[(i, k)] = -u[(i, k)];
            }
            for x in vt.row_mut(k) {
                *x = -*x;
            }
        }
    }
}

/// `U diag(sigma) Vt`.
pub fn reconstruct(f: &SvdFactors) -> Matrix {
    let (m, n) = f.shape();
    let mut out = Matrix::zeros(m, n);
    for (k, &s) in f.sigma.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let v = f.vt.row(k);
        for i in 0..m {
            let coef = f.u[(i, k)] * s;
            if coef == 0.0 {
                continue;
            }
            for (o, &vv) in out.row_mut(i).iter_mut().zip(v) {
                *o += coef * vv;
            }
        }
    }
    out
}

/// Moore-Penrose inverse `V diag(sigma+) U^T`, where `sigma+ = 1/sigma` for
/// `sigma > tol * sigma_max` and `0` otherwise.
pub fn pseudoinverse(f: &SvdFactors, tol: f64) -> Matrix {
    assert!(tol >= 0.0, "tolerance must be non-negative");
    let (m, n) = f.shape();
    let cutoff = tol * f.sigma.first().copied().unwrap_or(0.0);
    let mut out = Matrix::zeros(n, m);
    for (k, &s) in f.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        let v = f.vt.row(k);
        for (j, &vj) in v.iter().enumerate() {
            let coef = vj * inv;
            if coef == 0.0 {
                continue;
            }
            for i in 0..m {
                out[(j, i)] += coef * f.u[(i, k)];
            }
        }
    }
    out
}

/// `sigma_max / sigma_min`, or [`SvdError::RankDeficient`] when the smallest
/// singular value is zero.
pub fn condition_number(f: &SvdFactors) -> Result<f64, SvdError> {
    let max = f.sigma.iter().fold(0.0_f64, |m, &s| m.max(s));
    let min = f.sigma.iter().fold(f64::INFINITY, |m, &s| m.min(s));
    if min == 0.0 {
        return Err(SvdError::RankDeficient);
    }
    Ok(max / min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthogonality_defect(a: &Matrix) -> f64 {
        // a^T a - I for the columns of a
        let ata = a.transpose().matmul(a);
        ata.max_abs_diff(&Matrix::identity(ata.rows()))
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.sigma(), &[1.0, 1.0, 1.0]);
        assert!(reconstruct(&f).max_abs_diff(&Matrix::identity(3)) <= 1e-12);
    }

    #[test]
    fn two_by_two_closed_form() {
        let w = Matrix::from_rows(&[[3.0, 0.0], [4.0, 5.0]]);
        let f = svd(&w).unwrap();
        let expect = [3.0 * 5.0_f64.sqrt(), 5.0_f64.sqrt()];
        for (s, e) in f.sigma().iter().zip(expect) {
            assert!((s - e).abs() <= 1e-12 * e, "{s} vs {e}");
        }
    }

    #[test]
    fn diagonal_with_zero() {
        let w = Matrix::from_diag(3, 3, &[4.0, 1.0, 0.0]);
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma(), &[4.0, 1.0, 0.0]);
        assert!(orthogonality_defect(f.u()) <= 1e-12);
        assert!(orthogonality_defect(&f.vt().transpose()) <= 1e-12);
    }

    #[test]
    fn zero_matrix_gets_orthonormal_factors() {
        let f = svd(&Matrix::zeros(3, 5)).unwrap();
        assert_eq!(f.sigma(), &[0.0, 0.0, 0.0]);
        assert!(orthogonality_defect(&f.vt().transpose()) <= 1e-12);
        assert_eq!(reconstruct(&f), Matrix::zeros(3, 5));
    }

    #[test]
    fn tall_matrix_goes_through_transpose() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let f = svd(&w).unwrap();
        assert_eq!(f.u().shape(), (3, 2));
        assert_eq!(f.vt().shape(), (2, 2));
        assert!(reconstruct(&f).relative_frobenius_error(&w) <= 1e-14);
        assert!(orthogonality_defect(f.u()) <= 1e-12);
    }

    #[test]
    fn sign_convention_holds() {
        let w = Matrix::from_rows(&[[-2.0, 0.5, 0.1], [0.3, -1.0, 0.2]]);
        let f = svd(&w).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = (0..2).map(|i| f.u()[(i, k)]).collect();
            let pivot = col.iter().fold(0.0_f64, |m, x| if x.abs() > m.abs() { *x } else { m });
            assert!(pivot >= 0.0);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let w = Matrix::from_rows(&[[1.0, f64::NAN]]);
        assert_eq!(svd(&w), Err(SvdError::NonFinite));
    }

    #[test]
    fn zero_sigma_reconstructs_zero() {
        let f = svd(&Matrix::identity(3)).unwrap().with_sigma(vec![0.0; 3]).unwrap();
        assert_eq!(reconstruct(&f), Matrix::zeros(3, 3));
    }

    #[test]
    fn factor_dimension_mismatch() {
        let err = SvdFactors::new(Matrix::identity(2), vec![1.0, 1.0], Matrix::identity(3));
        assert!(matches!(err, Err(SvdError::DimensionMismatch(_))));
        let err = SvdFactors::new(Matrix::identity(2), vec![1.0, -1.0], Matrix::identity(2));
        assert!(matches!(err, Err(SvdError::InvalidSigma { index: 1, .. })));
    }

    #[test]
    fn pseudoinverse_cases() {
        let f = svd(&Matrix::from_diag(2, 2, &[2.0, 0.0])).unwrap();
        let p = pseudoinverse(&f, 1e-12);
        assert!(p.max_abs_diff(&Matrix::from_diag(2, 2, &[0.5, 0.0])) <= 1e-15);

        let f = svd(&Matrix::identity(4)).unwrap();
        assert!(pseudoinverse(&f, 1e-12).max_abs_diff(&Matrix::identity(4)) <= 1e-15);

        let w = Matrix::from_rows(&[[3.0, 0.0], [4.0, 5.0]]);
        let p = pseudoinverse(&svd(&w).unwrap(), DEFAULT_RANK_TOL);
        let inv = Matrix::from_rows(&[[1.0 / 3.0, 0.0], [-4.0 / 15.0, 1.0 / 5.0]]);
        assert!(p.max_abs_diff(&inv) <= 1e-14);
    }

    #[test]
    fn condition_numbers() {
        let c = |d: &[f64]| condition_number(&svd(&Matrix::from_diag(d.len(), d.len(), d)).unwrap());
        assert_eq!(c(&[100.0, 1.0]), Ok(100.0));
        assert_eq!(c(&[4.0, 1.0]), Ok(4.0));
        assert_eq!(c(&[1.0; 5]), Ok(1.0));
        assert_eq!(c(&[2.0, 0.0]), Err(SvdError::RankDeficient));
    }

    #[test]
    fn rank_counts_above_tolerance() {
        let f = svd(&Matrix::from_diag(3, 3, &[4.0, 1e-14, 0.0])).unwrap();
        assert_eq!(f.rank(DEFAULT_RANK_TOL), 1);
        assert_eq!(f.rank(0.0), 2);
    }
}
