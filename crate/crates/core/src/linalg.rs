//! Dense kernels used by the filter: threshold-pivoted Cholesky, Householder
//! triangularization with a unique sign convention, and the stacked-block
//! update that yields the square-root measurement update.
//!
//! Everything here is a pure function of its inputs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry precondition of [`cholesky_factor`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Pivots at or below `PIVOT_TOL * max_diag` are treated as exact zeros.
pub const PIVOT_TOL: f64 = 1e-12;
/// Pivots below `-INDEFINITE_TOL` (scaled by the largest diagonal when > 1) are rejected.
pub const INDEFINITE_TOL: f64 = 1e-8;
/// Smallest admissible diagonal of the Delta block in [`block_qr_update`].
pub const DELTA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `P = F Fᵀ` with `F` lower-triangular.
    Lower,
    /// `P = Fᵀ F` with `F` upper-triangular.
    Upper,
}

/// Triangular square root of a symmetric PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrtFactor {
    pub factor: DMatrix<f64>,
    pub orientation: Orientation,
}

impl SqrtFactor {
    pub fn from_lower(factor: DMatrix<f64>) -> Self {
        Self {
            factor,
            orientation: Orientation::Lower,
        }
    }

    pub fn from_upper(factor: DMatrix<f64>) -> Self {
        Self {
            factor,
            orientation: Orientation::Upper,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_lower(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Lower-triangular `L` with `P = L Lᵀ`.
    pub fn lower(&self) -> DMatrix<f64> {
        match self.orientation {
            Orientation::Lower => self.factor.clone(),
            Orientation::Upper => self.factor.transpose(),
        }
    }

    /// Upper-triangular `R` with `P = Rᵀ R`.
    pub fn upper(&self) -> DMatrix<f64> {
        match self.orientation {
            Orientation::Lower => self.factor.transpose(),
            Orientation::Upper => self.factor.clone(),
        }
    }

    pub fn to_lower(self) -> Self {
        match self.orientation {
            Orientation::Lower => self,
            Orientation::Upper => Self::from_lower(self.factor.transpose()),
        }
    }

    /// The covariance the factor represents.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        match self.orientation {
            Orientation::Lower => &self.factor * self.factor.transpose(),
            Orientation::Upper => self.factor.transpose() * &self.factor,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.factor.iter().all(|v| v.is_finite())
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Lower Cholesky factor of a symmetric PSD matrix.
///
/// Pivots are taken in natural order so the result stays lower-triangular.
/// A pivot at or below `1e-12 * max_diag` is treated as an exact zero and its
/// column is zeroed; this handles the rank-deficient blocks that appear when a
/// random-walk variance is exactly zero.
pub fn cholesky_factor(m: &DMatrix<f64>) -> Result<SqrtFactor> {
    let n = check_square(m, "cholesky input")?;
    let scale = 1.0 + max_abs(m);
    let asym = (m - m.transpose()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let a = symmetrize(m);
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let zero_tol = PIVOT_TOL * max_diag;
    let neg_tol = INDEFINITE_TOL * max_diag.max(1.0);

    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if d < -neg_tol {
            return Err(Error::IndefiniteMatrix { index: j, pivot: d });
        }
        if d <= zero_tol {
            // Zero pivot: the rest of the column must vanish for a PSD input.
            for i in (j + 1)..n {
                let mut r = a[(i, j)];
                let mut di = a[(i, i)];
                for p in 0..j {
                    r -= l[(i, p)] * l[(j, p)];
                    di -= l[(i, p)] * l[(i, p)];
                }
                let bound = d.max(0.0) * di.max(0.0) + (neg_tol * neg_tol);
                if r * r > bound {
                    return Err(Error::IndefiniteMatrix { index: j, pivot: d });
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut r = a[(i, j)];
            for p in 0..j {
                r -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = r / ljj;
        }
    }
    Ok(SqrtFactor::from_lower(l))
}

/// Householder triangularization: returns the `cols x cols` upper-triangular
/// `R` with nonnegative diagonal such that `Rᵀ R = Aᵀ A`.
pub fn qr_triangularize(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::DimensionMismatch(format!(
            "triangularization needs rows >= cols, got {m}x{n}"
        )));
    }
    let mut w = a.clone();
    let mut v = vec![0.0; m];
    for j in 0..n {
        let mut below = 0.0;
        for i in (j + 1)..m {
            below += w[(i, j)] * w[(i, j)];
        }
        if below == 0.0 {
            continue;
        }
        let x0 = w[(j, j)];
        let norm = (x0 * x0 + below).sqrt();
        let alpha = if x0 > 0.0 { -norm } else { norm };
        v[j] = x0 - alpha;
        for i in (j + 1)..m {
            v[i] = w[(i, j)];
        }
        let vnorm2 = v[j] * v[j] + below;
        w[(j, j)] = alpha;
        for i in (j + 1)..m {
            w[(i, j)] = 0.0;
        }
        for c in (j + 1)..n {
            let mut s = 0.0;
            for i in j..m {
                s += v[i] * w[(i, c)];
            }
            let f = 2.0 * s / vnorm2;
            if f != 0.0 {
                for i in j..m {
                    w[(i, c)] -= f * v[i];
                }
            }
        }
    }
    let mut r = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let sign = if w[(i, i)] < 0.0 { -1.0 } else { 1.0 };
        for c in i..n {
            r[(i, c)] = sign * w[(i, c)];
        }
    }
    Ok(r)
}

/// Result of triangularizing the stacked measurement-update array.
#[derive(Debug, Clone)]
pub struct BlockUpdate {
    /// Upper-triangular `k x k` block with `ΔᵀΔ = S`.
    pub delta: DMatrix<f64>,
    /// `k x n` block to the right of Δ; `ΔᵀΥ = J_h P`.
    pub upsilon: DMatrix<f64>,
    /// Square root of the updated covariance (lower orientation).
    pub updated: SqrtFactor,
}

impl BlockUpdate {
    /// Filter gain `W = P J_hᵀ S⁻¹ = Υᵀ Δ⁻ᵀ` (`n x k`).
    pub fn gain(&self) -> Result<DMatrix<f64>> {
        let x = self
            .delta
            .solve_upper_triangular(&self.upsilon)
            .ok_or_else(|| Error::SingularDelta(min_diag(&self.delta)))?;
        Ok(x.transpose())
    }

    /// `S = ΔᵀΔ`.
    pub fn residual_cov(&self) -> DMatrix<f64> {
        self.delta.transpose() * &self.delta
    }
}

fn min_diag(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows().min(m.ncols()))
        .map(|i| m[(i, i)].abs())
        .fold(f64::INFINITY, f64::min)
}

/// Triangularizes `[[top_left, top_right], [bottom_left, bottom_right]]` and
/// partitions the result into `[[Δ, Υ], [0, R_upd]]`.
///
/// With `top_left = Θ̄ᵀ` (upper root of the measurement-noise term),
/// `top_right = 0`, `bottom_left = P̄ᵀ J_hᵀ` and `bottom_right = P̄ᵀ`, the
/// partition holds the innovation root, the cross term and the updated root.
pub fn block_qr_update(
    top_left: &DMatrix<f64>,
    top_right: &DMatrix<f64>,
    bottom_left: &DMatrix<f64>,
    bottom_right: &DMatrix<f64>,
) -> Result<BlockUpdate> {
    let k = check_square(top_left, "top-left block")?;
    let n = check_square(bottom_right, "bottom-right block")?;
    if top_right.shape() != (k, n) || bottom_left.shape() != (n, k) {
        return Err(Error::DimensionMismatch(format!(
            "block layout: top_right {:?} (want {:?}), bottom_left {:?} (want {:?})",
            top_right.shape(),
            (k, n),
            bottom_left.shape(),
            (n, k)
        )));
    }
    let mut stacked = DMatrix::<f64>::zeros(k + n, k + n);
    stacked.view_mut((0, 0), (k, k)).copy_from(top_left);
    stacked.view_mut((0, k), (k, n)).copy_from(top_right);
    stacked.view_mut((k, 0), (n, k)).copy_from(bottom_left);
    stacked.view_mut((k, k), (n, n)).copy_from(bottom_right);
    let r = qr_triangularize(&stacked)?;
    let delta = r.view((0, 0), (k, k)).into_owned();
    let md = min_diag(&delta);
    if md < DELTA_TOL {
        return Err(Error::SingularDelta(md));
    }
    let upsilon = r.view((0, k), (k, n)).into_owned();
    let updated = SqrtFactor::from_upper(r.view((k, k), (n, n)).into_owned()).to_lower();
    Ok(BlockUpdate {
        delta,
        upsilon,
        updated,
    })
}

/// Solves `A x = b` for symmetric positive definite `A` given its lower root.
pub fn solve_with_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let y = l.solve_lower_triangular(b)?;
    l.transpose().solve_upper_triangular(&y)
}

/// `log|A|` from a lower root with strictly positive diagonal.
pub fn log_det_from_lower(l: &DMatrix<f64>) -> Option<f64> {
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        a.shape() == b.shape() && (a - b).iter().all(|v| v.abs() <= tol)
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky_factor(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(l.factor, DMatrix::identity(2, 2));
        assert_eq!(l.orientation, Orientation::Lower);
    }

    #[test]
    fn cholesky_two_by_two() {
        let l = cholesky_factor(&dmatrix![4.0, 2.0; 2.0, 5.0]).unwrap();
        assert!(close(&l.factor, &dmatrix![2.0, 0.0; 1.0, 2.0], 1e-14));
    }

    #[test]
    fn cholesky_rank_one() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        let l = cholesky_factor(&m).unwrap();
        assert!(close(&l.factor, &dmatrix![1.0, 0.0; 1.0, 0.0], 1e-14));
        assert!(close(&l.reconstruct(), &m, 1e-12));
    }

    #[test]
    fn cholesky_zero_middle_pivot() {
        let m = dmatrix![2.0, 0.0, 1.0; 0.0, 0.0, 0.0; 1.0, 0.0, 3.0];
        let l = cholesky_factor(&m).unwrap();
        assert!(close(&l.reconstruct(), &m, 1e-12));
        assert_eq!(l.factor[(1, 1)], 0.0);
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let err = cholesky_factor(&dmatrix![1.0, 0.5; 0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NotSymmetric(_)));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(matches!(
            cholesky_factor(&dmatrix![1.0, 0.0; 0.0, -1.0]),
            Err(Error::IndefiniteMatrix { index: 1, .. })
        ));
        // zero pivot with a nonzero coupling
        assert!(matches!(
            cholesky_factor(&dmatrix![0.0, 1.0; 1.0, 0.0]),
            Err(Error::IndefiniteMatrix { index: 0, .. })
        ));
    }

    #[test]
    fn qr_identity_and_column() {
        let r = qr_triangularize(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(r, DMatrix::identity(2, 2));
        let r = qr_triangularize(&dmatrix![3.0; 4.0]).unwrap();
        assert!((r[(0, 0)] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn qr_nonnegative_diagonal() {
        let a = dmatrix![-1.0, 2.0; 0.5, -3.0; 2.0, 1.0];
        let r = qr_triangularize(&a).unwrap();
        assert!(r[(0, 0)] >= 0.0 && r[(1, 1)] >= 0.0);
        assert_eq!(r[(1, 0)], 0.0);
        assert!(close(&(r.transpose() * &r), &(a.transpose() * &a), 1e-12));
    }

    #[test]
    fn qr_rejects_wide() {
        assert!(matches!(
            qr_triangularize(&DMatrix::zeros(1, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn block_update_scalar() {
        let one = dmatrix![1.0];
        let upd = block_qr_update(&one, &dmatrix![0.0], &one, &one).unwrap();
        assert!((upd.delta[(0, 0)] - 2f64.sqrt()).abs() < 1e-14);
        assert!((upd.gain().unwrap()[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((upd.updated.reconstruct()[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn block_update_no_uncertainty() {
        let i2 = DMatrix::identity(2, 2);
        let z23 = DMatrix::zeros(2, 3);
        let z32 = DMatrix::zeros(3, 2);
        let z33 = DMatrix::zeros(3, 3);
        let upd = block_qr_update(&i2, &z23, &z32, &z33).unwrap();
        assert_eq!(upd.delta, i2);
        assert_eq!(upd.upsilon, z23);
        assert_eq!(upd.updated.factor, z33);
    }

    #[test]
    fn block_update_singular_delta() {
        let z = dmatrix![0.0];
        assert!(matches!(
            block_qr_update(&z, &z, &z, &z),
            Err(Error::SingularDelta(_))
        ));
    }

    #[test]
    fn block_update_bad_layout() {
        let one = dmatrix![1.0];
        assert!(matches!(
            block_qr_update(&one, &DMatrix::zeros(1, 2), &one, &DMatrix::identity(2, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn log_det_and_solve() {
        let m = dmatrix![4.0, 2.0; 2.0, 5.0];
        let l = cholesky_factor(&m).unwrap().factor;
        assert!((log_det_from_lower(&l).unwrap() - 16f64.ln()).abs() < 1e-14);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = solve_with_lower(&l, &b).unwrap();
        assert!(((&m * x) - b).norm() < 1e-14);
    }
}
