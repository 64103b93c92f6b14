//! Dense linear algebra shared by the rest of the crate.
//!
//! Everything here works on small matrices (tens of rows), so the routines
//! favour directness over asymptotic efficiency: the Lyapunov solver vectorizes
//! with Kronecker products, ranks come from singular values, and least squares
//! goes through a Householder QR of the design matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{dims, Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used for every rank decision.
pub const RANK_TOL: f64 = 1e-10;

/// Eigenvalues must sit left of this real part to count as stable.
pub const HURWITZ_MARGIN: f64 = -1e-12;

pub(crate) fn ensure_square(m: &Mat, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: "square matrix".into(),
            got: dims(m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

pub(crate) fn ensure_shape(m: &Mat, rows: usize, cols: usize, context: &'static str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::DimensionMismatch {
            context,
            expected: dims(rows, cols),
            got: dims(m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

pub(crate) fn ensure_finite(m: &Mat, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

/// Largest real part over the spectrum of a square matrix.
///
/// Returns `+inf` if the Schur iteration fails to converge, so callers treat
/// the matrix as unstable.
pub fn spectral_abscissa(a: &Mat) -> f64 {
    if a.is_empty() {
        return f64::NEG_INFINITY;
    }
    match Schur::try_new(a.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max),
        None => f64::INFINITY,
    }
}

/// True iff every eigenvalue of `a` has real part below [`HURWITZ_MARGIN`].
pub fn is_hurwitz(a: &Mat) -> bool {
    a.nrows() == a.ncols() && spectral_abscissa(a) < HURWITZ_MARGIN
}

pub fn singular_values(m: &Mat) -> Vector {
    if m.is_empty() {
        return Vector::zeros(0);
    }
    m.singular_values()
}

/// Numerical rank with the crate-wide relative tolerance.
pub fn rank(m: &Mat) -> usize {
    rank_from_singular_values(&singular_values(m))
}

fn rank_from_singular_values(sv: &Vector) -> usize {
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// Moore–Penrose pseudoinverse through the SVD.
pub fn pseudoinverse(c: &Mat) -> Mat {
    let (r, k) = c.shape();
    if c.is_empty() {
        return Mat::zeros(k, r);
    }
    let svd = c.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let mut out = Mat::zeros(k, r);
    if smax == 0.0 {
        return out;
    }
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_TOL * smax {
            // out += v_i * u_i^T / s
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out += (vi * ui.transpose()) / s;
        }
    }
    out
}

/// Kalman rank test `rank[C | AC | ... | A^{n-1}C] == n`.
pub fn kalman_controllable(a: &Mat, c: &Mat) -> Result<bool> {
    ensure_square(a, "kalman_controllable: A")?;
    let n = a.nrows();
    if c.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "kalman_controllable: C",
            expected: format!("{n} rows"),
            got: dims(c.nrows(), c.ncols()),
        });
    }
    if n == 0 {
        return Ok(true);
    }
    Ok(rank(&controllability_matrix(a, c)) == n)
}

pub fn controllability_matrix(a: &Mat, c: &Mat) -> Mat {
    let n = a.nrows();
    let m = c.ncols();
    let mut out = Mat::zeros(n, n * m);
    let mut block = c.clone();
    for j in 0..n {
        out.columns_mut(j * m, m).copy_from(&block);
        block = a * &block;
    }
    out
}

/// Solves `A Σ + Σ Aᵀ + Q = 0` for a Hurwitz `A`.
///
/// The equation is vectorized as `(I ⊗ A + A ⊗ I) vec Σ = -vec Q` and solved
/// by LU, followed by one step of iterative refinement. The result is
/// symmetrized exactly.
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    ensure_square(a, "solve_lyapunov: A")?;
    let n = a.nrows();
    ensure_shape(q, n, n, "solve_lyapunov: Q")?;
    ensure_finite(a, "solve_lyapunov: A")?;
    ensure_finite(q, "solve_lyapunov: Q")?;
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let abscissa = spectral_abscissa(a);
    if abscissa >= HURWITZ_MARGIN {
        return Err(Error::NotHurwitz("solve_lyapunov: A", abscissa));
    }

    let eye = Mat::identity(n, n);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let lu = op.lu();
    let solve = |rhs: &Mat| -> Result<Mat> {
        let v = Vector::from_column_slice(rhs.as_slice());
        let x = lu
            .solve(&(-v))
            .ok_or(Error::NotHurwitz("solve_lyapunov: A", abscissa))?;
        Ok(Mat::from_column_slice(n, n, x.as_slice()))
    };

    let mut sigma = solve(q)?;
    let residual = a * &sigma + &sigma * a.transpose() + q;
    sigma += solve(&residual)?;
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.nrows() == m.ncols() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Lower Cholesky factor `L` with `L Lᵀ = m`.
pub fn cholesky_factor(m: &Mat, context: &'static str) -> Result<Mat> {
    Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite(context))
}

/// Outcome of [`solve_least_squares`].
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coeffs: Vector,
    /// Numerical rank of the design matrix.
    pub rank: usize,
    /// Ridge actually applied.
    pub ridge: f64,
    pub max_singular_value: f64,
}

impl LeastSquares {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.coeffs.len()
    }
}

/// `argmin ‖Aα − b‖² + ridge·‖α‖²` through a Householder QR of `A`.
///
/// With `ridge == 0` and a rank-deficient `A` the minimum-norm solution is
/// returned (computed from the SVD of the triangular factor) and the deficit is
/// visible in [`LeastSquares::rank`].
pub fn solve_least_squares(a: &Mat, b: &Vector, ridge: f64) -> Result<LeastSquares> {
    let (m, k) = a.shape();
    if m == 0 || k == 0 || b.len() != m {
        return Err(Error::DimensionMismatch {
            context: "solve_least_squares",
            expected: format!("{m} observations, at least one of each"),
            got: format!("design {}, rhs {}", dims(m, k), b.len()),
        });
    }
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be nonnegative, got {ridge}")));
    }

    let qr = a.clone().qr();
    let r = qr.r();
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let p = r.nrows();
    let qtb = qtb.rows(0, p).into_owned();

    let sv = singular_values(&r);
    let rank = rank_from_singular_values(&sv);

    let coeffs = if ridge > 0.0 {
        // ‖Aα − b‖² = ‖Rα − Qᵀb‖² + const, so only the small triangle is augmented.
        let mut stacked = Mat::zeros(p + k, k);
        stacked.rows_mut(0, p).copy_from(&r);
        stacked
            .rows_mut(p, k)
            .copy_from(&(Mat::identity(k, k) * ridge.sqrt()));
        let mut rhs = Vector::zeros(p + k);
        rhs.rows_mut(0, p).copy_from(&qtb);
        let qr2 = stacked.qr();
        let r2 = qr2.r();
        qr2.q_tr_mul(&mut rhs);
        r2.solve_upper_triangular(&rhs.rows(0, k).into_owned())
            .expect("ridge-augmented triangle is nonsingular")
    } else if rank == k && p == k {
        r.solve_upper_triangular(&qtb)
            .expect("full-rank triangle is nonsingular")
    } else {
        min_norm_solve(&r, &qtb)
    };

    Ok(LeastSquares {
        coeffs,
        rank,
        ridge,
        max_singular_value: sv.iter().cloned().fold(0.0, f64::max),
    })
}

fn min_norm_solve(r: &Mat, rhs: &Vector) -> Vector {
    let k = r.ncols();
    let svd = r.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let mut x = Vector::zeros(k);
    if smax == 0.0 {
        return x;
    }
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_TOL * smax {
            let coef = u.column(i).dot(rhs) / s;
            x += v_t.row(i).transpose() * coef;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent Lyapunov oracle: Van Loan's block exponential gives the
    /// exact one-step discretization, then Smith doubling sums the series
    /// `Σ = Σ_j Φ^j Q_h Φ^{jT}`.
    fn lyapunov_van_loan(a: &Mat, q: &Mat) -> Mat {
        let n = a.nrows();
        let h = 0.1;
        let mut big = Mat::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(&(-a * h));
        big.view_mut((0, n), (n, n)).copy_from(&(q * h));
        big.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * h));
        let e = big.exp();
        let phi_t = e.view((n, n), (n, n)).into_owned();
        let phi = phi_t.transpose();
        let qh = &phi * e.view((0, n), (n, n)).into_owned();
        let mut sigma = qh.clone();
        let mut power = phi.clone();
        for _ in 0..60 {
            sigma = &sigma + &power * &sigma * power.transpose();
            power = &power * &power;
        }
        sigma
    }

    fn lyap_residual(a: &Mat, s: &Mat, q: &Mat) -> f64 {
        (a * s + s * a.transpose() + q).norm()
    }

    #[test]
    fn lyapunov_scaled_identity() {
        let a = Mat::identity(3, 3) * -0.5;
        let q = Mat::identity(3, 3);
        let s = solve_lyapunov(&a, &q).unwrap();
        assert_abs_diff_eq!(s, Mat::identity(3, 3), epsilon = 1e-12);
        assert_abs_diff_eq!(s, lyapunov_van_loan(&a, &q), epsilon = 1e-10);
    }

    #[test]
    fn lyapunov_small_closed_forms() {
        let s = solve_lyapunov(&Mat::from_element(1, 1, -2.0), &Mat::from_element(1, 1, 4.0)).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 1.0, epsilon = 1e-14);
        let s = solve_lyapunov(&-Mat::identity(2, 2), &(Mat::identity(2, 2) * 2.0)).unwrap();
        assert_abs_diff_eq!(s, Mat::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_matches_van_loan_on_nonnormal() {
        let a = Mat::from_row_slice(3, 3, &[-1.0, 4.0, 0.0, 0.0, -2.0, 1.0, 0.5, 0.0, -3.0]);
        assert!(is_hurwitz(&a));
        let c = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.3, 1.0, 0.0, 2.0]);
        let q = &c * c.transpose();
        let s = solve_lyapunov(&a, &q).unwrap();
        let oracle = lyapunov_van_loan(&a, &q);
        assert!((&s - &oracle).norm() <= 1e-9 * oracle.norm());
        assert!(lyap_residual(&a, &s, &q) <= 1e-10 * q.norm().max(1.0));
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let err = solve_lyapunov(&Mat::identity(2, 2), &Mat::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::NotHurwitz(..)));
        let err = solve_lyapunov(&-Mat::identity(2, 2), &Mat::identity(3, 3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn pinv_examples() {
        assert_abs_diff_eq!(pseudoinverse(&Mat::identity(2, 2)), Mat::identity(2, 2), epsilon = 1e-15);
        assert_eq!(pseudoinverse(&Mat::zeros(2, 2)), Mat::zeros(2, 2));
        let col = Mat::from_column_slice(2, 1, &[1.0, 1.0]);
        let p = pseudoinverse(&col);
        assert_eq!(p.shape(), (1, 2));
        assert_abs_diff_eq!(p, Mat::from_row_slice(1, 2, &[0.5, 0.5]), epsilon = 1e-15);
        // Penrose conditions
        assert!((&col * &p * &col - &col).norm() < 1e-12);
        assert!((&p * &col * &p - &p).norm() < 1e-12);
        let cp = &col * &p;
        assert!((&cp - cp.transpose()).norm() < 1e-12);
    }

    #[test]
    fn kalman_examples() {
        assert!(kalman_controllable(&Mat::zeros(2, 2), &Mat::identity(2, 2)).unwrap());
        let a = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]));
        let c = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(!kalman_controllable(&a, &c).unwrap());
        assert!(kalman_controllable(&a, &Mat::from_column_slice(2, 1, &[1.0, 1.0])).unwrap());
        assert!(kalman_controllable(&a, &Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&-Mat::identity(3, 3)));
        assert!(!is_hurwitz(&Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])));
        assert!(is_hurwitz(&(Mat::identity(3, 3) * -0.5)));
        assert!(!is_hurwitz(&Mat::zeros(2, 3)));
    }

    #[test]
    fn least_squares_examples() {
        let ls = solve_least_squares(&Mat::identity(3, 3), &Vector::from_vec(vec![1.0, 2.0, 3.0]), 0.0).unwrap();
        assert_abs_diff_eq!(ls.coeffs, Vector::from_vec(vec![1.0, 2.0, 3.0]), epsilon = 1e-14);
        assert_eq!(ls.rank, 3);

        let ls = solve_least_squares(&Mat::from_element(2, 1, 1.0), &Vector::from_vec(vec![0.0, 2.0]), 0.0).unwrap();
        assert_abs_diff_eq!(ls.coeffs[0], 1.0, epsilon = 1e-14);

        // Solutions of the normal equations are (1, t); the shortest is (1, 0).
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let ls = solve_least_squares(&a, &Vector::from_vec(vec![1.0, 1.0]), 0.0).unwrap();
        assert!(ls.rank_deficient());
        assert_abs_diff_eq!(ls.coeffs, Vector::from_vec(vec![1.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn least_squares_ridge_matches_normal_equations() {
        let a = Mat::from_row_slice(4, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 1.0, 1.0]);
        let b = Vector::from_vec(vec![1.0, 0.0, 2.0, -1.0]);
        let lam = 0.3;
        let ls = solve_least_squares(&a, &b, lam).unwrap();
        let normal = (a.transpose() * &a + Mat::identity(2, 2) * lam)
            .lu()
            .solve(&(a.transpose() * &b))
            .unwrap();
        assert_abs_diff_eq!(ls.coeffs, normal, epsilon = 1e-12);
    }

    #[test]
    fn least_squares_wide_system_is_min_norm() {
        let a = Mat::from_row_slice(1, 3, &[1.0, 2.0, 2.0]);
        let ls = solve_least_squares(&a, &Vector::from_vec(vec![9.0]), 0.0).unwrap();
        assert_eq!(ls.rank, 1);
        assert_abs_diff_eq!(ls.coeffs, Vector::from_vec(vec![1.0, 2.0, 2.0]), epsilon = 1e-12);
    }
}
