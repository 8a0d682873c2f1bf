//! Dense small-matrix kernels: modified-Cholesky (UDU^T) factorization,
//! modified weighted Gram-Schmidt orthogonalization and unit-triangular solves.
//!
//! These are the building blocks of the square-root-free filters: a symmetric
//! PSD matrix `P` is carried as `P = U * diag(d) * U^T` with `U` unit upper
//! triangular, and covariance updates are performed on pre-arrays via MWGS
//! instead of on `P` itself.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative tolerance used by the factorization kernels.
pub const DEFAULT_EPS: f64 = 1e-13;

/// Unit-upper-triangular factor `U` plus diagonal `d` representing a
/// symmetric PSD matrix `P = U * diag(d) * U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct UdFactor {
    pub u: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl UdFactor {
    /// Identity factor of dimension `n` (represents the identity matrix).
    pub fn identity(n: usize) -> Self {
        UdFactor {
            u: DMatrix::identity(n, n),
            d: DVector::from_element(n, 1.0),
        }
    }

    /// Factor representing a diagonal matrix with entries `d`.
    pub fn from_diagonal(d: DVector<f64>) -> Self {
        let n = d.len();
        UdFactor {
            u: DMatrix::identity(n, n),
            d,
        }
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// Restores the represented matrix `U * diag(d) * U^T`.
    ///
    /// The result is symmetric by construction.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in j..n {
                    let ui = if i == k { 1.0 } else { self.u[(i, k)] };
                    let uj = if j == k { 1.0 } else { self.u[(j, k)] };
                    acc += self.d[k] * ui * uj;
                }
                p[(i, j)] = acc;
                p[(j, i)] = acc;
            }
        }
        p
    }
}

/// Result of the MWGS transform: `pre_array = r * w^T` and
/// `w^T * diag(d_a) * w = diag(d_r)`.
#[derive(Debug, Clone)]
pub struct MwgsResult {
    /// Unit upper triangular post-array (s x s).
    pub r: DMatrix<f64>,
    /// Post-array diagonal weights (length s), all non-negative.
    pub d_r: DVector<f64>,
    /// MWGS transform vectors, one column per post-array row (r x s).
    pub w: DMatrix<f64>,
}

/// Factorizes a symmetric PSD matrix as `P = U * diag(d) * U^T` with `U`
/// unit upper triangular (upper variant, computed bottom-right to top-left).
///
/// Pivots in `[-tol, 0]` are clamped to zero and the corresponding column of
/// `U` defaults to the identity column, so singular PSD matrices (zero
/// process-noise rows) factorize cleanly.
pub fn udu_factorize(p: &DMatrix<f64>, eps: f64) -> Result<UdFactor> {
    let n = p.nrows();
    assert_eq!(p.ncols(), n, "udu_factorize requires a square matrix");

    let scale = p.amax().max(1.0);
    let tol = eps * scale;

    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((p[(i, j)] - p[(j, i)]).abs());
        }
    }
    if asym > tol {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tol,
        });
    }

    let mut u = DMatrix::identity(n, n);
    let mut d = DVector::zeros(n);
    // Work on a copy: entries above the pivot are updated in place.
    let mut a = p.clone();

    for j in (0..n).rev() {
        let mut pivot = a[(j, j)];
        if pivot < -tol {
            return Err(Error::IndefiniteMatrix { pivot, index: j });
        }
        if pivot < 0.0 {
            pivot = 0.0;
        }
        d[j] = pivot;
        if pivot > 0.0 {
            for i in 0..j {
                u[(i, j)] = a[(i, j)] / pivot;
            }
        } else {
            // Zero pivot: the whole column must be (numerically) zero,
            // otherwise the matrix is indefinite.
            for i in 0..j {
                if a[(i, j)].abs() > tol {
                    return Err(Error::IndefiniteMatrix {
                        pivot: a[(i, j)],
                        index: j,
                    });
                }
                u[(i, j)] = 0.0;
            }
        }
        for i in 0..j {
            for k in 0..=i {
                a[(k, i)] -= d[j] * u[(k, j)] * u[(i, j)];
            }
        }
    }

    Ok(UdFactor { u, d })
}

/// Modified weighted Gram-Schmidt orthogonalization.
///
/// Given a pre-array `pre` (s x r, r >= s) and non-negative weights `d_a`
/// (length r), computes a unit upper triangular `r` (s x s), non-negative
/// weights `d_r` and transform vectors `w` (r x s) such that
/// `pre = r * w^T` and `w^T * diag(d_a) * w = diag(d_r)`.
///
/// Rows are processed bottom-to-top so the lower blocks of a stacked
/// pre-array are orthogonalized first; this fixes the read-off layout of the
/// filter post-arrays.
///
/// Zero weights are permitted. Rows whose weighted norm vanishes exactly
/// receive `d_r = 0` and leave the corresponding column of the post-array
/// at the identity column. The classical derivation assumes strictly
/// positive weights; this extension keeps singular process-noise
/// covariances usable without epsilon inflation.
pub fn mwgs(pre: &DMatrix<f64>, d_a: &DVector<f64>, eps: f64) -> Result<MwgsResult> {
    let s = pre.nrows();
    let r_cols = pre.ncols();
    assert!(
        r_cols >= s,
        "mwgs pre-array must have at least as many columns as rows"
    );
    assert_eq!(d_a.len(), r_cols, "mwgs weight vector length mismatch");

    let wdot = |x: &DVector<f64>, y: &DVector<f64>| -> f64 {
        let mut acc = 0.0;
        for l in 0..r_cols {
            acc += d_a[l] * x[l] * y[l];
        }
        acc
    };

    // Largest weighted row norm, used to tell an all-zero weighted
    // pre-array apart from degenerate weights.
    let mut max_norm: f64 = 0.0;
    for i in 0..s {
        let row = pre.row(i).transpose();
        max_norm = max_norm.max(wdot(&row, &row));
    }

    let max_weight = d_a.amax();
    if max_weight <= eps && max_norm == 0.0 && pre.amax() > eps {
        return Err(Error::DegenerateWeights);
    }

    let mut v: Vec<DVector<f64>> = (0..s).map(|i| pre.row(i).transpose()).collect();
    let mut w = DMatrix::zeros(r_cols, s);
    let mut r = DMatrix::identity(s, s);
    let mut d_r = DVector::zeros(s);

    for j in (0..s).rev() {
        let wj = v[j].clone();
        let norm = wdot(&wj, &wj);
        w.set_column(j, &wj);
        // Only an exactly vanishing residual collapses the direction. The
        // weighted norm is a sum of squares with nonnegative weights, so a
        // tiny positive value is a genuine pivot (this is where the factored
        // update beats the dense Schur complement) and must be kept.
        if norm <= 0.0 {
            // Rank-collapsed direction: d_r = 0, post-array column stays at
            // the identity column. The remaining rows have no weighted
            // component along w_j, so no projection is needed.
            d_r[j] = 0.0;
            continue;
        }
        d_r[j] = norm;
        for i in 0..j {
            let c = wdot(&v[i], &wj) / norm;
            r[(i, j)] = c;
            v[i] -= &wj * c;
        }
    }

    Ok(MwgsResult { r, d_r, w })
}

/// Solves `u * x = b` with `u` unit upper triangular by back-substitution.
///
/// No division occurs (unit diagonal), so this is always solvable.
pub fn solve_unit_upper(u: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let c = x[j];
            x[i] -= u[(i, j)] * c;
        }
    }
    x
}

/// Solves `u^T * x = b` with `u` unit upper triangular (forward substitution
/// on the unit lower triangular transpose).
pub fn solve_unit_upper_transpose(u: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut x = b.clone();
    for i in 0..n {
        for j in 0..i {
            let c = x[j];
            x[i] -= u[(j, i)] * c;
        }
    }
    x
}

/// Applies `P^{-1} v` through the UD factors of `P`: two unit-triangular
/// solves and a diagonal scaling, never an explicit inverse.
pub fn ud_inverse_apply(f: &UdFactor, v: &DVector<f64>, eps: f64) -> Result<DVector<f64>> {
    let mut x = solve_unit_upper(&f.u, v);
    for i in 0..f.dim() {
        if f.d[i] <= eps {
            return Err(Error::SingularH {
                index: i,
                value: f.d[i],
            });
        }
        x[i] /= f.d[i];
    }
    Ok(solve_unit_upper_transpose(&f.u, &x))
}

/// Differentiates a UDU^T factorization: given `P = U * diag(d) * U^T` and
/// `dP`, returns `(dU, dd)` with `dU` strictly upper triangular.
///
/// Writes `U^{-1} dP U^{-T} = X D + dD + D X^T` with `X = U^{-1} dU` strictly
/// upper; the diagonal gives `dd` and the strict upper part gives `X`
/// column-scaled by `1/d`. Zero `d[j]` columns carry zero derivative
/// (their numerators vanish for PSD-preserving perturbations).
pub fn diff_udu(f: &UdFactor, dp: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = f.dim();
    // M = U^{-1} dP U^{-T}, column solves then row solves.
    let mut m = dp.clone();
    for c in 0..n {
        let col = solve_unit_upper(&f.u, &m.column(c).into_owned());
        m.set_column(c, &col);
    }
    for rix in 0..n {
        let row = solve_unit_upper(&f.u, &m.row(rix).transpose());
        m.set_row(rix, &row.transpose());
    }
    let mut dd = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, n);
    for j in 0..n {
        dd[j] = m[(j, j)];
        for i in 0..j {
            x[(i, j)] = if f.d[j] != 0.0 { m[(i, j)] / f.d[j] } else { 0.0 };
        }
    }
    (&f.u * x, dd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            rows.len(),
            rows[0].len(),
            &rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>(),
        )
    }

    #[test]
    fn udu_identity() {
        let f = udu_factorize(&DMatrix::identity(4, 4), DEFAULT_EPS).unwrap();
        assert_eq!(f.u, DMatrix::identity(4, 4));
        assert_eq!(f.d, DVector::from_element(4, 1.0));
    }

    #[test]
    fn udu_two_by_two() {
        // [[2,1],[1,1]] = [[1,1],[0,1]] diag(1,1) [[1,1],[0,1]]^T
        let p = mat(&[&[2.0, 1.0], &[1.0, 1.0]]);
        let f = udu_factorize(&p, DEFAULT_EPS).unwrap();
        assert_abs_diff_eq!(f.u[(0, 1)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.d[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.d[1], 1.0, epsilon = 1e-14);
        let back = f.reconstruct();
        assert_abs_diff_eq!((back - p).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn udu_singular_diagonal() {
        // Example-1-shaped Q with three zero rows.
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0063]));
        let f = udu_factorize(&q, DEFAULT_EPS).unwrap();
        assert_eq!(f.u, DMatrix::identity(4, 4));
        assert_eq!(f.d.as_slice(), &[0.0, 0.0, 0.0, 0.0063]);
    }

    #[test]
    fn udu_rejects_asymmetric() {
        let p = mat(&[&[1.0, 0.5], &[0.2, 1.0]]);
        assert!(matches!(
            udu_factorize(&p, DEFAULT_EPS),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn udu_rejects_indefinite() {
        let p = mat(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(
            udu_factorize(&p, DEFAULT_EPS),
            Err(Error::IndefiniteMatrix { .. })
        ));
    }

    #[test]
    fn mwgs_orthonormal_input() {
        let res = mwgs(
            &DMatrix::identity(3, 3),
            &DVector::from_element(3, 1.0),
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(res.r, DMatrix::identity(3, 3));
        assert_eq!(res.d_r, DVector::from_element(3, 1.0));
        assert_eq!(res.w, DMatrix::identity(3, 3));
    }

    #[test]
    fn mwgs_one_by_two() {
        // pre = [1 1], weights [1 1]: d_r = sum d_a * a_i^2 = 2 and the
        // transform vector satisfies pre = r * w^T exactly.
        let pre = mat(&[&[1.0, 1.0]]);
        let res = mwgs(&pre, &DVector::from_element(2, 1.0), DEFAULT_EPS).unwrap();
        assert_eq!(res.r[(0, 0)], 1.0);
        assert_abs_diff_eq!(res.d_r[0], 2.0, epsilon = 1e-15);
        let back = &res.r * res.w.transpose();
        assert_abs_diff_eq!((back - pre).amax(), 0.0, epsilon = 1e-15);
        let gram = res.w.transpose() * DMatrix::from_diagonal(&DVector::from_element(2, 1.0)) * &res.w;
        assert_abs_diff_eq!(gram[(0, 0)], res.d_r[0], epsilon = 1e-15);
    }

    #[test]
    fn mwgs_identities_random() {
        let mut rng = crate::rng::Rng::new(7);
        for _ in 0..20 {
            let s = 3;
            let r_cols = 5;
            let pre =
                DMatrix::from_fn(s, r_cols, |_, _| rng.normal());
            let d_a = DVector::from_fn(r_cols, |_, _| rng.uniform() + 0.1);
            let res = mwgs(&pre, &d_a, DEFAULT_EPS).unwrap();
            let scale = pre.amax().max(1.0);
            let back = &res.r * res.w.transpose();
            assert!((back - &pre).amax() < 1e-12 * scale);
            let gram = res.w.transpose() * DMatrix::from_diagonal(&d_a) * &res.w;
            for i in 0..s {
                for j in 0..s {
                    let expect = if i == j { res.d_r[i] } else { 0.0 };
                    assert!((gram[(i, j)] - expect).abs() < 1e-12 * scale * scale);
                }
            }
            // Weighted Gram preservation.
            let lhs = &res.r * DMatrix::from_diagonal(&res.d_r) * res.r.transpose();
            let rhs = &pre * DMatrix::from_diagonal(&d_a) * pre.transpose();
            assert!((lhs - rhs).amax() < 1e-12 * scale * scale * r_cols as f64);
        }
    }

    #[test]
    fn mwgs_zero_weight_rows() {
        // Time-update-shaped pre-array with a singular Q block.
        let pre = mat(&[&[1.0, 0.5, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0]]);
        let d_a = DVector::from_vec(vec![1.0, 2.0, 0.0, 0.5]);
        let res = mwgs(&pre, &d_a, DEFAULT_EPS).unwrap();
        let lhs = &res.r * DMatrix::from_diagonal(&res.d_r) * res.r.transpose();
        let rhs = &pre * DMatrix::from_diagonal(&d_a) * pre.transpose();
        assert!((lhs - rhs).amax() < 1e-12);
        assert!(res.d_r.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn solve_unit_upper_cases() {
        let u = DMatrix::identity(2, 2);
        let x = solve_unit_upper(&u, &DVector::from_vec(vec![3.0, 4.0]));
        assert_eq!(x.as_slice(), &[3.0, 4.0]);

        let u = mat(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let x = solve_unit_upper(&u, &DVector::from_vec(vec![5.0, 1.0]));
        assert_eq!(x.as_slice(), &[3.0, 1.0]);

        let u = mat(&[&[1.0, 1.0, 1.0], &[0.0, 1.0, 1.0], &[0.0, 0.0, 1.0]]);
        let x = solve_unit_upper(&u, &DVector::from_vec(vec![3.0, 2.0, 1.0]));
        assert_eq!(x.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn solve_transpose_roundtrip() {
        let u = mat(&[&[1.0, 0.3, -0.2], &[0.0, 1.0, 0.7], &[0.0, 0.0, 1.0]]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = solve_unit_upper_transpose(&u, &b);
        let back = u.transpose() * x;
        assert_abs_diff_eq!((back - b).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn reconstruct_examples() {
        let f = UdFactor::identity(2);
        assert_eq!(f.reconstruct(), DMatrix::identity(2, 2));

        let f = UdFactor {
            u: mat(&[&[1.0, 1.0], &[0.0, 1.0]]),
            d: DVector::from_vec(vec![1.0, 1.0]),
        };
        assert_eq!(f.reconstruct(), mat(&[&[2.0, 1.0], &[1.0, 1.0]]));
    }

    #[test]
    fn diff_udu_matches_finite_differences() {
        let mut rng = crate::rng::Rng::new(11);
        let base = DMatrix::from_fn(4, 4, |_, _| rng.normal());
        let dir = DMatrix::from_fn(4, 4, |_, _| rng.normal());
        let psd = |t: f64| {
            let a = &base + &dir * t;
            &a * a.transpose() + DMatrix::identity(4, 4)
        };
        let p0 = psd(0.0);
        let f = udu_factorize(&p0, DEFAULT_EPS).unwrap();
        let h = 1e-6;
        let dp = (psd(h) - psd(-h)) / (2.0 * h);
        let (du, dd) = diff_udu(&f, &dp);
        let fp = udu_factorize(&psd(h), DEFAULT_EPS).unwrap();
        let fm = udu_factorize(&psd(-h), DEFAULT_EPS).unwrap();
        let du_fd = (fp.u - fm.u) / (2.0 * h);
        let dd_fd = (fp.d - fm.d) / (2.0 * h);
        assert!((du - du_fd).amax() < 1e-5);
        assert!((dd - dd_fd).amax() < 1e-4);
    }
}
