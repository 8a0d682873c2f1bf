//! Property tests for the factorization and orthogonalization kernels.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use udkf::matops::{mwgs, solve_unit_upper, solve_unit_upper_transpose, udu_factorize};
use udkf::DEFAULT_EPS;

/// Random symmetric positive semi-definite matrix built as G^T G (+ ridge).
fn psd_matrix(n: usize, entries: Vec<f64>, ridge: f64) -> DMatrix<f64> {
    let g = DMatrix::from_vec(n, n, entries);
    let mut p = g.transpose() * &g;
    for i in 0..n {
        p[(i, i)] += ridge;
    }
    // Force exact symmetry at the bit level.
    for i in 0..n {
        for j in 0..i {
            let v = p[(i, j)];
            p[(j, i)] = v;
        }
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn udu_round_trip_psd(
        n in 1usize..=8,
        entries in proptest::collection::vec(-3.0f64..3.0, 64),
        ridge in 0.0f64..2.0,
    ) {
        let p = psd_matrix(n, entries[..n * n].to_vec(), ridge);
        let ud = udu_factorize(&p, DEFAULT_EPS).unwrap();
        let back = ud.reconstruct();
        let scale = p.amax().max(1.0);
        prop_assert!((back - &p).amax() < 1e-12 * scale);
        // Unit upper triangular factor, nonnegative weights.
        for i in 0..n {
            prop_assert_eq!(ud.u[(i, i)], 1.0);
            prop_assert!(ud.d[i] >= 0.0);
            for j in 0..i {
                prop_assert_eq!(ud.u[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn mwgs_identities(
        s in 1usize..=5,
        extra in 0usize..=4,
        entries in proptest::collection::vec(-3.0f64..3.0, 45),
        weights in proptest::collection::vec(0.01f64..4.0, 9),
    ) {
        let r_cols = s + extra;
        let pre = DMatrix::from_vec(s, r_cols, entries[..s * r_cols].to_vec());
        let d_a = DVector::from_vec(weights[..r_cols].to_vec());
        let res = mwgs(&pre, &d_a, DEFAULT_EPS).unwrap();
        let scale = pre.amax().max(1.0);

        // pre = R * W^T.
        let recon = &res.r * res.w.transpose();
        prop_assert!((recon - &pre).amax() < 1e-10 * scale);

        // W^T D_A W = D_R (weighted orthogonality of the transform).
        let mut gram = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                for l in 0..r_cols {
                    acc += res.w[(l, i)] * d_a[l] * res.w[(l, j)];
                }
                gram[(i, j)] = acc;
            }
        }
        let gscale = res.d_r.amax().max(1.0);
        for i in 0..s {
            prop_assert!((gram[(i, i)] - res.d_r[i]).abs() < 1e-10 * gscale);
            prop_assert!(res.d_r[i] >= 0.0);
            for j in 0..s {
                if i != j {
                    prop_assert!(gram[(i, j)].abs() < 1e-9 * gscale);
                }
            }
        }

        // Weighted Gram preservation: pre D_A pre^T = R D_R R^T.
        let mut lhs = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                for l in 0..r_cols {
                    acc += pre[(i, l)] * d_a[l] * pre[(j, l)];
                }
                lhs[(i, j)] = acc;
            }
        }
        let rhs = &res.r * DMatrix::from_diagonal(&res.d_r) * res.r.transpose();
        prop_assert!((lhs - rhs).amax() < 1e-9 * scale * scale);
    }

    #[test]
    fn unit_upper_solves_invert(
        n in 1usize..=6,
        entries in proptest::collection::vec(-2.0f64..2.0, 36),
        rhs in proptest::collection::vec(-5.0f64..5.0, 6),
    ) {
        let mut u = DMatrix::identity(n, n);
        let mut idx = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                u[(i, j)] = entries[idx % entries.len()];
                idx += 1;
            }
        }
        let b = DVector::from_vec(rhs[..n].to_vec());
        let x = solve_unit_upper(&u, &b);
        prop_assert!((&u * &x - &b).amax() < 1e-10 * b.amax().max(1.0));
        let y = solve_unit_upper_transpose(&u, &b);
        prop_assert!((u.transpose() * &y - &b).amax() < 1e-10 * b.amax().max(1.0));
    }
}
