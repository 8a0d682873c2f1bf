//! Differentiated UD machinery: the MWGS differentiation routine, the UD
//! sensitivity filter and the UD-form log-likelihood with its analytic score.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{FilterData, Regressors};
use crate::matops::{
    diff_udu, mwgs, solve_unit_upper, udu_factorize, MwgsResult, UdFactor, DEFAULT_EPS,
};
use crate::model::{
    differentiate_bars, precompute_bars, FilterContext, Model, StepDerivatives, StepMatrices,
};
use crate::filt_ud::{mu_pre_array, tu_pre_array, UdFilterState, UdRun, UdStepOutput};

/// MWGS post-arrays together with their derivative for one parameter.
#[derive(Debug, Clone)]
pub struct DiffUdResult {
    pub mwgs: MwgsResult,
    /// Derivative of the unit upper triangular post-array (zero diagonal).
    pub dr_dtheta: DMatrix<f64>,
    /// Derivative of the post-array weights.
    pub dd_r_dtheta: DVector<f64>,
}

/// Per-parameter sensitivities of the UD filter state. `d_u_p` entries are
/// strictly upper triangular (derivatives of unit upper triangular factors).
#[derive(Debug, Clone)]
pub struct UdSensitivityState {
    pub d_alpha: Vec<DVector<f64>>,
    pub d_u_p: Vec<DMatrix<f64>>,
    pub d_d_p: Vec<DVector<f64>>,
}

/// Per-parameter innovation sensitivities of one UD step.
#[derive(Debug, Clone)]
pub struct UdStepSens {
    pub d_e_bar: Vec<DVector<f64>>,
    pub d_d_re: Vec<DVector<f64>>,
    pub d_u_re: Vec<DMatrix<f64>>,
    pub d_k_u: Vec<DMatrix<f64>>,
}

/// Objective value and analytic gradient of the UD log-likelihood.
#[derive(Debug, Clone)]
pub struct LogLikEval {
    pub value: f64,
    pub grad: DVector<f64>,
}

fn split_triangular(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let s = m.nrows();
    let mut lower = DMatrix::zeros(s, s);
    let mut diag = DVector::zeros(s);
    let mut upper = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            match i.cmp(&j) {
                std::cmp::Ordering::Greater => lower[(i, j)] = m[(i, j)],
                std::cmp::Ordering::Equal => diag[i] = m[(i, i)],
                std::cmp::Ordering::Less => upper[(i, j)] = m[(i, j)],
            }
        }
    }
    (lower, diag, upper)
}

/// Differentiates the MWGS post-arrays for one parameter direction, sharing
/// an already computed transform.
///
/// With `W, R, D_R` from the factorization, forms
/// `M0 = W^T D_A (dA) R^{-T}` and `M2 = W^T (dD_A) W`, splits both into
/// strictly-lower / diagonal / strictly-upper parts, and reads off
/// `R' = R (L0^T + U0 + U2) D_R^{-1}` and `D_R' = 2 D0 + D2`. Post-array
/// columns with `d_r = 0` provably carry a zero numerator; the 0/0 is
/// resolved to 0 and a non-negligible numerator is reported as an error.
pub fn diff_ud_with(
    res: &MwgsResult,
    d_a: &DVector<f64>,
    d_pre: &DMatrix<f64>,
    d_d_a: &DVector<f64>,
    eps: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let s = res.r.nrows();
    let r_cols = res.w.nrows();

    // M0 = W^T D_A dA R^{-T}, with dA the derivative of the (r x s)
    // pre-array, i.e. d_pre^T.
    let mut m0 = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for l in 0..r_cols {
                acc += res.w[(l, i)] * d_a[l] * d_pre[(j, l)];
            }
            m0[(i, j)] = acc;
        }
    }
    // Right-multiply by R^{-T}: each row of M0 solved against R.
    for i in 0..s {
        let row = solve_unit_upper(&res.r, &m0.row(i).transpose());
        m0.set_row(i, &row.transpose());
    }

    let mut m2 = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for l in 0..r_cols {
                acc += res.w[(l, i)] * d_d_a[l] * res.w[(l, j)];
            }
            m2[(i, j)] = acc;
        }
    }

    let (l0, d0, u0) = split_triangular(&m0);
    let (_l2, d2, u2) = split_triangular(&m2);

    let mut inner = l0.transpose() + u0 + u2;
    let scale = inner.amax().max(1.0);
    for j in 0..s {
        if res.d_r[j] > 0.0 {
            for i in 0..s {
                inner[(i, j)] /= res.d_r[j];
            }
        } else {
            for i in 0..s {
                if inner[(i, j)].abs() > eps.sqrt() * scale {
                    return Err(Error::ZeroDrPivot {
                        index: j,
                        numerator: inner[(i, j)],
                    });
                }
                inner[(i, j)] = 0.0;
            }
        }
    }
    let dr = &res.r * inner;
    let dd_r = DVector::from_fn(s, |i, _| 2.0 * d0[i] + d2[i]);
    Ok((dr, dd_r))
}

/// Runs MWGS and differentiates its post-arrays for one parameter.
pub fn diff_ud(
    pre: &DMatrix<f64>,
    d_a: &DVector<f64>,
    d_pre: &DMatrix<f64>,
    d_d_a: &DVector<f64>,
    eps: f64,
) -> Result<DiffUdResult> {
    let res = mwgs(pre, d_a, eps)?;
    let (dr, dd_r) = diff_ud_with(&res, d_a, d_pre, d_d_a, eps)?;
    Ok(DiffUdResult {
        mwgs: res,
        dr_dtheta: dr,
        dd_r_dtheta: dd_r,
    })
}

/// One differentiated UD step: the filter quantities of an ordinary UD step
/// plus the sensitivities of the factors, the state and the innovations.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn diff_step(
    state: &UdFilterState,
    sens: &UdSensitivityState,
    y_k: &DVector<f64>,
    y_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    u_k: &DVector<f64>,
    d_u_k: &[DVector<f64>],
    d_alpha_pri: &[DVector<f64>],
    mats: &StepMatrices,
    mats_mu: &StepMatrices,
    d_mats: &[StepDerivatives],
    d_mats_mu: &[StepDerivatives],
    eps: f64,
) -> Result<(UdFilterState, UdStepOutput, UdSensitivityState, UdStepSens)> {
    let p = sens.d_alpha.len();
    let n = state.p_ud.dim();
    let m = mats_mu.ud_h.dim();
    let k = state.k + 1;

    // ---- Time update ----
    // The mean sensitivities arrive precomputed in d_alpha_pri (the caller
    // needs them for the measurement-update context anyway); only the mean
    // itself and the covariance factors are propagated here.
    let alpha_pri =
        &mats.t_bar * &state.alpha + &mats.b_bar * u_prev + &mats.s_h_inv * y_prev;
    let (pre_tu, da_tu) = tu_pre_array(&state.p_ud, mats);
    let res_tu = mwgs(&pre_tu, &da_tu, eps).map_err(|e| e.at_step(k))?;
    let pri_ud = UdFactor {
        u: res_tu.r.clone(),
        d: res_tu.d_r.clone(),
    };

    let mut d_u_pri = Vec::with_capacity(p);
    let mut d_d_pri = Vec::with_capacity(p);
    for i in 0..p {
        let dm = &d_mats[i];
        let mut d_pre = DMatrix::zeros(n, 2 * n);
        d_pre
            .view_mut((0, 0), (n, n))
            .copy_from(&(&dm.dt_bar * &state.p_ud.u + &mats.t_bar * &sens.d_u_p[i]));
        d_pre.view_mut((0, n), (n, n)).copy_from(&dm.d_u_q_bar);
        let mut d_da = DVector::zeros(2 * n);
        d_da.rows_mut(0, n).copy_from(&sens.d_d_p[i]);
        d_da.rows_mut(n, n).copy_from(&dm.d_d_q_bar);
        let (dr, ddr) =
            diff_ud_with(&res_tu, &da_tu, &d_pre, &d_da, eps).map_err(|e| e.at_step(k))?;
        d_u_pri.push(dr);
        d_d_pri.push(ddr);
    }

    // ---- Measurement update ----
    let (pre_mu, da_mu) = mu_pre_array(&pri_ud, mats_mu);
    let res_mu = mwgs(&pre_mu, &da_mu, eps).map_err(|e| e.at_step(k))?;

    let u_p = res_mu.r.view((0, 0), (n, n)).into_owned();
    let k_u = res_mu.r.view((0, n), (n, m)).into_owned();
    let u_re = res_mu.r.view((n, n), (m, m)).into_owned();
    let d_p = res_mu.d_r.rows(0, n).into_owned();
    let d_re = res_mu.d_r.rows(n, m).into_owned();
    if d_re.iter().any(|&d| d <= 0.0) {
        return Err(Error::SingularInnovationCov { step: k });
    }

    let z = &mats_mu.raw.z;
    let e = y_k - z * &alpha_pri - &mats_mu.raw.beta * u_k;
    let e_bar = solve_unit_upper(&u_re, &e);
    let alpha_post = &alpha_pri + &k_u * &e_bar;

    let mut out_sens = UdStepSens {
        d_e_bar: Vec::with_capacity(p),
        d_d_re: Vec::with_capacity(p),
        d_u_re: Vec::with_capacity(p),
        d_k_u: Vec::with_capacity(p),
    };
    let mut new_sens = UdSensitivityState {
        d_alpha: Vec::with_capacity(p),
        d_u_p: Vec::with_capacity(p),
        d_d_p: Vec::with_capacity(p),
    };

    for i in 0..p {
        let dmu = &d_mats_mu[i];
        let mut d_pre = DMatrix::zeros(n + m, n + m);
        d_pre.view_mut((0, 0), (n, n)).copy_from(&d_u_pri[i]);
        d_pre
            .view_mut((n, 0), (m, n))
            .copy_from(&(&dmu.raw.dz * &pri_ud.u + z * &d_u_pri[i]));
        d_pre.view_mut((n, n), (m, m)).copy_from(&dmu.d_u_h);
        let mut d_da = DVector::zeros(n + m);
        d_da.rows_mut(0, n).copy_from(&d_d_pri[i]);
        d_da.rows_mut(n, m).copy_from(&dmu.d_d_h);
        let (dr, ddr) =
            diff_ud_with(&res_mu, &da_mu, &d_pre, &d_da, eps).map_err(|e| e.at_step(k))?;

        let d_u_p_post = dr.view((0, 0), (n, n)).into_owned();
        let d_k_u = dr.view((0, n), (n, m)).into_owned();
        let d_u_re = dr.view((n, n), (m, m)).into_owned();
        let d_d_p_post = ddr.rows(0, n).into_owned();
        let d_d_re = ddr.rows(n, m).into_owned();

        // Innovation sensitivity, in the proof form: the first correction
        // uses the raw innovation e (normalized on the way out).
        let de_raw = -(&dmu.raw.dz * &alpha_pri)
            - z * &d_alpha_pri[i]
            - &dmu.raw.dbeta * u_k
            - &mats_mu.raw.beta * &d_u_k[i];
        let d_e_bar = -solve_unit_upper(&u_re, &(&d_u_re * &e_bar))
            + solve_unit_upper(&u_re, &de_raw);

        let d_alpha_post = &d_alpha_pri[i] + &d_k_u * &e_bar + &k_u * &d_e_bar;

        out_sens.d_e_bar.push(d_e_bar);
        out_sens.d_d_re.push(d_d_re);
        out_sens.d_u_re.push(d_u_re);
        out_sens.d_k_u.push(d_k_u);
        new_sens.d_alpha.push(d_alpha_post);
        new_sens.d_u_p.push(d_u_p_post);
        new_sens.d_d_p.push(d_d_p_post);
    }

    Ok((
        UdFilterState {
            alpha: alpha_post,
            p_ud: UdFactor { u: u_p, d: d_p },
            k,
        },
        UdStepOutput {
            e,
            e_bar,
            re_ud: UdFactor { u: u_re, d: d_re },
            k_u,
        },
        new_sens,
        out_sens,
    ))
}

/// A full differentiated UD pass: the plain filter record plus the per-step
/// innovation sensitivities and the assembled score.
#[derive(Debug, Clone)]
pub struct UdScoreRun {
    pub run: UdRun,
    pub step_sens: Vec<UdStepSens>,
    pub eval: LogLikEval,
}

/// Runs the differentiated UD filter and assembles the UD log-likelihood
/// and its analytic score.
pub fn loglik_and_score_ud(
    model: &dyn Model,
    theta: &DVector<f64>,
    data: &FilterData,
) -> Result<LogLikEval> {
    ud_run_with_score(model, theta, data).map(|r| r.eval)
}

/// Like [`loglik_and_score_ud`] but keeps the full per-step record.
pub fn ud_run_with_score(
    model: &dyn Model,
    theta: &DVector<f64>,
    data: &FilterData,
) -> Result<UdScoreRun> {
    model.validate(theta)?;
    let dims = model.dims();
    let p = model.theta_dim();
    let regs = Regressors::new(model, data)?;
    let eps = DEFAULT_EPS;

    let pi0_mat = model.pi0(theta);
    let pi0 = udu_factorize(&pi0_mat, eps)?;
    let mut state = UdFilterState {
        alpha: model.alpha0_mean(theta),
        p_ud: pi0.clone(),
        k: 0,
    };
    let mut sens = UdSensitivityState {
        d_alpha: (0..p).map(|i| model.d_alpha0_mean(theta, i)).collect(),
        d_u_p: Vec::with_capacity(p),
        d_d_p: Vec::with_capacity(p),
    };
    for i in 0..p {
        let (du, dd) = diff_udu(&pi0, &model.d_pi0(theta, i));
        sens.d_u_p.push(du);
        sens.d_d_p.push(dd);
    }
    let mut u_prev = regs.initial(theta);
    let mut d_u_prev: Vec<DVector<f64>> = (0..p).map(|i| regs.d_initial(theta, i)).collect();

    let n_steps = data.len();
    let c0 = 0.5 * dims.m as f64 * (2.0 * std::f64::consts::PI).ln() * n_steps as f64;
    let mut value = -c0;
    let mut grad: DVector<f64> = DVector::zeros(p);
    let mut states = Vec::with_capacity(n_steps);
    let mut outputs = Vec::with_capacity(n_steps);
    let mut all_sens = Vec::with_capacity(n_steps);

    // Context-free models: matrices and their derivatives computed once.
    let (static_mats, static_d_mats): (Option<StepMatrices>, Option<Vec<StepDerivatives>>) =
        if model.time_varying() {
            (None, None)
        } else {
            let ctx = FilterContext::pre_update(1, &data.y[0], regs.y_prev(1));
            let mats = precompute_bars(model.matrices_at(theta, &ctx)?, eps)?;
            let dm = (0..p)
                .map(|i| differentiate_bars(&mats, model.derivatives_at(theta, i, &ctx)))
                .collect();
            (Some(mats), Some(dm))
        };

    for k in 1..=n_steps {
        let y_k = &data.y[k - 1];
        let y_prev = regs.y_prev(k).clone();
        let ctx_pre = FilterContext::pre_update(k, y_k, &y_prev);
        let mats_owned;
        let mats: &StepMatrices = match &static_mats {
            Some(m) => m,
            None => {
                let raw = model.matrices_at(theta, &ctx_pre).map_err(|e| e.at_step(k))?;
                mats_owned = precompute_bars(raw, eps).map_err(|e| e.at_step(k))?;
                &mats_owned
            }
        };
        let d_mats_owned;
        let d_mats: &[StepDerivatives] = match &static_d_mats {
            Some(d) => d,
            None => {
                d_mats_owned = (0..p)
                    .map(|i| differentiate_bars(mats, model.derivatives_at(theta, i, &ctx_pre)))
                    .collect::<Vec<_>>();
                &d_mats_owned
            }
        };

        // A-priori mean and its sensitivities feed the measurement-update
        // context for self-exciting models.
        let alpha_pri =
            &mats.t_bar * &state.alpha + &mats.b_bar * &u_prev + &mats.s_h_inv * &y_prev;
        let d_alpha_pri: Vec<DVector<f64>> = (0..p)
            .map(|i| {
                let dm = &d_mats[i];
                &dm.dt_bar * &state.alpha
                    + &mats.t_bar * &sens.d_alpha[i]
                    + &dm.db_bar * &u_prev
                    + &mats.b_bar * &d_u_prev[i]
                    + &dm.d_s_h_inv * &y_prev
            })
            .collect();

        let ctx_mu = FilterContext {
            k,
            y: y_k,
            y_prev: &y_prev,
            alpha_pred: Some(&alpha_pri),
            d_alpha_pred: Some(&d_alpha_pri),
        };
        let mu_owned;
        let (mats_mu, d_mats_mu): (&StepMatrices, &[StepDerivatives]) =
            if model.needs_predicted_state() {
                let raw_mu = model.matrices_at(theta, &ctx_mu).map_err(|e| e.at_step(k))?;
                let mm = precompute_bars(raw_mu, eps).map_err(|e| e.at_step(k))?;
                let dmm: Vec<StepDerivatives> = (0..p)
                    .map(|i| differentiate_bars(&mm, model.derivatives_at(theta, i, &ctx_mu)))
                    .collect();
                mu_owned = (mm, dmm);
                (&mu_owned.0, &mu_owned.1)
            } else {
                (mats, d_mats)
            };

        let u_k = regs.at_step(theta, k, &ctx_mu);
        let d_u_k: Vec<DVector<f64>> = (0..p)
            .map(|i| regs.d_at_step(theta, i, k, &ctx_mu))
            .collect();

        let (post, out, new_sens, step_sens) = diff_step(
            &state, &sens, y_k, &y_prev, &u_prev, &u_k, &d_u_k, &d_alpha_pri, mats, mats_mu,
            d_mats, d_mats_mu, eps,
        )?;

        let ln_det: f64 = out.re_ud.d.iter().map(|d| d.ln()).sum();
        let quad: f64 = (0..dims.m)
            .map(|j| out.e_bar[j] * out.e_bar[j] / out.re_ud.d[j])
            .sum();
        value += -0.5 * (ln_det + quad);
        if !value.is_finite() {
            return Err(Error::NonFiniteLogLik { step: k });
        }
        for i in 0..p {
            let mut term = 0.0;
            for j in 0..dims.m {
                let d = out.re_ud.d[j];
                term += step_sens.d_d_re[i][j] / d;
                term += 2.0 * step_sens.d_e_bar[i][j] * out.e_bar[j] / d;
                term -= out.e_bar[j] * out.e_bar[j] / (d * d) * step_sens.d_d_re[i][j];
            }
            grad[i] += -0.5 * term;
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteScore { step: k });
        }

        u_prev = u_k;
        d_u_prev = d_u_k;
        state = post.clone();
        sens = new_sens;
        states.push(post);
        outputs.push(out);
        all_sens.push(step_sens);
    }

    Ok(UdScoreRun {
        run: UdRun {
            states,
            outputs,
            loglik: value,
        },
        step_sens: all_sens,
        eval: LogLikEval { value, grad },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filt_conv::{conv_run, conv_run_with_score};
    use crate::filt_ud::ud_run;
    use crate::model::Example1Model;
    use crate::rng::Rng;

    #[test]
    fn diff_ud_zero_derivatives() {
        let pre = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.2, 0.0, 1.0, 0.7]);
        let d_a = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let res = diff_ud(
            &pre,
            &d_a,
            &DMatrix::zeros(2, 3),
            &DVector::zeros(3),
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(res.dr_dtheta, DMatrix::zeros(2, 2));
        assert_eq!(res.dd_r_dtheta, DVector::zeros(2));
    }

    #[test]
    fn diff_ud_scalar_oracle() {
        // pre = [a], weight w: d_r = a^2 w, and d(a^2 w)/da = 2 a w.
        let a = 2.0;
        let w = 1.0;
        let pre = DMatrix::from_element(1, 1, a);
        let d_a = DVector::from_element(1, w);
        let res = diff_ud(
            &pre,
            &d_a,
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::zeros(1),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!((res.mwgs.d_r[0] - 4.0).abs() < 1e-14);
        assert!((res.dd_r_dtheta[0] - 4.0).abs() < 1e-14, "d(a^2 w)/da = 2aw = 4");
        assert_eq!(res.dr_dtheta[(0, 0)], 0.0);
    }

    #[test]
    fn diff_ud_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let base = DMatrix::from_fn(3, 5, |_, _| rng.normal());
            let dir = DMatrix::from_fn(3, 5, |_, _| rng.normal());
            let wbase = DVector::from_fn(5, |_, _| rng.uniform() + 0.5);
            let wdir = DVector::from_fn(5, |_, _| rng.normal() * 0.1);
            let pre_at = |t: f64| &base + &dir * t;
            let da_at = |t: f64| &wbase + &wdir * t;
            let res = diff_ud(&pre_at(0.0), &da_at(0.0), &dir, &wdir, DEFAULT_EPS).unwrap();
            let h = 1e-6;
            let rp = mwgs(&pre_at(h), &da_at(h), DEFAULT_EPS).unwrap();
            let rm = mwgs(&pre_at(-h), &da_at(-h), DEFAULT_EPS).unwrap();
            let dr_fd = (rp.r - rm.r) / (2.0 * h);
            let ddr_fd = (rp.d_r - rm.d_r) / (2.0 * h);
            let scale = res.dr_dtheta.amax().max(1.0);
            assert!((res.dr_dtheta.clone() - dr_fd).amax() < 1e-6 * scale);
            let dscale = res.dd_r_dtheta.amax().max(1.0);
            assert!((res.dd_r_dtheta.clone() - ddr_fd).amax() < 1e-6 * dscale);
        }
    }

    fn example1_data(
        delta: f64,
        n: usize,
        seed: u64,
    ) -> (Example1Model, DVector<f64>, FilterData) {
        let model = Example1Model::new(delta).unwrap();
        let theta = DVector::from_element(1, 3.0);
        let sim = model.simulate(&theta, n, seed).unwrap();
        (model, theta, FilterData::from_sim(&sim))
    }

    #[test]
    fn value_matches_plain_filters() {
        let (model, theta, data) = example1_data(1.0, 100, 42);
        let eval = loglik_and_score_ud(&model, &theta, &data).unwrap();
        let plain = ud_run(&model, &theta, &data).unwrap();
        assert!((eval.value - plain.loglik).abs() < 1e-12 * plain.loglik.abs());
        let conv = conv_run(&model, &theta, &data).unwrap();
        assert!((eval.value - conv.loglik).abs() < 1e-9 * conv.loglik.abs());
    }

    #[test]
    fn score_matches_finite_differences() {
        for delta in [1.0, 1e-2] {
            let (model, theta, data) = example1_data(delta, 60, 7);
            let eval = loglik_and_score_ud(&model, &theta, &data).unwrap();
            let h = 1e-6 * theta[0].abs().max(1.0);
            let mut tp = theta.clone();
            tp[0] += h;
            let mut tm = theta.clone();
            tm[0] -= h;
            let lp = ud_run(&model, &tp, &data).unwrap().loglik;
            let lm = ud_run(&model, &tm, &data).unwrap().loglik;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (eval.grad[0] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                "delta = {delta}: analytic {} vs fd {}",
                eval.grad[0],
                fd
            );
        }
    }

    #[test]
    fn score_matches_conventional_sensitivities() {
        let (model, theta, data) = example1_data(1.0, 80, 13);
        let ud = ud_run_with_score(&model, &theta, &data).unwrap();
        let conv = conv_run_with_score(&model, &theta, &data).unwrap();
        let rel = (ud.eval.grad[0] - conv.score[0]).abs() / conv.score[0].abs().max(1.0);
        assert!(rel < 1e-7, "ud {} vs conv {}", ud.eval.grad[0], conv.score[0]);
    }

    #[test]
    fn d_u_p_stays_strictly_upper() {
        let (model, theta, data) = example1_data(1e-2, 50, 3);
        let run = ud_run_with_score(&model, &theta, &data).unwrap();
        // The stored U_Re derivatives are strictly upper triangular.
        for sens in &run.step_sens {
            for d_u in &sens.d_u_re {
                for i in 0..d_u.nrows() {
                    for j in 0..=i {
                        assert_eq!(d_u[(i, j)], 0.0);
                    }
                }
            }
        }
    }
}
