//! UD-factorized filters: the covariance is carried as `P = U D U^T` and
//! propagated through MWGS pre-array/post-array updates, which keeps the
//! stored covariance symmetric and positive semi-definite by construction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{FilterData, Regressors};
use crate::matops::{mwgs, solve_unit_upper, udu_factorize, UdFactor, DEFAULT_EPS};
use crate::model::{precompute_bars, FilterContext, Model, StepMatrices};

/// UD filter state: estimate, covariance factors and time index.
#[derive(Debug, Clone)]
pub struct UdFilterState {
    pub alpha: DVector<f64>,
    pub p_ud: UdFactor,
    pub k: usize,
}

/// Innovation quantities of one UD measurement update.
#[derive(Debug, Clone)]
pub struct UdStepOutput {
    /// Raw innovation `e_k`.
    pub e: DVector<f64>,
    /// Normalized innovation `U_Re^{-1} e_k`.
    pub e_bar: DVector<f64>,
    /// UD factors of the innovation covariance `R_e`.
    pub re_ud: UdFactor,
    /// Normalized gain (the conventional gain is `K = K_u * U_Re^{-1}`).
    pub k_u: DMatrix<f64>,
}

/// Builds the time-update pre-array `[T_bar * U_P | U_Q_bar]` with weights
/// `D_P (+) D_Q_bar`.
pub(crate) fn tu_pre_array(
    state_ud: &UdFactor,
    mats: &StepMatrices,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = state_ud.dim();
    let mut pre = DMatrix::zeros(n, 2 * n);
    pre.view_mut((0, 0), (n, n))
        .copy_from(&(&mats.t_bar * &state_ud.u));
    pre.view_mut((0, n), (n, n)).copy_from(&mats.ud_q_bar.u);
    let mut d_a = DVector::zeros(2 * n);
    d_a.rows_mut(0, n).copy_from(&state_ud.d);
    d_a.rows_mut(n, n).copy_from(&mats.ud_q_bar.d);
    (pre, d_a)
}

/// Builds the measurement-update pre-array
/// `[[U_P, 0], [Z U_P, U_H]]` with weights `D_P (+) D_H`.
pub(crate) fn mu_pre_array(
    pri_ud: &UdFactor,
    mats: &StepMatrices,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = pri_ud.dim();
    let m = mats.ud_h.dim();
    let mut pre = DMatrix::zeros(n + m, n + m);
    pre.view_mut((0, 0), (n, n)).copy_from(&pri_ud.u);
    pre.view_mut((n, 0), (m, n))
        .copy_from(&(&mats.raw.z * &pri_ud.u));
    pre.view_mut((n, n), (m, m)).copy_from(&mats.ud_h.u);
    let mut d_a = DVector::zeros(n + m);
    d_a.rows_mut(0, n).copy_from(&pri_ud.d);
    d_a.rows_mut(n, m).copy_from(&mats.ud_h.d);
    (pre, d_a)
}

/// Time update: a-priori estimate plus MWGS propagation of the factors.
pub fn ud_time_update(
    state: &UdFilterState,
    y_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    mats: &StepMatrices,
    eps: f64,
) -> Result<UdFilterState> {
    let alpha_pri =
        &mats.t_bar * &state.alpha + &mats.b_bar * u_prev + &mats.s_h_inv * y_prev;
    let (pre, d_a) = tu_pre_array(&state.p_ud, mats);
    let res = mwgs(&pre, &d_a, eps)?;
    Ok(UdFilterState {
        alpha: alpha_pri,
        p_ud: UdFactor { u: res.r, d: res.d_r },
        k: state.k + 1,
    })
}

/// Measurement update: MWGS on the stacked pre-array, block read-off of
/// `U_P, D_P, U_Re, D_Re, K_u`, then the normalized-gain state update
/// `alpha + K_u * U_Re^{-1} e`.
pub fn ud_measurement_update(
    state_pri: &UdFilterState,
    y_k: &DVector<f64>,
    u_k: &DVector<f64>,
    mats: &StepMatrices,
    eps: f64,
) -> Result<(UdFilterState, UdStepOutput)> {
    let n = state_pri.p_ud.dim();
    let m = mats.ud_h.dim();
    let (pre, d_a) = mu_pre_array(&state_pri.p_ud, mats);
    let res = mwgs(&pre, &d_a, eps)?;

    // Post-array layout: [[U_P_post, K_u], [0, U_Re]] with weights
    // D_P_post (+) D_Re (state rows first, measurement rows second).
    let u_p = res.r.view((0, 0), (n, n)).into_owned();
    let k_u = res.r.view((0, n), (n, m)).into_owned();
    let u_re = res.r.view((n, n), (m, m)).into_owned();
    let d_p = res.d_r.rows(0, n).into_owned();
    let d_re = res.d_r.rows(n, m).into_owned();
    if d_re.iter().any(|&d| d <= 0.0) {
        return Err(Error::SingularInnovationCov { step: state_pri.k });
    }

    let e = y_k - &mats.raw.z * &state_pri.alpha - &mats.raw.beta * u_k;
    let e_bar = solve_unit_upper(&u_re, &e);
    let alpha_post = &state_pri.alpha + &k_u * &e_bar;

    Ok((
        UdFilterState {
            alpha: alpha_post,
            p_ud: UdFactor { u: u_p, d: d_p },
            k: state_pri.k,
        },
        UdStepOutput {
            e,
            e_bar,
            re_ud: UdFactor { u: u_re, d: d_re },
            k_u,
        },
    ))
}

/// One full UD filter step record.
#[derive(Debug, Clone)]
pub struct UdRun {
    pub states: Vec<UdFilterState>,
    pub outputs: Vec<UdStepOutput>,
    pub loglik: f64,
}

/// Runs the UD filter over the data and evaluates the UD-form
/// log-likelihood `-c0 - 1/2 sum { ln det D_Re + e_bar^T D_Re^{-1} e_bar }`.
pub fn ud_run(model: &dyn Model, theta: &DVector<f64>, data: &FilterData) -> Result<UdRun> {
    model.validate(theta)?;
    let dims = model.dims();
    let regs = Regressors::new(model, data)?;
    let eps = DEFAULT_EPS;

    let pi0 = udu_factorize(&model.pi0(theta), eps)?;
    let mut state = UdFilterState {
        alpha: model.alpha0_mean(theta),
        p_ud: pi0,
        k: 0,
    };
    let mut u_prev = regs.initial(theta);

    let n_steps = data.len();
    let c0 = 0.5 * dims.m as f64 * (2.0 * std::f64::consts::PI).ln() * n_steps as f64;
    let mut loglik = -c0;
    let mut states = Vec::with_capacity(n_steps);
    let mut outputs = Vec::with_capacity(n_steps);

    // Context-free models: factorize the matrices once, outside the loop.
    let static_mats: Option<StepMatrices> = if model.time_varying() {
        None
    } else {
        let ctx = FilterContext::pre_update(1, &data.y[0], regs.y_prev(1));
        Some(precompute_bars(model.matrices_at(theta, &ctx)?, eps)?)
    };

    for k in 1..=n_steps {
        let y_k = &data.y[k - 1];
        let y_prev = regs.y_prev(k).clone();
        let mats_owned;
        let mats: &StepMatrices = match &static_mats {
            Some(m) => m,
            None => {
                let ctx_pre = FilterContext::pre_update(k, y_k, &y_prev);
                let raw = model.matrices_at(theta, &ctx_pre).map_err(|e| e.at_step(k))?;
                mats_owned = precompute_bars(raw, eps).map_err(|e| e.at_step(k))?;
                &mats_owned
            }
        };

        let pri = ud_time_update(&state, &y_prev, &u_prev, mats, eps).map_err(|e| e.at_step(k))?;

        let ctx_mu = FilterContext {
            k,
            y: y_k,
            y_prev: &y_prev,
            alpha_pred: Some(&pri.alpha),
            d_alpha_pred: None,
        };
        let mats_mu_owned;
        let mats_mu: &StepMatrices = if model.needs_predicted_state() {
            let raw_mu = model.matrices_at(theta, &ctx_mu).map_err(|e| e.at_step(k))?;
            mats_mu_owned = precompute_bars(raw_mu, eps).map_err(|e| e.at_step(k))?;
            &mats_mu_owned
        } else {
            mats
        };

        let u_k = regs.at_step(theta, k, &ctx_mu);
        let (post, out) =
            ud_measurement_update(&pri, y_k, &u_k, mats_mu, eps).map_err(|e| e.at_step(k))?;

        let ln_det: f64 = out.re_ud.d.iter().map(|d| d.ln()).sum();
        let quad: f64 = (0..dims.m)
            .map(|i| out.e_bar[i] * out.e_bar[i] / out.re_ud.d[i])
            .sum();
        loglik += -0.5 * (ln_det + quad);
        if !loglik.is_finite() {
            return Err(Error::NonFiniteLogLik { step: k });
        }

        u_prev = u_k;
        state = post.clone();
        states.push(post);
        outputs.push(out);
    }

    Ok(UdRun {
        states,
        outputs,
        loglik,
    })
}
