//! Conventional (non-factorized) filters for the LTI MIMO and pairwise
//! families, plus the directly differentiated sensitivity recursion.
//!
//! This is the known-fragile baseline: the covariance is propagated as a
//! full matrix through the Riccati recursion, symmetrized after each update
//! but without Joseph-form stabilization, so roundoff can and does destroy
//! positive definiteness under ill-conditioning. Failures surface as errors
//! rather than being masked.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{FilterData, Regressors};
use crate::matops::{udu_factorize, UdFactor, DEFAULT_EPS};
use crate::model::{
    differentiate_bars, precompute_bars, FilterContext, Model, StepDerivatives, StepMatrices,
};

/// Dense filter state: estimate, covariance and time index.
#[derive(Debug, Clone)]
pub struct DenseFilterState {
    pub alpha: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

/// Per-parameter sensitivities of the dense filter state.
#[derive(Debug, Clone)]
pub struct DenseSensitivityState {
    pub d_alpha: Vec<DVector<f64>>,
    pub d_p: Vec<DMatrix<f64>>,
}

/// Innovation quantities of one conventional step.
#[derive(Debug, Clone)]
pub struct ConvStepOutput {
    pub e: DVector<f64>,
    pub r_e: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// UD factors of `R_e`, used for the inverse action and ln det.
    pub r_e_ud: UdFactor,
}

/// Per-parameter innovation sensitivities of one step.
#[derive(Debug, Clone)]
pub struct ConvStepSens {
    pub d_e: Vec<DVector<f64>>,
    pub d_r_e: Vec<DMatrix<f64>>,
}

fn invert_r_e(r_e: &DMatrix<f64>, step: usize, eps: f64) -> Result<(UdFactor, DMatrix<f64>)> {
    let ud = udu_factorize(r_e, eps).map_err(|_| Error::SingularInnovationCov { step })?;
    let m = ud.dim();
    let d_min = ud.d.min();
    let d_max = ud.d.max();
    if d_min <= 0.0 || d_max / d_min > 1.0 / eps {
        return Err(Error::SingularInnovationCov { step });
    }
    // Dense inverse through the factors (m is small).
    let mut inv = DMatrix::zeros(m, m);
    for c in 0..m {
        let e = DVector::from_fn(m, |i, _| if i == c { 1.0 } else { 0.0 });
        let mut x = crate::matops::solve_unit_upper(&ud.u, &e);
        for i in 0..m {
            x[i] /= ud.d[i];
        }
        inv.set_column(c, &crate::matops::solve_unit_upper_transpose(&ud.u, &x));
    }
    Ok((ud, inv))
}

/// One conventional step: time update with `mats`, measurement update with
/// `mats_mu` (identical unless the model re-evaluates H with the predicted
/// state).
#[allow(clippy::too_many_arguments)]
pub fn conv_step(
    state: &DenseFilterState,
    y_k: &DVector<f64>,
    y_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    u_k: &DVector<f64>,
    mats: &StepMatrices,
    mats_mu: &StepMatrices,
    eps: f64,
) -> Result<(DenseFilterState, ConvStepOutput)> {
    let k = state.k + 1;
    // Time update.
    let alpha_pri =
        &mats.t_bar * &state.alpha + &mats.b_bar * u_prev + &mats.s_h_inv * y_prev;
    let mut p_pri = &mats.t_bar * &state.p * mats.t_bar.transpose() + &mats.q_bar;
    p_pri = (&p_pri + p_pri.transpose()) * 0.5;

    // Measurement update.
    let z = &mats_mu.raw.z;
    let mut r_e = z * &p_pri * z.transpose() + &mats_mu.raw.h;
    r_e = (&r_e + r_e.transpose()) * 0.5;
    let (r_e_ud, r_e_inv) = invert_r_e(&r_e, k, eps)?;
    let gain = &p_pri * z.transpose() * &r_e_inv;
    let e = y_k - z * &alpha_pri - &mats_mu.raw.beta * u_k;
    let alpha_post = &alpha_pri + &gain * &e;
    let n = state.alpha.len();
    let mut p_post = (DMatrix::identity(n, n) - &gain * z) * &p_pri;
    p_post = (&p_post + p_post.transpose()) * 0.5;

    Ok((
        DenseFilterState {
            alpha: alpha_post,
            p: p_post,
            k,
        },
        ConvStepOutput {
            e,
            r_e,
            gain,
            r_e_ud,
        },
    ))
}

/// Directly differentiated conventional step (the filter sensitivity
/// equations). Must be fed the same inputs as the `conv_step` it shadows,
/// plus per-parameter derivatives of the matrices and regressors.
#[allow(clippy::too_many_arguments)]
pub fn conv_sensitivity_step(
    state: &DenseFilterState,
    sens: &DenseSensitivityState,
    out: &ConvStepOutput,
    new_state: &DenseFilterState,
    y_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    u_k: &DVector<f64>,
    d_u_prev: &[DVector<f64>],
    d_u_k: &[DVector<f64>],
    mats: &StepMatrices,
    mats_mu: &StepMatrices,
    d_mats: &[StepDerivatives],
    d_mats_mu: &[StepDerivatives],
    eps: f64,
) -> Result<(DenseSensitivityState, ConvStepSens)> {
    let p = sens.d_alpha.len();
    let z = &mats_mu.raw.z;
    let k = new_state.k;

    // Recompute the a-priori quantities (cheap at these dimensions).
    let alpha_pri =
        &mats.t_bar * &state.alpha + &mats.b_bar * u_prev + &mats.s_h_inv * y_prev;
    let p_pri = {
        let m = &mats.t_bar * &state.p * mats.t_bar.transpose() + &mats.q_bar;
        (&m + m.transpose()) * 0.5
    };
    let (_, r_e_inv) = invert_r_e(&out.r_e, k, eps)?;

    let mut d_alpha_new = Vec::with_capacity(p);
    let mut d_p_new = Vec::with_capacity(p);
    let mut d_e_all = Vec::with_capacity(p);
    let mut d_r_e_all = Vec::with_capacity(p);

    for i in 0..p {
        let dm = &d_mats[i];
        let dmu = &d_mats_mu[i];

        let d_alpha_pri = &dm.dt_bar * &state.alpha
            + &mats.t_bar * &sens.d_alpha[i]
            + &dm.db_bar * u_prev
            + &mats.b_bar * &d_u_prev[i]
            + &dm.d_s_h_inv * y_prev;
        let mut d_p_pri = &dm.dt_bar * &state.p * mats.t_bar.transpose()
            + &mats.t_bar * &sens.d_p[i] * mats.t_bar.transpose()
            + &mats.t_bar * &state.p * dm.dt_bar.transpose()
            + &dm.dq_bar;
        d_p_pri = (&d_p_pri + d_p_pri.transpose()) * 0.5;

        let mut d_r_e = &dmu.raw.dz * &p_pri * z.transpose()
            + z * &d_p_pri * z.transpose()
            + z * &p_pri * dmu.raw.dz.transpose()
            + &dmu.raw.dh;
        d_r_e = (&d_r_e + d_r_e.transpose()) * 0.5;

        let d_gain = (&d_p_pri * z.transpose() + &p_pri * dmu.raw.dz.transpose()
            - &out.gain * &d_r_e)
            * &r_e_inv;

        let d_e = -(&dmu.raw.dz * &alpha_pri)
            - z * &d_alpha_pri
            - &dmu.raw.dbeta * u_k
            - &mats_mu.raw.beta * &d_u_k[i];

        let d_alpha_post = &d_alpha_pri + &d_gain * &out.e + &out.gain * &d_e;

        let n = state.alpha.len();
        let mut d_p_post = (DMatrix::identity(n, n) - &out.gain * z) * &d_p_pri
            - (&d_gain * z + &out.gain * &dmu.raw.dz) * &p_pri;
        d_p_post = (&d_p_post + d_p_post.transpose()) * 0.5;

        d_alpha_new.push(d_alpha_post);
        d_p_new.push(d_p_post);
        d_e_all.push(d_e);
        d_r_e_all.push(d_r_e);
    }

    Ok((
        DenseSensitivityState {
            d_alpha: d_alpha_new,
            d_p: d_p_new,
        },
        ConvStepSens {
            d_e: d_e_all,
            d_r_e: d_r_e_all,
        },
    ))
}

/// A full conventional filter pass.
#[derive(Debug, Clone)]
pub struct ConvRun {
    pub states: Vec<DenseFilterState>,
    pub outputs: Vec<ConvStepOutput>,
    pub loglik: f64,
}

/// A full conventional pass with the directly differentiated sensitivities.
#[derive(Debug, Clone)]
pub struct ConvScoreRun {
    pub run: ConvRun,
    pub score: DVector<f64>,
}

/// Runs the conventional filter and evaluates the log-likelihood
/// `-c0 - 1/2 sum { ln det R_e + e^T R_e^{-1} e }` over the executed
/// measurement updates (`c0 = m N ln(2 pi) / 2`).
pub fn conv_run(model: &dyn Model, theta: &DVector<f64>, data: &FilterData) -> Result<ConvRun> {
    run_impl(model, theta, data, false).map(|(run, _)| run)
}

/// Runs the conventional filter together with the sensitivity recursion and
/// assembles the analytic score.
pub fn conv_run_with_score(
    model: &dyn Model,
    theta: &DVector<f64>,
    data: &FilterData,
) -> Result<ConvScoreRun> {
    let (run, score) = run_impl(model, theta, data, true)?;
    Ok(ConvScoreRun {
        run,
        score: score.expect("score requested"),
    })
}

fn run_impl(
    model: &dyn Model,
    theta: &DVector<f64>,
    data: &FilterData,
    with_score: bool,
) -> Result<(ConvRun, Option<DVector<f64>>)> {
    model.validate(theta)?;
    let dims = model.dims();
    let p = if with_score { model.theta_dim() } else { 0 };
    let regs = Regressors::new(model, data)?;
    let eps = DEFAULT_EPS;

    let mut state = DenseFilterState {
        alpha: model.alpha0_mean(theta),
        p: model.pi0(theta),
        k: 0,
    };
    let mut sens = DenseSensitivityState {
        d_alpha: (0..p).map(|i| model.d_alpha0_mean(theta, i)).collect(),
        d_p: (0..p).map(|i| model.d_pi0(theta, i)).collect(),
    };
    let mut u_prev = regs.initial(theta);
    let mut d_u_prev: Vec<DVector<f64>> = (0..p).map(|i| regs.d_initial(theta, i)).collect();

    let n_steps = data.len();
    let c0 = 0.5 * dims.m as f64 * (2.0 * std::f64::consts::PI).ln() * n_steps as f64;
    let mut loglik = -c0;
    let mut score: DVector<f64> = DVector::zeros(p);
    let mut states = Vec::with_capacity(n_steps);
    let mut outputs = Vec::with_capacity(n_steps);

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

        // A-priori state, needed in the context for self-exciting models.
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
            d_alpha_pred: if with_score { Some(&d_alpha_pri) } else { None },
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
        let d_u_k: Vec<DVector<f64>> = (0..p)
            .map(|i| regs.d_at_step(theta, i, k, &ctx_mu))
            .collect();

        let (new_state, out) = conv_step(&state, y_k, &y_prev, &u_prev, &u_k, mats, mats_mu, eps)
            .map_err(|e| e.at_step(k))?;

        if with_score {
            let d_mats_mu_owned;
            let d_mats_mu: &[StepDerivatives] = if model.needs_predicted_state() {
                d_mats_mu_owned = (0..p)
                    .map(|i| {
                        differentiate_bars(mats_mu, model.derivatives_at(theta, i, &ctx_mu))
                    })
                    .collect::<Vec<_>>();
                &d_mats_mu_owned
            } else {
                d_mats
            };
            let (new_sens, step_sens) = conv_sensitivity_step(
                &state, &sens, &out, &new_state, &y_prev, &u_prev, &u_k, &d_u_prev, &d_u_k,
                mats, mats_mu, d_mats, d_mats_mu, eps,
            )
            .map_err(|e| e.at_step(k))?;

            let (_, r_e_inv) = invert_r_e(&out.r_e, k, eps)?;
            let w = &r_e_inv * &out.e;
            for i in 0..p {
                // d{ln det R_e + e^T R_e^{-1} e}.
                let tr = (&r_e_inv * &step_sens.d_r_e[i]).trace();
                let quad = 2.0 * step_sens.d_e[i].dot(&w) - w.dot(&(&step_sens.d_r_e[i] * &w));
                score[i] += -0.5 * (tr + quad);
            }
            sens = new_sens;
        }

        let ln_det: f64 = out.r_e_ud.d.iter().map(|d| d.ln()).sum();
        let (_, r_e_inv) = invert_r_e(&out.r_e, k, eps)?;
        let quad = out.e.dot(&(&r_e_inv * &out.e));
        loglik += -0.5 * (ln_det + quad);
        if !loglik.is_finite() {
            return Err(Error::NonFiniteLogLik { step: k });
        }

        u_prev = u_k;
        d_u_prev = d_u_k;
        state = new_state.clone();
        states.push(new_state);
        outputs.push(out);
    }

    if with_score && !score.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFiniteScore { step: n_steps });
    }

    Ok((
        ConvRun {
            states,
            outputs,
            loglik,
        },
        if with_score { Some(score) } else { None },
    ))
}
