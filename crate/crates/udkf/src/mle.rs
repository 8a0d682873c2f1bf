//! Maximum-likelihood estimation on top of the filters: parameter
//! transforms, a projected quasi-Newton ascent with backtracking line
//! search, the four estimator variants (conventional/UD filter crossed with
//! numeric/analytic gradients) and a Monte Carlo study driver.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filt_conv::{conv_run, conv_run_with_score};
use crate::filt_ud::ud_run;
use crate::filt_ud_diff::ud_run_with_score;
use crate::filter::FilterData;
use crate::model::Model;

/// Reparameterization between the optimizer variables `phi` and the model
/// parameters `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// `theta = phi`.
    None,
    /// `theta_i = exp(phi_i)`, keeping every component positive.
    LogPositive,
    /// The GARCH(1,1)-in-mean parameterization `theta = (a0, a1, b1,
    /// delta, sigma0, sigma1)`: positivity for `a0, sigma0, sigma1` via exp
    /// and the stationarity constraint `a1 + b1 < 1` (with `a1, b1 >= 0`)
    /// via a scaled double-sigmoid, `a1 = c u v`, `b1 = c (1 - u) v` with
    /// `u, v` sigmoids of two free variables and `c = 0.999`.
    GarchStationarity,
}

const GARCH_CAP: f64 = 0.999;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

impl Transform {
    pub fn to_theta(&self, phi: &DVector<f64>) -> DVector<f64> {
        match self {
            Transform::None => phi.clone(),
            Transform::LogPositive => phi.map(f64::exp),
            Transform::GarchStationarity => {
                assert_eq!(phi.len(), 6);
                let u = sigmoid(phi[1]);
                let v = sigmoid(phi[2]);
                DVector::from_vec(vec![
                    phi[0].exp(),
                    GARCH_CAP * u * v,
                    GARCH_CAP * (1.0 - u) * v,
                    phi[3],
                    phi[4].exp(),
                    phi[5].exp(),
                ])
            }
        }
    }

    pub fn to_phi(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Transform::None => theta.clone(),
            Transform::LogPositive => theta.map(|t| t.max(1e-300).ln()),
            Transform::GarchStationarity => {
                assert_eq!(theta.len(), 6);
                let v = ((theta[1] + theta[2]) / GARCH_CAP).clamp(1e-12, 1.0 - 1e-12);
                let u = (theta[1] / (GARCH_CAP * v)).clamp(1e-12, 1.0 - 1e-12);
                DVector::from_vec(vec![
                    theta[0].max(1e-300).ln(),
                    logit(u),
                    logit(v),
                    theta[3],
                    theta[4].max(1e-300).ln(),
                    theta[5].max(1e-300).ln(),
                ])
            }
        }
    }

    /// Jacobian `d theta / d phi` at `phi`.
    pub fn jacobian(&self, phi: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Transform::None => DMatrix::identity(phi.len(), phi.len()),
            Transform::LogPositive => DMatrix::from_diagonal(&phi.map(f64::exp)),
            Transform::GarchStationarity => {
                let u = sigmoid(phi[1]);
                let v = sigmoid(phi[2]);
                let du = u * (1.0 - u);
                let dv = v * (1.0 - v);
                let mut j = DMatrix::zeros(6, 6);
                j[(0, 0)] = phi[0].exp();
                j[(1, 1)] = GARCH_CAP * du * v;
                j[(1, 2)] = GARCH_CAP * u * dv;
                j[(2, 1)] = -GARCH_CAP * du * v;
                j[(2, 2)] = GARCH_CAP * (1.0 - u) * dv;
                j[(3, 3)] = 1.0;
                j[(4, 4)] = phi[4].exp();
                j[(5, 5)] = phi[5].exp();
                j
            }
        }
    }

    /// Maps a box on `theta` to a box on `phi`. Componentwise monotone
    /// transforms map the bounds through; the GARCH transform ignores
    /// `theta` bounds and uses a wide box that keeps exp/sigmoid away from
    /// overflow and saturation.
    fn phi_bounds(
        &self,
        lower: &Option<DVector<f64>>,
        upper: &Option<DVector<f64>>,
        p: usize,
    ) -> (DVector<f64>, DVector<f64>) {
        let wide = 30.0;
        match self {
            Transform::None => (
                lower
                    .clone()
                    .unwrap_or_else(|| DVector::from_element(p, f64::NEG_INFINITY)),
                upper
                    .clone()
                    .unwrap_or_else(|| DVector::from_element(p, f64::INFINITY)),
            ),
            Transform::LogPositive => (
                lower
                    .as_ref()
                    .map(|l| l.map(|x| x.max(1e-300).ln()))
                    .unwrap_or_else(|| DVector::from_element(p, -wide)),
                upper
                    .as_ref()
                    .map(|u| u.map(|x| x.max(1e-300).ln()))
                    .unwrap_or_else(|| DVector::from_element(p, wide)),
            ),
            Transform::GarchStationarity => (
                DVector::from_element(p, -wide),
                DVector::from_element(p, wide),
            ),
        }
    }
}

/// Configuration of one likelihood maximization.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Starting point, in `theta` coordinates.
    pub theta0: DVector<f64>,
    /// Optional box constraints on `theta` (honored exactly for the
    /// componentwise monotone transforms).
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub transform: Transform,
}

impl FitConfig {
    pub fn new(theta0: DVector<f64>) -> Self {
        FitConfig {
            theta0,
            lower: None,
            upper: None,
            max_iters: 200,
            grad_tol: 1e-6,
            transform: Transform::None,
        }
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }
}

/// Termination status of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    /// Projected gradient below tolerance.
    Converged,
    /// Iteration budget exhausted.
    MaxIters,
    /// No acceptable step found along the search direction.
    Stalled,
    /// The objective (or its gradient) could not be evaluated; `theta` holds
    /// the best point seen, which may be the starting point.
    ObjectiveFailure,
}

/// Result of one likelihood maximization.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: DVector<f64>,
    pub loglik: f64,
    pub status: FitStatus,
    pub iterations: usize,
    pub n_value_evals: usize,
    pub n_grad_evals: usize,
    pub grad_norm: f64,
    /// The error behind an `ObjectiveFailure`, when one was recorded.
    pub failure: Option<Error>,
}

impl FitResult {
    pub fn failed(&self) -> bool {
        self.status == FitStatus::ObjectiveFailure || !self.theta.iter().all(|t| t.is_finite())
    }
}

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 45;
const FD_REL_STEP: f64 = 1e-6;

fn clamp_to_box(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]))
}

/// Infinity norm of the projected gradient of `-value` at a box-constrained
/// point: components pushing outside an active bound are dropped.
fn projected_grad_norm(
    g: &DVector<f64>,
    x: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..x.len() {
        let gi = g[i];
        let blocked_low = x[i] <= lo[i] && gi > 0.0;
        let blocked_high = x[i] >= hi[i] && gi < 0.0;
        if !(blocked_low || blocked_high) {
            norm = norm.max(gi.abs());
        }
    }
    norm
}

/// Maximizes a log-likelihood with a projected BFGS ascent.
///
/// `value` evaluates the objective alone (used by the line search);
/// `value_and_grad` evaluates objective and gradient together, both in
/// `phi` coordinates. A non-finite log-likelihood at a trial point is an
/// objective value of effectively minus infinity and rejects that step;
/// every other evaluation error is a numerical breakdown of the filter and
/// aborts the fit with `ObjectiveFailure`, reported rather than masked by
/// steering the search around it.
pub fn fit_mle<V, G>(value: V, value_and_grad: G, config: &FitConfig) -> FitResult
where
    V: Fn(&DVector<f64>) -> Result<f64>,
    G: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let transform = config.transform;
    let p = config.theta0.len();
    let (lo, hi) = transform.phi_bounds(&config.lower, &config.upper, p);
    let mut x = clamp_to_box(&transform.to_phi(&config.theta0), &lo, &hi);

    let mut n_value = 0usize;
    let mut n_grad = 0usize;

    let fail = |x: &DVector<f64>, f: f64, it, nv, ng, err: Error| FitResult {
        theta: transform.to_theta(x),
        loglik: f,
        status: FitStatus::ObjectiveFailure,
        iterations: it,
        n_value_evals: nv,
        n_grad_evals: ng,
        grad_norm: f64::NAN,
        failure: Some(err),
    };

    // Work in minimization form: f = -loglik, g = -grad.
    n_grad += 1;
    let (mut f, mut g) = match value_and_grad(&x) {
        Ok((v, gr)) => (-v, -gr),
        Err(e) => return fail(&x, f64::NAN, 0, n_value, n_grad, e),
    };

    // Start with a gradient-scaled inverse Hessian so the first trial step
    // has a sensible length, and rescale on the first curvature pair.
    let init_scale = |g: &DVector<f64>| 1.0 / g.amax().max(1.0);
    let mut h_inv = DMatrix::<f64>::identity(p, p) * init_scale(&g);
    let mut first_update = true;
    let mut status = FitStatus::MaxIters;
    let mut iters = 0usize;

    for it in 0..config.max_iters {
        iters = it;
        let pg = projected_grad_norm(&g, &x, &lo, &hi);
        if pg < config.grad_tol {
            status = FitStatus::Converged;
            break;
        }

        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            // Not a descent direction: reset the curvature estimate.
            h_inv = DMatrix::identity(p, p) * init_scale(&g);
            first_update = true;
            dir = -g.clone();
        }

        let mut t = 1.0;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        for _ in 0..MAX_BACKTRACKS {
            let x_new = clamp_to_box(&(&x + &dir * t), &lo, &hi);
            let s = &x_new - &x;
            if s.amax() == 0.0 {
                break;
            }
            n_value += 1;
            match value(&x_new) {
                Ok(v) => {
                    let f_new = -v;
                    if f_new.is_finite() && f_new <= f + ARMIJO_C * g.dot(&s) {
                        accepted = Some((x_new, f_new));
                        break;
                    }
                }
                Err(Error::NonFiniteLogLik { .. }) => {}
                Err(e) => return fail(&x, -f, it, n_value, n_grad, e),
            }
            t *= BACKTRACK;
        }

        let (x_new, f_new) = match accepted {
            Some(a) => a,
            None => {
                status = FitStatus::Stalled;
                break;
            }
        };

        n_grad += 1;
        let (_, g_theta_new) = match value_and_grad(&x_new) {
            Ok((v, gr)) => (v, gr),
            Err(e) => return fail(&x, -f, it + 1, n_value, n_grad, e),
        };
        let g_new = -g_theta_new;

        // BFGS update of the inverse Hessian approximation.
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first_update {
                h_inv = DMatrix::identity(p, p) * (sy / yv.dot(&yv));
                first_update = false;
            }
            let rho = 1.0 / sy;
            let i_mat = DMatrix::<f64>::identity(p, p);
            let left = &i_mat - &s * yv.transpose() * rho;
            let right = &i_mat - &yv * s.transpose() * rho;
            h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
        } else {
            // Non-positive curvature (the objective is locally concave along
            // the step): the stale estimate would freeze progress, so fall
            // back to a gradient-scaled identity.
            h_inv = DMatrix::identity(p, p) * init_scale(&g_new);
            first_update = true;
        }

        x = x_new;
        f = f_new;
        g = g_new;
        iters = it + 1;
    }

    FitResult {
        theta: transform.to_theta(&x),
        loglik: -f,
        status,
        iterations: iters,
        n_value_evals: n_value,
        n_grad_evals: n_grad,
        grad_norm: projected_grad_norm(&g, &x, &lo, &hi),
        failure: None,
    }
}

/// Central-difference gradient of `value` in `phi` coordinates.
fn numeric_grad<V>(value: &V, phi: &DVector<f64>) -> Result<DVector<f64>>
where
    V: Fn(&DVector<f64>) -> Result<f64>,
{
    let p = phi.len();
    let mut g = DVector::zeros(p);
    for i in 0..p {
        let h = FD_REL_STEP * phi[i].abs().max(1.0);
        let mut xp = phi.clone();
        xp[i] += h;
        let mut xm = phi.clone();
        xm[i] -= h;
        g[i] = (value(&xp)? - value(&xm)?) / (2.0 * h);
    }
    Ok(g)
}

/// Filter/gradient combination used by a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    ConvNumeric,
    ConvAnalytic,
    UdNumeric,
    UdAnalytic,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::ConvNumeric,
        Estimator::ConvAnalytic,
        Estimator::UdNumeric,
        Estimator::UdAnalytic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::ConvNumeric => "conv-numeric",
            Estimator::ConvAnalytic => "conv-analytic",
            Estimator::UdNumeric => "ud-numeric",
            Estimator::UdAnalytic => "ud-analytic",
        }
    }
}

/// Fits `model` to `data` with the chosen estimator.
pub fn fit_model(
    model: &dyn Model,
    data: &FilterData,
    estimator: Estimator,
    config: &FitConfig,
) -> FitResult {
    let transform = config.transform;
    let value = |phi: &DVector<f64>| -> Result<f64> {
        let theta = transform.to_theta(phi);
        match estimator {
            Estimator::ConvNumeric | Estimator::ConvAnalytic => {
                conv_run(model, &theta, data).map(|r| r.loglik)
            }
            Estimator::UdNumeric | Estimator::UdAnalytic => {
                ud_run(model, &theta, data).map(|r| r.loglik)
            }
        }
    };
    let value_and_grad = |phi: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let theta = transform.to_theta(phi);
        match estimator {
            Estimator::ConvAnalytic => {
                let run = conv_run_with_score(model, &theta, data)?;
                let g_phi = transform.jacobian(phi).transpose() * run.score;
                Ok((run.run.loglik, g_phi))
            }
            Estimator::UdAnalytic => {
                let run = ud_run_with_score(model, &theta, data)?;
                let g_phi = transform.jacobian(phi).transpose() * run.eval.grad;
                Ok((run.run.loglik, g_phi))
            }
            Estimator::ConvNumeric | Estimator::UdNumeric => {
                let v = value(phi)?;
                let g = numeric_grad(&value, phi)?;
                Ok((v, g))
            }
        }
    };
    fit_mle(value, value_and_grad, config)
}

/// One Monte Carlo replicate of one estimator.
#[derive(Debug, Clone)]
pub struct McRun {
    pub replicate: usize,
    pub fit: FitResult,
    pub seconds: f64,
}

/// Aggregate of one estimator over the replicates. Failed replicates are
/// excluded from the moments and counted in `failures`.
#[derive(Debug, Clone)]
pub struct McSummary {
    pub estimator: Estimator,
    pub mean: DVector<f64>,
    pub rmse: DVector<f64>,
    /// Mean absolute percentage error over components and replicates.
    pub mape_pct: f64,
    pub failures: usize,
    pub runs: usize,
    pub mean_seconds: f64,
}

fn summarize(
    estimator: Estimator,
    theta_true: &DVector<f64>,
    runs: &[McRun],
) -> McSummary {
    let p = theta_true.len();
    let ok: Vec<&McRun> = runs.iter().filter(|r| !r.fit.failed()).collect();
    let failures = runs.len() - ok.len();
    let mut mean = DVector::zeros(p);
    let mut rmse = DVector::zeros(p);
    let mut mape = 0.0;
    if !ok.is_empty() {
        for r in &ok {
            mean += &r.fit.theta;
            for i in 0..p {
                let d = r.fit.theta[i] - theta_true[i];
                rmse[i] += d * d;
            }
            let ape: f64 = (0..p)
                .map(|i| ((r.fit.theta[i] - theta_true[i]) / theta_true[i]).abs())
                .sum::<f64>()
                / p as f64;
            mape += ape;
        }
        let n = ok.len() as f64;
        mean /= n;
        rmse = rmse.map(|v: f64| (v / n).sqrt());
        mape = 100.0 * mape / n;
    } else {
        mean.fill(f64::NAN);
        rmse.fill(f64::NAN);
        mape = f64::NAN;
    }
    let mean_seconds = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|r| r.seconds).sum::<f64>() / ok.len() as f64
    };
    McSummary {
        estimator,
        mean,
        rmse,
        mape_pct: mape,
        failures,
        runs: runs.len(),
        mean_seconds,
    }
}

/// Full Monte Carlo output: the per-run records and their summaries, in the
/// order of the requested estimators.
#[derive(Debug)]
pub struct McStudy {
    pub summaries: Vec<McSummary>,
    pub runs: Vec<Vec<McRun>>,
}

/// Runs `n_runs` replicates: each replicate simulates one dataset from
/// `theta_true` (seed derived deterministically from `seed` and the
/// replicate index) and fits it with every requested estimator, so the
/// estimators see identical data and timing is comparable.
pub fn monte_carlo_study(
    model: &(dyn Model + Sync),
    theta_true: &DVector<f64>,
    n_steps: usize,
    n_runs: usize,
    estimators: &[Estimator],
    config: &FitConfig,
    seed: u64,
) -> Result<McStudy> {
    let per_run: Vec<Vec<McRun>> = (0..n_runs)
        .into_par_iter()
        .map(|j| -> Result<Vec<McRun>> {
            let run_seed = seed
                .wrapping_add((j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                .wrapping_add(1);
            let sim = model.simulate(theta_true, n_steps, run_seed)?;
            let data = FilterData::from_sim(&sim);
            let mut out = Vec::with_capacity(estimators.len());
            for &est in estimators {
                let t0 = Instant::now();
                let fit = fit_model(model, &data, est, config);
                out.push(McRun {
                    replicate: j,
                    fit,
                    seconds: t0.elapsed().as_secs_f64(),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let summaries = estimators
        .iter()
        .enumerate()
        .map(|(ei, &est)| {
            let runs: Vec<McRun> = per_run.iter().map(|r| r[ei].clone()).collect();
            summarize(est, theta_true, &runs)
        })
        .collect();
    Ok(McStudy {
        summaries,
        runs: per_run,
    })
}
