//! Model descriptions: system matrices, parameterizations with analytic
//! derivatives, the two model families (LTI MIMO / pairwise Markov) and the
//! built-in benchmark and GARCH-in-Mean parameterizations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matops::{diff_udu, udu_factorize, solve_unit_upper, solve_unit_upper_transpose, UdFactor, DEFAULT_EPS};
use crate::rng::Rng;

/// Which regressor the filter wires into the recursion: the exogenous
/// sequence `x_k` (LTI MIMO) or the previous observation `y_{k-1}`
/// (pairwise Markov).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LtiMimo,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// State dimension.
    pub n: usize,
    /// Measurement dimension.
    pub m: usize,
    /// Regressor dimension.
    pub d: usize,
}

/// Raw per-step system matrices of the stacked state-space form.
#[derive(Debug, Clone)]
pub struct RawMatrices {
    pub t: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

/// Raw matrices plus the precomputed bar quantities
/// `T_bar = T - S H^{-1} Z`, `B_bar = B - S H^{-1} beta`,
/// `Q_bar = Q - S H^{-1} S^T` and the UD factors of `Q_bar` and `H`.
#[derive(Debug, Clone)]
pub struct StepMatrices {
    pub raw: RawMatrices,
    pub t_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub ud_q_bar: UdFactor,
    pub ud_h: UdFactor,
    /// `S H^{-1}` (n x m), zero when S = 0.
    pub s_h_inv: DMatrix<f64>,
}

/// Per-parameter derivatives of the raw matrices.
#[derive(Debug, Clone)]
pub struct RawDerivatives {
    pub dt: DMatrix<f64>,
    pub dz: DMatrix<f64>,
    pub db: DMatrix<f64>,
    pub dbeta: DMatrix<f64>,
    pub dq: DMatrix<f64>,
    pub dh: DMatrix<f64>,
    pub ds: DMatrix<f64>,
}

impl RawDerivatives {
    pub fn zeros(dims: Dims) -> Self {
        let Dims { n, m, d } = dims;
        RawDerivatives {
            dt: DMatrix::zeros(n, n),
            dz: DMatrix::zeros(m, n),
            db: DMatrix::zeros(n, d),
            dbeta: DMatrix::zeros(m, d),
            dq: DMatrix::zeros(n, n),
            dh: DMatrix::zeros(m, m),
            ds: DMatrix::zeros(n, m),
        }
    }
}

/// Raw derivatives plus derivatives of the bar quantities and of the UD
/// factors of `Q_bar` and `H`.
#[derive(Debug, Clone)]
pub struct StepDerivatives {
    pub raw: RawDerivatives,
    pub dt_bar: DMatrix<f64>,
    pub db_bar: DMatrix<f64>,
    pub dq_bar: DMatrix<f64>,
    pub d_u_q_bar: DMatrix<f64>,
    pub d_d_q_bar: DVector<f64>,
    pub d_u_h: DMatrix<f64>,
    pub d_d_h: DVector<f64>,
    /// Derivative of `S H^{-1}` by Jacobi's rule:
    /// `dS H^{-1} - S H^{-1} dH H^{-1}`.
    pub d_s_h_inv: DMatrix<f64>,
}

/// Per-step information handed to a model when its matrices or regressor
/// depend on the filter's own quantities (self-exciting models such as the
/// GARCH-in-Mean cast, where H and the regressor involve the a-priori state).
#[derive(Debug, Clone, Copy)]
pub struct FilterContext<'a> {
    /// Measurement index, 1-based.
    pub k: usize,
    /// Current measurement `y_k`.
    pub y: &'a DVector<f64>,
    /// Previous measurement `y_{k-1}` (the pre-sample value at k = 1).
    pub y_prev: &'a DVector<f64>,
    /// A-priori state `alpha_{k|k-1}`; only available at measurement-update
    /// time.
    pub alpha_pred: Option<&'a DVector<f64>>,
    /// Per-parameter sensitivities of the a-priori state, when a sensitivity
    /// filter is running.
    pub d_alpha_pred: Option<&'a [DVector<f64>]>,
}

impl<'a> FilterContext<'a> {
    pub fn pre_update(k: usize, y: &'a DVector<f64>, y_prev: &'a DVector<f64>) -> Self {
        FilterContext {
            k,
            y,
            y_prev,
            alpha_pred: None,
            d_alpha_pred: None,
        }
    }
}

/// Output of a model simulation: pre-sample observation, observations
/// `y_1..y_N`, the regressors in effect and the true state path.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub y0: DVector<f64>,
    pub y: Vec<DVector<f64>>,
    pub x: Vec<DVector<f64>>,
    pub alpha: Vec<DVector<f64>>,
}

/// A parameterized state-space model.
///
/// `matrices_at` and `derivatives_at` are pure functions of
/// `(theta, context)` and may be called concurrently.
pub trait Model: Sync {
    fn kind(&self) -> ModelKind;
    fn dims(&self) -> Dims;
    fn theta_dim(&self) -> usize;

    fn validate(&self, _theta: &DVector<f64>) -> Result<()> {
        Ok(())
    }

    fn alpha0_mean(&self, theta: &DVector<f64>) -> DVector<f64>;
    fn pi0(&self, theta: &DVector<f64>) -> DMatrix<f64>;

    fn d_alpha0_mean(&self, _theta: &DVector<f64>, _i: usize) -> DVector<f64> {
        DVector::zeros(self.dims().n)
    }
    fn d_pi0(&self, _theta: &DVector<f64>, _i: usize) -> DMatrix<f64> {
        let n = self.dims().n;
        DMatrix::zeros(n, n)
    }

    fn matrices_at(&self, theta: &DVector<f64>, ctx: &FilterContext) -> Result<RawMatrices>;
    fn derivatives_at(&self, theta: &DVector<f64>, i: usize, ctx: &FilterContext)
        -> RawDerivatives;

    /// Whether H (and possibly Z) must be re-evaluated with the a-priori
    /// state in the context before each measurement update.
    fn needs_predicted_state(&self) -> bool {
        false
    }

    /// Whether the matrices depend on the filter context at all. For
    /// context-free models the filters evaluate (and factorize) the
    /// matrices and their derivatives once per run instead of per step.
    fn time_varying(&self) -> bool {
        self.needs_predicted_state()
    }

    /// Regressor `u_k` computed by the model itself from the filter context
    /// (evaluated after the time update of step k, with `alpha_pred` set).
    /// `None` means the regressor comes from data (`x_k`) or from `y_{k-1}`.
    fn regressor(&self, _theta: &DVector<f64>, _ctx: &FilterContext) -> Option<DVector<f64>> {
        None
    }
    fn d_regressor(
        &self,
        _theta: &DVector<f64>,
        _i: usize,
        _ctx: &FilterContext,
    ) -> Option<DVector<f64>> {
        None
    }

    /// Regressor in effect before the first measurement (`u_0`).
    fn initial_regressor(&self, _theta: &DVector<f64>, _y0: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dims().d)
    }
    fn d_initial_regressor(
        &self,
        _theta: &DVector<f64>,
        _i: usize,
        _y0: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(self.dims().d)
    }

    /// Pre-sample regressor `u_{-1}` for the pairwise family (referenced by
    /// the recursion at k = 0 without being defined by the data).
    fn u_minus1(&self) -> DVector<f64> {
        DVector::zeros(self.dims().d)
    }

    /// Exogenous input `x_k` used by the default simulator.
    fn exogenous(&self, _k: usize) -> DVector<f64> {
        DVector::zeros(self.dims().d)
    }

    /// Draws a trajectory of length `n` from the model equations with a
    /// deterministic, seedable generator.
    fn simulate(&self, theta: &DVector<f64>, n: usize, seed: u64) -> Result<SimOutput> {
        simulate_linear(self, theta, n, seed)
    }
}

/// Generic simulator for models whose matrices do not depend on the filter
/// context: draws `alpha_0 ~ N(alpha0_mean, Pi0)`, then iterates the stacked
/// recursion with jointly Gaussian `(eta_k, eps_k)` of covariance
/// `[[Q, S], [S^T, H]]`.
pub fn simulate_linear<M: Model + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<SimOutput> {
    model.validate(theta)?;
    let Dims { n: ns, m, d } = model.dims();
    let mut rng = Rng::new(seed);

    let y_dummy = DVector::zeros(m);
    let ctx = FilterContext::pre_update(1, &y_dummy, &y_dummy);
    let raw = model.matrices_at(theta, &ctx)?;

    let pi0 = udu_factorize(&model.pi0(theta), DEFAULT_EPS)?;
    let mut alpha = model.alpha0_mean(theta) + sample_ud(&pi0, &mut rng);

    // Joint noise covariance of [eta; eps].
    let mut joint = DMatrix::zeros(ns + m, ns + m);
    joint.view_mut((0, 0), (ns, ns)).copy_from(&raw.q);
    joint.view_mut((0, ns), (ns, m)).copy_from(&raw.s);
    joint.view_mut((ns, 0), (m, ns)).copy_from(&raw.s.transpose());
    joint.view_mut((ns, ns), (m, m)).copy_from(&raw.h);
    let joint_ud = udu_factorize(&joint, DEFAULT_EPS)?;

    let mut y0 = DVector::zeros(m);
    let mut y_prev = DVector::zeros(m);
    let mut ys = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n + 1);
    let mut alphas = Vec::with_capacity(n);

    for k in 0..=n {
        let u_k = match model.kind() {
            ModelKind::LtiMimo => model.exogenous(k),
            ModelKind::Pairwise => {
                if k == 0 {
                    model.u_minus1()
                } else {
                    y_prev.clone()
                }
            }
        };
        assert_eq!(u_k.len(), d, "exogenous regressor has wrong dimension");
        let noise = sample_ud(&joint_ud, &mut rng);
        let eta = noise.rows(0, ns).into_owned();
        let eps = noise.rows(ns, m).into_owned();
        let y_k = &raw.z * &alpha + &raw.beta * &u_k + eps;
        if k == 0 {
            y0 = y_k.clone();
        } else {
            ys.push(y_k.clone());
            alphas.push(alpha.clone());
        }
        xs.push(u_k.clone());
        alpha = &raw.t * &alpha + &raw.b * &u_k + eta;
        y_prev = y_k;
    }

    Ok(SimOutput {
        y0,
        y: ys,
        x: xs,
        alpha: alphas,
    })
}

fn sample_ud(f: &UdFactor, rng: &mut Rng) -> DVector<f64> {
    let n = f.dim();
    let z = DVector::from_fn(n, |i, _| f.d[i].max(0.0).sqrt() * rng.normal());
    &f.u * z
}

/// Computes the bar quantities and UD factors for one step.
///
/// The `H^{-1}` action goes through the UD factors of H (two triangular
/// solves and a diagonal scaling); H is never inverted explicitly.
pub fn precompute_bars(raw: RawMatrices, eps: f64) -> Result<StepMatrices> {
    let n = raw.t.nrows();
    let m = raw.h.nrows();
    let ud_h = udu_factorize(&raw.h, eps)?;
    let s_is_zero = raw.s.amax() == 0.0;

    let (t_bar, b_bar, q_bar, s_h_inv) = if s_is_zero {
        (
            raw.t.clone(),
            raw.b.clone(),
            raw.q.clone(),
            DMatrix::zeros(n, m),
        )
    } else {
        let scale = raw.h.amax().max(1.0);
        for i in 0..m {
            if ud_h.d[i] <= eps * scale {
                return Err(Error::SingularH {
                    index: i,
                    value: ud_h.d[i],
                });
            }
        }
        // S H^{-1} = (H^{-1} S^T)^T, column by column through the factors.
        let mut h_inv_st = DMatrix::zeros(m, n);
        for c in 0..n {
            let col = apply_h_inv(&ud_h, &raw.s.row(c).transpose());
            h_inv_st.set_column(c, &col);
        }
        let s_h_inv = h_inv_st.transpose();
        let t_bar = &raw.t - &s_h_inv * &raw.z;
        let b_bar = &raw.b - &s_h_inv * &raw.beta;
        let mut q_bar = &raw.q - &s_h_inv * raw.s.transpose();
        // Symmetrize: the product is symmetric in exact arithmetic.
        q_bar = (&q_bar + q_bar.transpose()) * 0.5;
        (t_bar, b_bar, q_bar, s_h_inv)
    };

    let ud_q_bar = udu_factorize(&q_bar, eps)?;
    Ok(StepMatrices {
        raw,
        t_bar,
        b_bar,
        q_bar,
        ud_q_bar,
        ud_h,
        s_h_inv,
    })
}

fn apply_h_inv(ud_h: &UdFactor, v: &DVector<f64>) -> DVector<f64> {
    let mut x = solve_unit_upper(&ud_h.u, v);
    for i in 0..ud_h.dim() {
        x[i] /= ud_h.d[i];
    }
    solve_unit_upper_transpose(&ud_h.u, &x)
}

/// Differentiates the bar quantities and the UD factors of `Q_bar` and `H`
/// for one parameter, given the raw matrix derivatives.
pub fn differentiate_bars(mats: &StepMatrices, raw_d: RawDerivatives) -> StepDerivatives {
    let s_is_zero = mats.raw.s.amax() == 0.0 && raw_d.ds.amax() == 0.0;

    let (dt_bar, db_bar, dq_bar, d_s_h_inv) = if s_is_zero {
        (
            raw_d.dt.clone(),
            raw_d.db.clone(),
            raw_d.dq.clone(),
            DMatrix::zeros(mats.raw.s.nrows(), mats.raw.s.ncols()),
        )
    } else {
        let m = mats.ud_h.dim();
        // H^{-1} through the factors, as a dense action on each column.
        let h_inv_mat = {
            let mut acc = DMatrix::zeros(m, m);
            for c in 0..m {
                let e = DVector::from_fn(m, |i, _| if i == c { 1.0 } else { 0.0 });
                acc.set_column(c, &apply_h_inv(&mats.ud_h, &e));
            }
            acc
        };
        // d(S H^{-1}) = dS H^{-1} - S H^{-1} dH H^{-1}  (Jacobi's rule).
        let d_s_h_inv = &raw_d.ds * &h_inv_mat - &mats.s_h_inv * &raw_d.dh * &h_inv_mat;
        let dt_bar = &raw_d.dt - &d_s_h_inv * &mats.raw.z - &mats.s_h_inv * &raw_d.dz;
        let db_bar = &raw_d.db - &d_s_h_inv * &mats.raw.beta - &mats.s_h_inv * &raw_d.dbeta;
        let mut dq_bar =
            &raw_d.dq - &d_s_h_inv * mats.raw.s.transpose() - &mats.s_h_inv * raw_d.ds.transpose();
        dq_bar = (&dq_bar + dq_bar.transpose()) * 0.5;
        (dt_bar, db_bar, dq_bar, d_s_h_inv)
    };

    let (d_u_q_bar, d_d_q_bar) = diff_udu(&mats.ud_q_bar, &dq_bar);
    let (d_u_h, d_d_h) = diff_udu(&mats.ud_h, &raw_d.dh);

    StepDerivatives {
        raw: raw_d,
        dt_bar,
        db_bar,
        dq_bar,
        d_u_q_bar,
        d_d_q_bar,
        d_u_h,
        d_d_h,
        d_s_h_inv,
    }
}

// ---------------------------------------------------------------------------
// Built-in ill-conditioning benchmark parameterization
// ---------------------------------------------------------------------------

/// The 4-state / 2-measurement LTI MIMO benchmark with a scalar parameter:
/// `H = theta^2 delta^2 I_2`, `Pi_0 = theta^2 I_4`, and the ill-conditioning
/// parameter `delta` shrinking the distinguishability of the two measurement
/// channels.
#[derive(Debug, Clone)]
pub struct Example1Model {
    pub delta: f64,
}

impl Example1Model {
    pub fn new(delta: f64) -> Result<Self> {
        if delta <= 0.0 {
            return Err(Error::InvalidDelta(delta));
        }
        Ok(Example1Model { delta })
    }
}

impl Model for Example1Model {
    fn kind(&self) -> ModelKind {
        ModelKind::LtiMimo
    }
    fn dims(&self) -> Dims {
        Dims { n: 4, m: 2, d: 1 }
    }
    fn theta_dim(&self) -> usize {
        1
    }

    fn alpha0_mean(&self, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(4)
    }
    fn pi0(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(4, 4) * (theta[0] * theta[0])
    }
    fn d_pi0(&self, theta: &DVector<f64>, _i: usize) -> DMatrix<f64> {
        DMatrix::identity(4, 4) * (2.0 * theta[0])
    }

    fn matrices_at(&self, theta: &DVector<f64>, _ctx: &FilterContext) -> Result<RawMatrices> {
        let th = theta[0];
        let dl = self.delta;
        Ok(RawMatrices {
            t: DMatrix::from_row_slice(
                4,
                4,
                &[
                    1.0, 1.0, 0.5, 0.5, //
                    0.0, 1.0, 1.0, 1.0, //
                    0.0, 0.0, 1.0, 0.0, //
                    0.0, 0.0, 0.0, 0.606,
                ],
            ),
            z: DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0 + dl]),
            b: DMatrix::zeros(4, 1),
            beta: DMatrix::zeros(2, 1),
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 0.0, 0.63e-2])),
            h: DMatrix::identity(2, 2) * (th * th * dl * dl),
            s: DMatrix::zeros(4, 2),
        })
    }

    fn derivatives_at(
        &self,
        theta: &DVector<f64>,
        _i: usize,
        _ctx: &FilterContext,
    ) -> RawDerivatives {
        let mut d = RawDerivatives::zeros(self.dims());
        d.dh = DMatrix::identity(2, 2) * (2.0 * theta[0] * self.delta * self.delta);
        d
    }
}

// ---------------------------------------------------------------------------
// GARCH-in-Mean(1,1) test-for-evolving-efficiency parameterization
// ---------------------------------------------------------------------------

/// Floor applied to the predicted conditional variance used as H, keeping the
/// measurement noise covariance positive definite.
pub const TEE_H_MIN: f64 = 1e-10;

/// GARCH-in-Mean(1,1) with random-walk regression coefficients, cast into the
/// LTI MIMO form with state `alpha_k = [h_k, beta0_k, beta1_k]`.
///
/// `theta = [a0, a1, b1, delta, sigma0, sigma1]`. H is the predicted
/// conditional variance `h_{k|k-1}` taken from the filter context, and the
/// regressor is `x_k = [1, eps_k^2]` with the residual built from the
/// a-priori state, so both carry chain-rule derivative contributions through
/// the state sensitivities injected by the sensitivity filter.
#[derive(Debug, Clone)]
pub struct TeeModel {
    /// Pre-sample conditional variance h_0 (sample variance by default).
    pub h0: f64,
    /// Pre-sample intercept beta_{0,0} (sample mean by default).
    pub beta0_init: f64,
    /// Pre-sample slope beta_{1,0}.
    pub beta1_init: f64,
    /// Prior covariance diagonal; defaults to {h0^2, 10, 10}.
    pub pi0_diag: [f64; 3],
    /// Initial state used when simulating (beta paths start here).
    pub sim_beta: [f64; 2],
}

impl TeeModel {
    /// Model with pre-sample moments taken from the observed series.
    pub fn for_data(returns: &[f64]) -> Result<Self> {
        if returns.len() < 2 {
            return Err(Error::DegenerateData(
                "need at least 2 observations for pre-sample moments".into(),
            ));
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0);
        if var <= 0.0 {
            return Err(Error::DegenerateData("series has zero variance".into()));
        }
        Ok(TeeModel {
            h0: var,
            beta0_init: mean,
            beta1_init: 0.0,
            pi0_diag: [var * var, 10.0, 10.0],
            sim_beta: [mean, 0.0],
        })
    }

    /// Model with explicit pre-sample values (used by the simulator tests).
    pub fn with_presample(h0: f64, beta0: f64, beta1: f64) -> Self {
        TeeModel {
            h0,
            beta0_init: beta0,
            beta1_init: beta1,
            pi0_diag: [h0 * h0, 10.0, 10.0],
            sim_beta: [beta0, beta1],
        }
    }

    fn residual(&self, theta: &DVector<f64>, ctx: &FilterContext) -> (f64, f64, f64) {
        // eps_k = y_k - beta0_{k|k-1} - beta1_{k|k-1} y_{k-1} - delta h_{k|k-1}.
        let delta = theta[3];
        let yk = ctx.y[0];
        let yprev = ctx.y_prev[0];
        match ctx.alpha_pred {
            Some(a) => (yk - a[1] - a[2] * yprev - delta * a[0], a[0], yprev),
            None => (
                yk - self.beta0_init - self.beta1_init * yprev - delta * self.h0,
                self.h0,
                yprev,
            ),
        }
    }
}

impl Model for TeeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::LtiMimo
    }
    fn dims(&self) -> Dims {
        Dims { n: 3, m: 1, d: 2 }
    }
    fn theta_dim(&self) -> usize {
        6
    }

    fn validate(&self, theta: &DVector<f64>) -> Result<()> {
        let (a0, a1, b1) = (theta[0], theta[1], theta[2]);
        if a0 <= 0.0 || a1 < 0.0 || b1 < 0.0 {
            return Err(Error::DegenerateData(format!(
                "GARCH coefficients out of range: a0={a0}, a1={a1}, b1={b1}"
            )));
        }
        if a1 + b1 >= 1.0 {
            return Err(Error::NonStationary(a1 + b1));
        }
        Ok(())
    }

    fn alpha0_mean(&self, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![self.h0, self.beta0_init, self.beta1_init])
    }
    fn pi0(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.pi0_diag.to_vec()))
    }

    fn needs_predicted_state(&self) -> bool {
        true
    }

    fn matrices_at(&self, theta: &DVector<f64>, ctx: &FilterContext) -> Result<RawMatrices> {
        let (a0, a1, b1, delta, s0, s1) = (
            theta[0], theta[1], theta[2], theta[3], theta[4], theta[5],
        );
        let h = match ctx.alpha_pred {
            Some(a) => {
                let h_pred = a[0];
                if h_pred <= 0.0 {
                    return Err(Error::NonPositiveVariance(h_pred));
                }
                h_pred.max(TEE_H_MIN)
            }
            // Placeholder before the time update; S = 0 so it only matters
            // at measurement-update time, where the context is populated.
            None => self.h0.max(TEE_H_MIN),
        };
        Ok(RawMatrices {
            t: DMatrix::from_diagonal(&DVector::from_vec(vec![b1, 1.0, 1.0])),
            z: DMatrix::from_row_slice(1, 3, &[delta, 1.0, ctx.y_prev[0]]),
            b: DMatrix::from_row_slice(3, 2, &[a0, a1, 0.0, 0.0, 0.0, 0.0]),
            beta: DMatrix::zeros(1, 2),
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, s0 * s0, s1 * s1])),
            h: DMatrix::from_element(1, 1, h),
            s: DMatrix::zeros(3, 1),
        })
    }

    fn derivatives_at(
        &self,
        theta: &DVector<f64>,
        i: usize,
        ctx: &FilterContext,
    ) -> RawDerivatives {
        let mut d = RawDerivatives::zeros(self.dims());
        match i {
            0 => d.db[(0, 0)] = 1.0,
            1 => d.db[(0, 1)] = 1.0,
            2 => d.dt[(0, 0)] = 1.0,
            3 => d.dz[(0, 0)] = 1.0,
            4 => d.dq[(1, 1)] = 2.0 * theta[4],
            5 => d.dq[(2, 2)] = 2.0 * theta[5],
            _ => panic!("parameter index out of range"),
        }
        // Chain-rule contribution of H = h_{k|k-1} through the state
        // sensitivity, injected via the context; zero when the prediction is
        // floored.
        if let (Some(a), Some(da)) = (ctx.alpha_pred, ctx.d_alpha_pred) {
            if a[0] > TEE_H_MIN {
                d.dh[(0, 0)] = da[i][0];
            }
        }
        d
    }

    fn regressor(&self, theta: &DVector<f64>, ctx: &FilterContext) -> Option<DVector<f64>> {
        let (eps, _h, _yprev) = self.residual(theta, ctx);
        Some(DVector::from_vec(vec![1.0, eps * eps]))
    }

    fn d_regressor(
        &self,
        theta: &DVector<f64>,
        i: usize,
        ctx: &FilterContext,
    ) -> Option<DVector<f64>> {
        let (eps, h, yprev) = self.residual(theta, ctx);
        let mut deps = 0.0;
        if let Some(da) = ctx.d_alpha_pred {
            let delta = theta[3];
            deps += -da[i][1] - da[i][2] * yprev - delta * da[i][0];
        }
        if i == 3 {
            deps += -h;
        }
        Some(DVector::from_vec(vec![0.0, 2.0 * eps * deps]))
    }

    fn initial_regressor(&self, theta: &DVector<f64>, y0: &DVector<f64>) -> DVector<f64> {
        // Pre-sample residual; y_{-1} is taken as 0 and beta1_init = 0 by
        // default, so the slope term drops.
        let delta = theta[3];
        let eps0 = y0[0] - self.beta0_init - delta * self.h0;
        DVector::from_vec(vec![1.0, eps0 * eps0])
    }

    fn d_initial_regressor(
        &self,
        theta: &DVector<f64>,
        i: usize,
        y0: &DVector<f64>,
    ) -> DVector<f64> {
        let delta = theta[3];
        let eps0 = y0[0] - self.beta0_init - delta * self.h0;
        let deps = if i == 3 { -self.h0 } else { 0.0 };
        DVector::from_vec(vec![0.0, 2.0 * eps0 * deps])
    }

    /// Structural simulation of the GARCH-in-Mean recursion: the conditional
    /// variance path is deterministic given past residuals, so simulation
    /// runs on the structural equations rather than the generic stacked form.
    fn simulate(&self, theta: &DVector<f64>, n: usize, seed: u64) -> Result<SimOutput> {
        self.validate(theta)?;
        let (a0, a1, b1, delta, s0, s1) = (
            theta[0], theta[1], theta[2], theta[3], theta[4], theta[5],
        );
        let mut rng = Rng::new(seed);
        let mut h = a0 / (1.0 - a1 - b1);
        let mut beta0 = self.sim_beta[0];
        let mut beta1 = self.sim_beta[1];
        let mut y_prev = 0.0;
        let mut y0 = DVector::zeros(1);
        let mut ys = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n + 1);
        let mut alphas = Vec::with_capacity(n);
        for k in 0..=n {
            let mu = beta0 + beta1 * y_prev + delta * h;
            let eps = h.sqrt() * rng.normal();
            let y_k = mu + eps;
            if k == 0 {
                y0[0] = y_k;
            } else {
                ys.push(DVector::from_element(1, y_k));
                alphas.push(DVector::from_vec(vec![h, beta0, beta1]));
            }
            xs.push(DVector::from_vec(vec![1.0, eps * eps]));
            h = a0 + a1 * eps * eps + b1 * h;
            beta0 += s0 * rng.normal();
            beta1 += s1 * rng.normal();
            y_prev = y_k;
        }
        Ok(SimOutput {
            y0,
            y: ys,
            x: xs,
            alpha: alphas,
        })
    }
}

// ---------------------------------------------------------------------------
// Fixed (non-parameterized) model loadable from a key-value config
// ---------------------------------------------------------------------------

/// A constant-matrix model loaded from a plain-text `key = value` config.
///
/// Schema (matrix literals are row-major, whitespace-separated):
/// `kind` (`lti` | `pairwise`), `n`, `m`, `d`, `T`, `Z`, `B`, `beta`, `Q`,
/// `H`, `S`, `alpha0`, `Pi0`, optional `u_minus1`. Omitted matrices default
/// to zero; `theta` has dimension 0.
#[derive(Debug, Clone)]
pub struct FixedModel {
    pub kind: ModelKind,
    pub dims: Dims,
    pub raw: RawMatrices,
    pub alpha0: DVector<f64>,
    pub pi0: DMatrix<f64>,
    pub u_minus1: DVector<f64>,
}

impl FixedModel {
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::DegenerateData(format!("config line {}: expected key = value", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get_usize = |k: &str| -> Result<usize> {
            map.get(k)
                .ok_or_else(|| Error::DegenerateData(format!("config missing key '{k}'")))?
                .parse()
                .map_err(|_| Error::DegenerateData(format!("config key '{k}' is not an integer")))
        };
        let n = get_usize("n")?;
        let m = get_usize("m")?;
        let d = get_usize("d")?;
        let kind = match map.get("kind").map(|s| s.as_str()) {
            Some("lti") | None => ModelKind::LtiMimo,
            Some("pairwise") => ModelKind::Pairwise,
            Some(other) => {
                return Err(Error::DegenerateData(format!("unknown model kind '{other}'")))
            }
        };
        if kind == ModelKind::Pairwise && d != m {
            return Err(Error::DimensionMismatch(
                "pairwise models require d = m (regressor is y_{k-1})".into(),
            ));
        }
        let parse_nums = |k: &str| -> Result<Vec<f64>> {
            map[k]
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::DegenerateData(format!("bad number in '{k}'")))
                })
                .collect()
        };
        let mat = |k: &str, r: usize, c: usize| -> Result<DMatrix<f64>> {
            if !map.contains_key(k) {
                return Ok(DMatrix::zeros(r, c));
            }
            let v = parse_nums(k)?;
            if v.len() != r * c {
                return Err(Error::DimensionMismatch(format!(
                    "'{k}' has {} entries, expected {}",
                    v.len(),
                    r * c
                )));
            }
            Ok(DMatrix::from_row_slice(r, c, &v))
        };
        let vec = |k: &str, len: usize| -> Result<DVector<f64>> {
            if !map.contains_key(k) {
                return Ok(DVector::zeros(len));
            }
            let v = parse_nums(k)?;
            if v.len() != len {
                return Err(Error::DimensionMismatch(format!(
                    "'{k}' has {} entries, expected {len}",
                    v.len()
                )));
            }
            Ok(DVector::from_vec(v))
        };
        Ok(FixedModel {
            kind,
            dims: Dims { n, m, d },
            raw: RawMatrices {
                t: mat("T", n, n)?,
                z: mat("Z", m, n)?,
                b: mat("B", n, d)?,
                beta: mat("beta", m, d)?,
                q: mat("Q", n, n)?,
                h: mat("H", m, m)?,
                s: mat("S", n, m)?,
            },
            alpha0: vec("alpha0", n)?,
            pi0: mat("Pi0", n, n)?,
            u_minus1: vec("u_minus1", d)?,
        })
    }
}

impl Model for FixedModel {
    fn kind(&self) -> ModelKind {
        self.kind
    }
    fn dims(&self) -> Dims {
        self.dims
    }
    fn theta_dim(&self) -> usize {
        0
    }
    fn alpha0_mean(&self, _theta: &DVector<f64>) -> DVector<f64> {
        self.alpha0.clone()
    }
    fn pi0(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.pi0.clone()
    }
    fn matrices_at(&self, _theta: &DVector<f64>, _ctx: &FilterContext) -> Result<RawMatrices> {
        Ok(self.raw.clone())
    }
    fn derivatives_at(
        &self,
        _theta: &DVector<f64>,
        _i: usize,
        _ctx: &FilterContext,
    ) -> RawDerivatives {
        RawDerivatives::zeros(self.dims)
    }
    fn u_minus1(&self) -> DVector<f64> {
        self.u_minus1.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bars_reduce_to_raw_when_s_zero() {
        let model = Example1Model::new(1.0).unwrap();
        let theta = DVector::from_element(1, 3.0);
        let y = DVector::zeros(2);
        let ctx = FilterContext::pre_update(1, &y, &y);
        let raw = model.matrices_at(&theta, &ctx).unwrap();
        let mats = precompute_bars(raw, DEFAULT_EPS).unwrap();
        assert_eq!(mats.t_bar, mats.raw.t);
        assert_eq!(mats.b_bar, mats.raw.b);
        assert_eq!(mats.q_bar, mats.raw.q);
    }

    #[test]
    fn bars_with_cross_correlation_match_dense_oracle() {
        let mut rng = Rng::new(3);
        let n = 3;
        let m = 2;
        let t = DMatrix::from_fn(n, n, |_, _| rng.normal() * 0.3);
        let z = DMatrix::from_fn(m, n, |_, _| rng.normal());
        let a = DMatrix::from_fn(m, m, |_, _| rng.normal());
        let h = &a * a.transpose() + DMatrix::identity(m, m);
        let s = DMatrix::from_fn(n, m, |_, _| rng.normal() * 0.2);
        let qa = DMatrix::from_fn(n, n, |_, _| rng.normal());
        // Joint covariance [[Q, S], [S^T, H]] must be PSD: build Q large enough.
        let q = &qa * qa.transpose() + DMatrix::identity(n, n) * 2.0;
        let raw = RawMatrices {
            t: t.clone(),
            z: z.clone(),
            b: DMatrix::zeros(n, 1),
            beta: DMatrix::zeros(m, 1),
            q: q.clone(),
            h: h.clone(),
            s: s.clone(),
        };
        let mats = precompute_bars(raw, DEFAULT_EPS).unwrap();
        let h_inv = h.clone().try_inverse().unwrap();
        let t_bar = &t - &s * &h_inv * &z;
        let q_bar = &q - &s * &h_inv * s.transpose();
        assert!((mats.t_bar.clone() - t_bar).amax() < 1e-12);
        assert!((mats.q_bar.clone() - q_bar).amax() < 1e-12);
        assert_abs_diff_eq!(
            (mats.q_bar.clone() - mats.q_bar.transpose()).amax(),
            0.0,
            epsilon = 0.0
        );
    }

    #[test]
    fn example1_reference_values() {
        let model = Example1Model::new(1.0).unwrap();
        let theta = DVector::from_element(1, 3.0);
        let y = DVector::zeros(2);
        let ctx = FilterContext::pre_update(1, &y, &y);
        let raw = model.matrices_at(&theta, &ctx).unwrap();
        assert_eq!(raw.h, DMatrix::identity(2, 2) * 9.0);
        assert_eq!(model.pi0(&theta), DMatrix::identity(4, 4) * 9.0);
        let d = model.derivatives_at(&theta, 0, &ctx);
        assert_eq!(d.dh, DMatrix::identity(2, 2) * 6.0);

        let tiny = Example1Model::new(1e-5).unwrap();
        let raw = tiny.matrices_at(&theta, &ctx).unwrap();
        assert_abs_diff_eq!(raw.h[(0, 0)], 9e-10, epsilon = 1e-24);
        assert!(Example1Model::new(0.0).is_err());
    }

    #[test]
    fn tee_z_row_reference_values() {
        let model = TeeModel::with_presample(1.0, 0.0, 0.0);
        let theta = DVector::from_vec(vec![0.1, 0.1, 0.8, 0.1, 0.01, 0.01]);
        let y = DVector::from_element(1, 0.5);
        let y_prev = DVector::from_element(1, 2.0);
        let ctx = FilterContext::pre_update(1, &y, &y_prev);
        let raw = model.matrices_at(&theta, &ctx).unwrap();
        assert_eq!(raw.z, DMatrix::from_row_slice(1, 3, &[0.1, 1.0, 2.0]));
    }

    #[test]
    fn tee_rejects_nonstationary() {
        let model = TeeModel::with_presample(1.0, 0.0, 0.0);
        let theta = DVector::from_vec(vec![0.1, 0.5, 0.5, 0.0, 0.0, 0.0]);
        assert!(matches!(
            model.validate(&theta),
            Err(Error::NonStationary(_))
        ));
    }

    #[test]
    fn derivatives_match_finite_differences_example1() {
        let model = Example1Model::new(0.3).unwrap();
        check_model_derivatives(&model, &DVector::from_element(1, 2.0));
    }

    #[test]
    fn derivatives_match_finite_differences_tee() {
        let model = TeeModel::with_presample(1.3, 0.2, 0.1);
        let theta = DVector::from_vec(vec![0.2, 0.15, 0.7, 0.3, 0.4, 0.25]);
        check_model_derivatives(&model, &theta);
    }

    /// Central-difference check of `derivatives_at` against `matrices_at`
    /// with the context held fixed (direct partials only).
    fn check_model_derivatives<M: Model>(model: &M, theta: &DVector<f64>) {
        let m = model.dims().m;
        let y = DVector::from_element(m, 0.7);
        let y_prev = DVector::from_element(m, -0.4);
        let alpha_pred = DVector::from_fn(model.dims().n, |i, _| 0.5 + i as f64 * 0.3);
        let ctx = FilterContext {
            k: 2,
            y: &y,
            y_prev: &y_prev,
            alpha_pred: Some(&alpha_pred),
            d_alpha_pred: None,
        };
        for i in 0..model.theta_dim() {
            let h = 1e-6 * theta[i].abs().max(1.0);
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let rp = model.matrices_at(&tp, &ctx).unwrap();
            let rm = model.matrices_at(&tm, &ctx).unwrap();
            let d = model.derivatives_at(theta, i, &ctx);
            let pairs: [(&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>); 7] = [
                (&rp.t, &rm.t, &d.dt),
                (&rp.z, &rm.z, &d.dz),
                (&rp.b, &rm.b, &d.db),
                (&rp.beta, &rm.beta, &d.dbeta),
                (&rp.q, &rm.q, &d.dq),
                (&rp.h, &rm.h, &d.dh),
                (&rp.s, &rm.s, &d.ds),
            ];
            for (p, mns, an) in pairs {
                let fd = (p - mns) / (2.0 * h);
                let scale = an.amax().max(1.0);
                assert!(
                    (fd - an).amax() < 1e-5 * scale,
                    "derivative mismatch for parameter {i}"
                );
            }
        }
    }

    #[test]
    fn fixed_model_config_roundtrip() {
        let text = "
            kind = lti
            n = 2
            m = 1
            d = 1
            T = 1 0.5  0 0.9
            Z = 1 0
            Q = 0.1 0  0 0.1
            H = 0.5
            alpha0 = 0 0
            Pi0 = 1 0  0 1
        ";
        let model = FixedModel::from_config_str(text).unwrap();
        assert_eq!(model.dims(), Dims { n: 2, m: 1, d: 1 });
        assert_eq!(model.raw.t[(0, 1)], 0.5);
        assert_eq!(model.raw.b, DMatrix::zeros(2, 1));
        assert!(FixedModel::from_config_str("n = 2").is_err());
    }
}
