//! Shared filter plumbing: the observation/regressor container and the
//! regressor wiring for the two model families.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{FilterContext, Model, ModelKind, SimOutput};

/// Observations and regressors consumed by a filter run.
///
/// `y` holds `y_1..y_N`; `y0` is the pre-sample observation referenced by
/// the recursion at k = 1 (defaults to zero). For the LTI MIMO family `x`
/// holds the exogenous regressors `x_0..x_N`; the pairwise family wires
/// `y_{k-1}` instead and ignores `x`.
#[derive(Debug, Clone)]
pub struct FilterData {
    pub y: Vec<DVector<f64>>,
    pub x: Option<Vec<DVector<f64>>>,
    pub y0: Option<DVector<f64>>,
}

impl FilterData {
    pub fn from_sim(sim: &SimOutput) -> Self {
        FilterData {
            y: sim.y.clone(),
            x: Some(sim.x.clone()),
            y0: Some(sim.y0.clone()),
        }
    }

    pub fn observations_only(y: Vec<DVector<f64>>) -> Self {
        FilterData { y, x: None, y0: None }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Resolves the regressor sequence wiring for a model/data pair.
pub(crate) struct Regressors<'a> {
    model: &'a dyn Model,
    data: &'a FilterData,
    pub y0: DVector<f64>,
}

impl<'a> Regressors<'a> {
    pub fn new(model: &'a dyn Model, data: &'a FilterData) -> Result<Self> {
        let dims = model.dims();
        if data.y.is_empty() {
            return Err(Error::DegenerateData("empty observation sequence".into()));
        }
        for (k, y) in data.y.iter().enumerate() {
            if y.len() != dims.m {
                return Err(Error::DimensionMismatch(format!(
                    "y[{k}] has length {}, expected {}",
                    y.len(),
                    dims.m
                )));
            }
        }
        if model.kind() == ModelKind::Pairwise && dims.d != dims.m {
            return Err(Error::DimensionMismatch(
                "pairwise models require d = m".into(),
            ));
        }
        let y0 = data
            .y0
            .clone()
            .unwrap_or_else(|| DVector::zeros(dims.m));
        Ok(Regressors { model, data, y0 })
    }

    /// `y_{k-1}` for measurement step k (1-based).
    pub fn y_prev(&self, k: usize) -> &DVector<f64> {
        if k == 1 {
            &self.y0
        } else {
            &self.data.y[k - 2]
        }
    }

    /// The regressor `u_0` in effect before the first measurement.
    pub fn initial(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self.model.kind() {
            ModelKind::Pairwise => self.model.u_minus1(),
            ModelKind::LtiMimo => {
                if self.model.regressor(theta, &dummy_ctx(&self.y0)).is_some() {
                    self.model.initial_regressor(theta, &self.y0)
                } else {
                    match &self.data.x {
                        Some(xs) => xs[0].clone(),
                        None => DVector::zeros(self.model.dims().d),
                    }
                }
            }
        }
    }

    pub fn d_initial(&self, theta: &DVector<f64>, i: usize) -> DVector<f64> {
        match self.model.kind() {
            ModelKind::Pairwise => DVector::zeros(self.model.dims().d),
            ModelKind::LtiMimo => {
                if self.model.regressor(theta, &dummy_ctx(&self.y0)).is_some() {
                    self.model.d_initial_regressor(theta, i, &self.y0)
                } else {
                    DVector::zeros(self.model.dims().d)
                }
            }
        }
    }

    /// The regressor `u_k` at measurement step k, resolved after the time
    /// update (so self-exciting models can use the a-priori state in `ctx`).
    pub fn at_step(&self, theta: &DVector<f64>, k: usize, ctx: &FilterContext) -> DVector<f64> {
        match self.model.kind() {
            ModelKind::Pairwise => self.y_prev(k).clone(),
            ModelKind::LtiMimo => {
                if let Some(u) = self.model.regressor(theta, ctx) {
                    u
                } else {
                    match &self.data.x {
                        Some(xs) => xs[k].clone(),
                        None => DVector::zeros(self.model.dims().d),
                    }
                }
            }
        }
    }

    pub fn d_at_step(
        &self,
        theta: &DVector<f64>,
        i: usize,
        k: usize,
        ctx: &FilterContext,
    ) -> DVector<f64> {
        let _ = k;
        match self.model.kind() {
            ModelKind::Pairwise => DVector::zeros(self.model.dims().d),
            ModelKind::LtiMimo => self
                .model
                .d_regressor(theta, i, ctx)
                .unwrap_or_else(|| DVector::zeros(self.model.dims().d)),
        }
    }
}

fn dummy_ctx(y0: &DVector<f64>) -> FilterContext<'_> {
    FilterContext::pre_update(1, y0, y0)
}
