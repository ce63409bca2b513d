//! Comparator estimators: inverse-probability-weighted likelihood on the
//! phase-II rows, and the full-data MLE that is only available in
//! simulation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::logistic::{expit, fit_logistic, FitOptions, LogisticFit};
use crate::model::DesignMatrix;
use crate::moments::MomentContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    WeightedLikelihood,
    Oracle,
}

#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub method: BaselineMethod,
}

fn wl_inputs(ctx: &MomentContext) -> Result<(Vec<u8>, DesignMatrix, Vec<f64>)> {
    let y: Vec<u8> = ctx.y_selected().iter().map(|&v| v as u8).collect();
    let x = DesignMatrix::new(ctx.x_selected().clone(), ctx.x_names().to_vec())?;
    let w: Vec<f64> = ctx.pi_selected().iter().map(|p| 1.0 / p).collect();
    Ok((y, x, w))
}

fn wl_fit(ctx: &MomentContext) -> Result<(LogisticFit, Vec<u8>, DesignMatrix, Vec<f64>)> {
    let (y, x, w) = wl_inputs(ctx)?;
    let fit = fit_logistic(&y, &x, None, Some(&w), &FitOptions::default())?;
    Ok((fit, y, x, w))
}

pub(crate) fn wl_coefficients(ctx: &MomentContext) -> Result<DVector<f64>> {
    Ok(wl_fit(ctx)?.0.coef)
}

/// Logistic fit with weights `1/pi` and the robust sandwich
/// `A^-1 B A^-1`, `A = sum w h' x x'`, `B = sum w^2 (y - p)^2 x x'`.
pub fn fit_wl(ctx: &MomentContext) -> Result<BaselineFit> {
    let (fit, y, x, w) = wl_fit(ctx)?;
    let xm = x.matrix();
    let eta = xm * &fit.coef;
    let scores = DMatrix::from_fn(xm.nrows(), xm.ncols(), |i, j| {
        w[i] * (f64::from(y[i]) - expit(eta[i])) * xm[(i, j)]
    });
    let meat = scores.transpose() * &scores;
    let cov = linalg::symmetrize(&(&fit.cov * meat * &fit.cov));
    let se = cov.diagonal().map(|v| v.max(0.0).sqrt());
    if se.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput(
            "weighted-likelihood standard error is not positive".into(),
        ));
    }
    Ok(BaselineFit {
        coef: fit.coef,
        se,
        cov,
        method: BaselineMethod::WeightedLikelihood,
    })
}

/// Ordinary MLE on all phase-I subjects with the extended covariates.
pub fn fit_oracle(y: &[u8], x: &DesignMatrix) -> Result<BaselineFit> {
    let fit = fit_logistic(y, x, None, None, &FitOptions::default())?;
    Ok(BaselineFit {
        se: fit.se(),
        coef: fit.coef,
        cov: fit.cov,
        method: BaselineMethod::Oracle,
    })
}
