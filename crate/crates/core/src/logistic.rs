//! Logistic link and weighted maximum likelihood with per-row offsets.
//!
//! Used for the phase-I reduced model, the weighted-likelihood baseline and
//! the full-data oracle. Newton-Raphson with step halving on the deviance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::DesignMatrix;

/// Inverse logit, branching on sign so that `exp` never overflows.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`expit`].
pub fn expit_prime(eta: f64) -> f64 {
    let p = expit(eta);
    let q = expit(-eta);
    p * q
}

/// Second derivative `h'(eta) (1 - 2 h(eta))`.
pub fn expit_second(eta: f64) -> f64 {
    let p = expit(eta);
    let q = expit(-eta);
    p * q * (q - p)
}

/// `ln(1 + e^eta)` without overflow.
pub fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Bound on the max-abs weighted-mean score.
    pub tol: f64,
    pub max_iter: usize,
    /// |coef| beyond this is treated as separation.
    pub divergence_bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-10,
            max_iter: 100,
            divergence_bound: 30.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    /// Inverse of `information`.
    pub cov: DMatrix<f64>,
    /// Sum over rows of `w h'(eta) x x'`.
    pub information: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
}

impl LogisticFit {
    pub fn se(&self) -> DVector<f64> {
        self.cov.diagonal().map(f64::sqrt)
    }
}

struct Eval {
    loglik: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

fn evaluate(
    y: &[u8],
    x: &DMatrix<f64>,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
    coef: &DVector<f64>,
    with_information: bool,
) -> Eval {
    let p = x.ncols();
    let eta = x * coef;
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut resid = DVector::zeros(x.nrows());
    let mut hw = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let e = eta[i] + offset.map_or(0.0, |o| o[i]);
        let yi = f64::from(y[i]);
        loglik += w * (yi * e - log1p_exp(e));
        resid[i] = w * (yi - expit(e));
        hw[i] = w * expit_prime(e);
    }
    score.gemv_tr(1.0, x, &resid, 0.0);
    let information = if with_information {
        let scaled = DMatrix::from_fn(x.nrows(), p, |i, j| x[(i, j)] * hw[i]);
        linalg::symmetrize(&(x.transpose() * scaled))
    } else {
        DMatrix::zeros(0, 0)
    };
    Eval {
        loglik,
        score,
        information,
    }
}

fn validate(
    y: &[u8],
    x: &DesignMatrix,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
) -> Result<()> {
    let n = x.nrows();
    let check_len = |what: &'static str, len: usize| {
        if len == n {
            Ok(())
        } else {
            Err(Error::Dimension {
                what,
                expected: n,
                found: len,
            })
        }
    };
    check_len("outcome", y.len())?;
    if let Some(o) = offset {
        check_len("offset", o.len())?;
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("offset has non-finite entries".into()));
        }
    }
    if let Some(w) = weights {
        check_len("weights", w.len())?;
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("outcome must be 0/1".into()));
    }
    Ok(())
}

/// Maximize the weighted log-likelihood `sum w (y eta - log(1 + e^eta))`
/// with `eta = offset + x'coef`.
pub fn fit_logistic(
    y: &[u8],
    x: &DesignMatrix,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<LogisticFit> {
    validate(y, x, offset, weights)?;
    x.check_full_rank(weights, "logistic design")?;

    let active = |i: usize| weights.is_none_or(|w| w[i] > 0.0);
    let has_case = (0..y.len()).any(|i| active(i) && y[i] == 1);
    let has_control = (0..y.len()).any(|i| active(i) && y[i] == 0);
    if !(has_case && has_control) {
        return Err(Error::DegenerateOutcome);
    }
    let total_weight: f64 = weights.map_or(y.len() as f64, |w| w.iter().sum());

    let xm = x.matrix();
    let mut coef = DVector::zeros(x.ncols());
    let mut current = evaluate(y, xm, offset, weights, &coef, true);
    let mut criterion = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let step = linalg::spd_solve(&current.information, &current.score).ok_or_else(|| {
            Error::RankDeficient {
                what: "logistic information".into(),
            }
        })?;
        criterion = linalg::max_abs_vec(&current.score) / total_weight;
        let step_size = linalg::max_abs_vec(&step);
        if criterion < opts.tol && step_size < 1e-6 * (1.0 + linalg::max_abs_vec(&coef)) {
            return finish(coef, current, iter, true);
        }

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let trial = &coef + &step * scale;
            let eval = evaluate(y, xm, offset, weights, &trial, false);
            // Near the optimum the gain is below summation roundoff.
            if eval.loglik >= current.loglik - 1e-12 * (1.0 + current.loglik.abs()) {
                accepted = Some(trial);
                break;
            }
            scale *= 0.5;
        }
        // No ascent direction left at working precision.
        let Some(next) = accepted else {
            if criterion < opts.tol {
                return finish(coef, current, iter, true);
            }
            return Err(Error::NonConvergence {
                what: "logistic line search",
                iterations: iter,
                criterion,
            });
        };
        coef = next;
        let max_abs = linalg::max_abs_vec(&coef);
        if max_abs > opts.divergence_bound {
            return Err(Error::Separation {
                max_abs_coef: max_abs,
                bound: opts.divergence_bound,
            });
        }
        current = evaluate(y, xm, offset, weights, &coef, true);
    }
    Err(Error::NonConvergence {
        what: "logistic Newton-Raphson",
        iterations: opts.max_iter,
        criterion,
    })
}

fn finish(
    coef: DVector<f64>,
    eval: Eval,
    iterations: usize,
    converged: bool,
) -> Result<LogisticFit> {
    let cov = linalg::spd_inverse(&eval.information).ok_or_else(|| Error::RankDeficient {
        what: "logistic information".into(),
    })?;
    Ok(LogisticFit {
        coef,
        cov,
        information: eval.information,
        converged,
        iterations,
        loglik: eval.loglik,
    })
}

/// Weighted score `sum w (y - expit(offset + x'coef)) x` at `coef`.
pub fn score(
    y: &[u8],
    x: &DesignMatrix,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
    coef: &DVector<f64>,
) -> DVector<f64> {
    evaluate(y, x.matrix(), offset, weights, coef, false).score
}

/// Weighted log-likelihood at `coef`.
pub fn loglik(
    y: &[u8],
    x: &DesignMatrix,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
    coef: &DVector<f64>,
) -> f64 {
    evaluate(y, x.matrix(), offset, weights, coef, false).loglik
}
