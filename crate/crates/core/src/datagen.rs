//! Correlated mixed-type covariates by thresholding a latent multivariate
//! normal, and Bernoulli outcomes from a logistic model.
//!
//! Each pair's latent correlation is calibrated so that the correlation
//! *after* thresholding hits the target. For two discretized variables with
//! thresholds `a_k`, `b_l` the induced covariance is
//!
//! ```text
//! cov(r) = sum_k sum_l  integral_0^r phi2(a_k, b_l; rho) d rho
//! ```
//!
//! evaluated with 64-point Gauss-Legendre; a discretized variable against a
//! standard normal one has `cov(r) = r sum_k phi(a_k)`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::logistic::expit;
use crate::model::{DesignMatrix, Frame, ModelSpec};
use crate::normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Marginal {
    /// `Pr(X = 1) = p`.
    Binary { p: f64 },
    /// Probabilities of levels `0, 1, ...`; if they sum to less than one the
    /// remainder is an extra top level.
    Ordinal { probs: Vec<f64> },
    /// Standard normal, used untransformed.
    Continuous,
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        match self {
            Marginal::Binary { p } if !(*p > 0.0 && *p < 1.0) => Err(Error::InvalidInput(format!(
                "binary probability {p} outside (0, 1)"
            ))),
            Marginal::Ordinal { probs } => {
                let sum: f64 = probs.iter().sum();
                if probs.is_empty()
                    || probs.iter().any(|p| !(*p > 0.0 && *p < 1.0))
                    || sum > 1.0 + 1e-12
                {
                    Err(Error::InvalidInput(format!(
                        "invalid ordinal probabilities {probs:?}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Probabilities of every level, the implied top level included.
    pub fn level_probs(&self) -> Vec<f64> {
        match self {
            Marginal::Binary { p } => vec![1.0 - p, *p],
            Marginal::Ordinal { probs } => {
                let mut out = probs.clone();
                let rest = 1.0 - probs.iter().sum::<f64>();
                if rest > 1e-12 {
                    out.push(rest);
                }
                out
            }
            Marginal::Continuous => Vec::new(),
        }
    }

    /// Latent cut points; the variable's value is the number exceeded.
    pub fn thresholds(&self) -> Vec<f64> {
        let probs = self.level_probs();
        let mut cum = 0.0;
        probs
            .iter()
            .take(probs.len().saturating_sub(1))
            .map(|p| {
                cum += p;
                normal::quantile(cum)
            })
            .collect()
    }

    fn is_continuous(&self) -> bool {
        matches!(self, Marginal::Continuous)
    }

    fn std_dev(&self) -> f64 {
        match self {
            Marginal::Continuous => 1.0,
            _ => {
                let probs = self.level_probs();
                let mean: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
                let second: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (k * k) as f64 * p)
                    .sum();
                (second - mean * mean).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(flatten)]
    pub marginal: Marginal,
    /// Ordinal variables also emit dummies `<prefix>1 .. <prefix>K-1`;
    /// defaults to `<name>_`.
    #[serde(default)]
    pub dummy_prefix: Option<String>,
}

impl VariableSpec {
    pub fn new(name: &str, marginal: Marginal) -> Self {
        VariableSpec {
            name: name.to_string(),
            marginal,
            dummy_prefix: None,
        }
    }

    fn dummy_names(&self) -> Vec<String> {
        match &self.marginal {
            Marginal::Ordinal { .. } => {
                let prefix = self
                    .dummy_prefix
                    .clone()
                    .unwrap_or_else(|| format!("{}_", self.name));
                (1..self.marginal.level_probs().len())
                    .map(|k| format!("{prefix}{k}"))
                    .collect()
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpec {
    pub variables: Vec<VariableSpec>,
    pub target_corr: DMatrix<f64>,
}

impl CovariateSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.variables.len();
        if self.target_corr.shape() != (k, k) {
            return Err(Error::Dimension {
                what: "target correlation",
                expected: k,
                found: self.target_corr.nrows(),
            });
        }
        for v in &self.variables {
            v.marginal.validate()?;
        }
        if !linalg::is_symmetric(&self.target_corr, 1e-12) {
            return Err(Error::InvalidInput(
                "target correlation is not symmetric".into(),
            ));
        }
        for i in 0..k {
            if (self.target_corr[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(
                    "target correlation needs a unit diagonal".into(),
                ));
            }
        }
        if linalg::sym_eigen(&self.target_corr)
            .eigenvalues
            .iter()
            .any(|&v| v < -1e-10)
        {
            return Err(Error::InvalidInput(
                "target correlation is not positive semidefinite".into(),
            ));
        }
        Ok(())
    }
}

/// 64-point Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre_64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(64))
}

pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            deriv = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / deriv;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn bivariate_integral(a: f64, b: f64, r: f64) -> f64 {
    let (nodes, weights) = gauss_legendre_64();
    let half = 0.5 * r;
    nodes
        .iter()
        .zip(weights)
        .map(|(t, w)| w * normal::bivariate_pdf(a, b, half * (t + 1.0)))
        .sum::<f64>()
        * half
}

/// Correlation after thresholding two latent normals with correlation `r`.
pub fn induced_correlation(first: &Marginal, second: &Marginal, r: f64) -> f64 {
    match (first.is_continuous(), second.is_continuous()) {
        (true, true) => r,
        (false, true) | (true, false) => {
            let discrete = if first.is_continuous() { second } else { first };
            let slope: f64 = discrete.thresholds().iter().map(|&a| normal::pdf(a)).sum();
            r * slope / discrete.std_dev()
        }
        (false, false) => {
            let ta = first.thresholds();
            let tb = second.thresholds();
            let cov: f64 = ta
                .iter()
                .flat_map(|&a| tb.iter().map(move |&b| bivariate_integral(a, b, r)))
                .sum();
            cov / (first.std_dev() * second.std_dev())
        }
    }
}

/// Latent correlation reproducing `target` for one pair.
pub fn calibrate_pair(first: &Marginal, second: &Marginal, target: f64, tol: f64) -> Option<f64> {
    if target == 0.0 {
        return Some(0.0);
    }
    if first.is_continuous() && second.is_continuous() {
        return (target.abs() < 1.0).then_some(target);
    }
    let g = |r: f64| induced_correlation(first, second, r) - target;
    let edge = 1.0 - 1e-9;
    let (mut lo, mut hi) = (-edge, edge);
    if g(lo) > tol || g(hi) < -tol {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let r = 0.5 * (lo + hi);
    (g(r).abs() <= tol).then_some(r)
}

#[derive(Debug, Clone)]
pub struct LatentCorrelation {
    pub matrix: DMatrix<f64>,
    /// Lower Cholesky factor of `matrix`.
    pub factor: DMatrix<f64>,
    /// Frobenius distance moved by eigenvalue clipping, if it was needed.
    pub repaired: Option<f64>,
}

pub fn calibrate_latent_corr(spec: &CovariateSpec, tol: f64) -> Result<LatentCorrelation> {
    spec.validate()?;
    let k = spec.variables.len();
    let mut m = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let target = spec.target_corr[(i, j)];
            let r = calibrate_pair(
                &spec.variables[i].marginal,
                &spec.variables[j].marginal,
                target,
                tol,
            )
            .ok_or(Error::UnattainableCorrelation {
                first: i,
                second: j,
                target,
            })?;
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    let mut repaired = None;
    let min_eig = linalg::sym_eigen(&m).eigenvalues.min();
    if min_eig < 1e-8 {
        let (fixed, dist) = linalg::nearest_correlation_by_clipping(&m, 1e-8);
        log::warn!("latent correlation not positive definite (min eigenvalue {min_eig:.3e}); clipped, Frobenius distance {dist:.3e}");
        m = fixed;
        repaired = Some(dist);
    }
    let factor = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| Error::InvalidInput("latent correlation has no Cholesky factor".into()))?
        .l();
    Ok(LatentCorrelation {
        matrix: m,
        factor,
        repaired,
    })
}

/// Spec plus its calibrated latent structure, ready for sampling.
#[derive(Debug, Clone)]
pub struct CovariateGenerator {
    spec: CovariateSpec,
    latent: LatentCorrelation,
    thresholds: Vec<Vec<f64>>,
}

impl CovariateGenerator {
    pub fn new(spec: CovariateSpec, tol: f64) -> Result<Self> {
        let latent = calibrate_latent_corr(&spec, tol)?;
        let thresholds = spec
            .variables
            .iter()
            .map(|v| v.marginal.thresholds())
            .collect();
        Ok(CovariateGenerator {
            spec,
            latent,
            thresholds,
        })
    }

    pub fn latent(&self) -> &LatentCorrelation {
        &self.latent
    }

    pub fn spec(&self) -> &CovariateSpec {
        &self.spec
    }

    /// Column names produced by [`Self::generate`].
    pub fn column_names(&self) -> Vec<String> {
        self.spec
            .variables
            .iter()
            .flat_map(|v| std::iter::once(v.name.clone()).chain(v.dummy_names()))
            .collect()
    }

    /// `n` rows: one column per variable plus dummies for ordinal levels
    /// above the reference level 0.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Frame {
        let k = self.spec.variables.len();
        let mut raw = vec![vec![0.0; n]; k];
        let mut e = DVector::zeros(k);
        for i in 0..n {
            for v in e.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let latent = &self.latent.factor * &e;
            for j in 0..k {
                raw[j][i] = if self.spec.variables[j].marginal.is_continuous() {
                    latent[j]
                } else {
                    self.thresholds[j]
                        .iter()
                        .filter(|&&t| latent[j] > t)
                        .count() as f64
                };
            }
        }
        let mut frame = Frame::new(n);
        for (var, values) in self.spec.variables.iter().zip(raw) {
            let dummies: Vec<(String, Vec<f64>)> = var
                .dummy_names()
                .into_iter()
                .enumerate()
                .map(|(k, name)| {
                    let level = (k + 1) as f64;
                    (
                        name,
                        values
                            .iter()
                            .map(|&v| f64::from(u8::from(v == level)))
                            .collect(),
                    )
                })
                .collect();
            frame.push(var.name.clone(), values).expect("fresh frame");
            for (name, col) in dummies {
                frame.push(name, col).expect("fresh frame");
            }
        }
        frame
    }
}

/// Extended-model terms and true coefficients (intercept first).
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSpec {
    pub model: ModelSpec,
    pub beta: DVector<f64>,
}

impl OutcomeSpec {
    pub fn new(model: ModelSpec, beta: DVector<f64>) -> Result<Self> {
        if beta.len() != model.ncols() {
            return Err(Error::Dimension {
                what: "true coefficients",
                expected: model.ncols(),
                found: beta.len(),
            });
        }
        Ok(OutcomeSpec { model, beta })
    }
}

/// Independent Bernoulli draws with `Pr(y = 1) = expit(x'beta)`.
pub fn gen_outcomes<R: Rng + ?Sized>(
    x: &DesignMatrix,
    beta: &DVector<f64>,
    rng: &mut R,
) -> Vec<u8> {
    let eta = x.matrix() * beta;
    eta.iter()
        .map(|&e| {
            let p = expit(e);
            u8::from(rng.random::<f64>() < p)
        })
        .collect()
}

/// Correlated-covariate population with a logistic outcome and a list of
/// columns that are only measured at phase II.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub covariates: CovariateSpec,
    pub outcome: OutcomeSpec,
    pub phase_two_only: Vec<String>,
    pub parameter_labels: Vec<String>,
}

/// Terms of the extended model in the NWTS-like scenario.
pub const NWTS_FULL_MODEL: &str =
    "X2 + D1 + D2 + D3 + X4 + D1:X2 + D2:X2 + D3:X2 + X2:X4 + D1:X4 + D2:X4 + D3:X4";
/// Main-effects reduced model on phase-I covariates.
pub const NWTS_M1: &str = "X1 + D1 + D2 + D3 + X4";
/// Reduced model with interactions on phase-I covariates.
pub const NWTS_M2: &str =
    "X1 + D1 + D2 + D3 + X4 + X1:D1 + X1:D2 + X1:D3 + X1:X4 + D1:X4 + D2:X4 + D3:X4";

impl Scenario {
    /// Four NWTS-like covariates: X1 institutional
    /// histology, X2 central histology, X3 stage (dummies D1..D3), X4 age.
    ///
    /// Histology is coded 1 = unfavorable, so the favorable level 0 has
    /// probability .90 (X1) and .89 (X2). With this coding the coefficients
    /// give a prevalence near 6%.
    pub fn nwts() -> Self {
        let (r12, r13, r14, r23, r24, r34) = (0.73, 0.13, -0.01, 0.09, 0.01, 0.27);
        let corr = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, r12, r13, r14, //
                r12, 1.0, r23, r24, //
                r13, r23, 1.0, r34, //
                r14, r24, r34, 1.0,
            ],
        );
        let mut x3 = VariableSpec::new(
            "X3",
            Marginal::Ordinal {
                probs: vec![0.39, 0.26, 0.23],
            },
        );
        x3.dummy_prefix = Some("D".into());
        let covariates = CovariateSpec {
            variables: vec![
                VariableSpec::new("X1", Marginal::Binary { p: 0.10 }),
                VariableSpec::new("X2", Marginal::Binary { p: 0.11 }),
                x3,
                VariableSpec::new("X4", Marginal::Continuous),
            ],
            target_corr: corr,
        };
        let beta = DVector::from_vec(vec![
            -3.6, 1.16, 0.60, 0.46, 0.81, 0.22, 0.44, 1.03, 1.63, -0.67, 0.20, 0.33, 0.06,
        ]);
        let outcome = OutcomeSpec::new(
            ModelSpec::parse(NWTS_FULL_MODEL).expect("static model"),
            beta,
        )
        .expect("static coefficients");
        let parameter_labels = [
            "beta0", "beta1", "beta2A", "beta2B", "beta2C", "beta3", "beta4A", "beta4B", "beta4C",
            "beta5", "beta6A", "beta6B", "beta6C",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Scenario {
            covariates,
            outcome,
            phase_two_only: vec!["X2".into()],
            parameter_labels,
        }
    }
}
