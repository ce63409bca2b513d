//! Sandwich covariance of the GMM estimate from per-subject influence
//! functions.
//!
//! With `Psi = (Psi1, Psi2, Psi3)` stacked per phase-I subject,
//!
//! ```text
//! Psi1_i = R_i f(x_i, z_i; beta, theta) / pi_i
//! Psi2_i = R_i (y_i - expit(offset_i + beta'x_i)) x_i
//! Psi3_i = (y_i - expit(theta'z_i)) z_i
//! Omega  = (1/N) sum_i Psi_i Psi_i'
//! D      = [[I, 0, V1 I(theta)^-1], [0, (N/n) I, 0]]
//! ```
//!
//! `D Omega D'` estimates the variance of `sqrt(N) U_N`, and the covariance
//! of `sqrt(N)(beta_hat - beta)` is
//! `(G'CG)^-1 G'C (D Omega D') C G (G'CG)^-1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::{GmmFit, WeightingMatrix};
use crate::linalg;
use crate::logistic::{expit, expit_prime};
use crate::moments::{MomentBlocks, MomentContext};
use crate::normal;

/// Multiplier applied to the phase-I score block of the influence function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseOneCorrection {
    /// `V1 I(theta)^-1`, from the mean-value expansion in `theta`.
    #[default]
    Derived,
    /// Identity block, as in the simplified influence function.
    Identity,
    /// No phase-I correction: `theta_hat` treated as known.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct InfluencePieces {
    /// `N x q1`, zero on unselected rows.
    pub psi1: DMatrix<f64>,
    /// `N x q2`, zero on unselected rows.
    pub psi2: DMatrix<f64>,
    /// `N x q1`
    pub psi3: DMatrix<f64>,
    /// `n / N`
    pub lambda_hat: f64,
}

impl InfluencePieces {
    /// Rows `(Psi1, Psi2, Psi3)` laid side by side, or `Psi2` alone for the
    /// phase-II-only system.
    pub fn stacked(&self, blocks: MomentBlocks) -> DMatrix<f64> {
        match blocks {
            MomentBlocks::PhaseTwoOnly => self.psi2.clone(),
            MomentBlocks::Stacked => {
                let (n, q1, q2) = (self.psi1.nrows(), self.psi1.ncols(), self.psi2.ncols());
                let mut out = DMatrix::zeros(n, 2 * q1 + q2);
                out.columns_mut(0, q1).copy_from(&self.psi1);
                out.columns_mut(q1, q2).copy_from(&self.psi2);
                out.columns_mut(q1 + q2, q1).copy_from(&self.psi3);
                out
            }
        }
    }
}

pub fn influence_pieces(
    ctx: &MomentContext,
    beta: &DVector<f64>,
    theta: &DVector<f64>,
) -> InfluencePieces {
    let n1 = ctx.phase1_size();
    let (q1, q2) = (ctx.q1(), ctx.q2());
    let x = ctx.x_selected();
    let z_sel = ctx.z_selected();
    let eta_x = x * beta;
    let eta_zs = z_sel * theta;

    let mut psi1 = DMatrix::zeros(n1, q1);
    let mut psi2 = DMatrix::zeros(n1, q2);
    for (k, &i) in ctx.selected().iter().enumerate() {
        let d = (expit(eta_x[k]) - expit(eta_zs[k])) / ctx.pi_selected()[k];
        for j in 0..q1 {
            psi1[(i, j)] = d * z_sel[(k, j)];
        }
        let r = ctx.y_selected()[k] - expit(eta_x[k] + ctx.offset_selected()[k]);
        for j in 0..q2 {
            psi2[(i, j)] = r * x[(k, j)];
        }
    }

    let z = ctx.z_all();
    let eta_z = z * theta;
    let psi3 = DMatrix::from_fn(n1, q1, |i, j| {
        (ctx.y_all()[i] - expit(eta_z[i])) * z[(i, j)]
    });
    InfluencePieces {
        psi1,
        psi2,
        psi3,
        lambda_hat: ctx.phase2_size() as f64 / n1 as f64,
    }
}

/// Per-subject information of the reduced model over all phase-I rows,
/// `(1/N) sum h'(theta'z) z z'`.
pub fn reduced_information(ctx: &MomentContext, theta: &DVector<f64>) -> DMatrix<f64> {
    let z = ctx.z_all();
    let eta = z * theta;
    let scaled = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * expit_prime(eta[i]));
    linalg::symmetrize(&(z.transpose() * scaled)) / z.nrows() as f64
}

/// Pieces of the estimated variance of `sqrt(N) U_N`.
#[derive(Debug, Clone)]
pub struct MomentVariance {
    pub omega: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// `D Omega D'`
    pub s: DMatrix<f64>,
}

pub fn moment_variance(
    ctx: &MomentContext,
    beta: &DVector<f64>,
    correction: PhaseOneCorrection,
) -> Result<MomentVariance> {
    let theta = ctx.theta_hat();
    let pieces = influence_pieces(ctx, beta, theta);
    let psi = pieces.stacked(ctx.blocks());
    let omega = linalg::symmetrize(&(psi.transpose() * &psi)) / ctx.phase1_size() as f64;
    let (q1, q2) = (ctx.q1(), ctx.q2());
    let inv_lambda = 1.0 / pieces.lambda_hat;

    let d = match ctx.blocks() {
        MomentBlocks::PhaseTwoOnly => DMatrix::identity(q2, q2) * inv_lambda,
        MomentBlocks::Stacked => {
            let mut d = DMatrix::zeros(q1 + q2, 2 * q1 + q2);
            d.view_mut((0, 0), (q1, q1)).fill_with_identity();
            d.view_mut((q1, q1), (q2, q2)).fill_with_identity();
            d.view_mut((q1, q1), (q2, q2)).scale_mut(inv_lambda);
            let block = match correction {
                PhaseOneCorrection::Derived => {
                    let info = reduced_information(ctx, theta);
                    let info_inv =
                        linalg::spd_inverse(&info).ok_or_else(|| Error::RankDeficient {
                            what: "reduced-model information".into(),
                        })?;
                    ctx.v1_at(theta) * info_inv
                }
                PhaseOneCorrection::Identity => DMatrix::identity(q1, q1),
                PhaseOneCorrection::Ignored => DMatrix::zeros(q1, q1),
            };
            d.view_mut((0, q1 + q2), (q1, q1)).copy_from(&block);
            d
        }
    };
    let s = linalg::symmetrize(&(&d * &omega * d.transpose()));
    Ok(MomentVariance { omega, d, s })
}

#[derive(Debug, Clone)]
pub struct SandwichCov {
    /// `G_N(beta_hat, theta_hat)`
    pub gamma_hat: DMatrix<f64>,
    pub d_hat: DMatrix<f64>,
    pub omega_hat: DMatrix<f64>,
    /// Asymptotic covariance of `sqrt(N)(beta_hat - beta)`.
    pub cov_beta: DMatrix<f64>,
    /// `sqrt(diag(cov_beta) / N)`
    pub se: DVector<f64>,
    /// Max-abs difference between the general sandwich and
    /// `(G'(D Omega D')^-1 G)^-1`; small when `C` is the optimal weight.
    pub optimal_form_gap: f64,
}

pub fn sandwich_cov(
    ctx: &MomentContext,
    fit: &GmmFit,
    correction: PhaseOneCorrection,
) -> Result<SandwichCov> {
    if !fit.converged {
        return Err(Error::InvalidInput(
            "sandwich requires a converged fit".into(),
        ));
    }
    sandwich_at(ctx, &fit.beta_hat, &fit.c_used, correction)
}

/// Sandwich covariance at an arbitrary `beta` and weighting matrix.
pub fn sandwich_at(
    ctx: &MomentContext,
    beta: &DVector<f64>,
    c: &WeightingMatrix,
    correction: PhaseOneCorrection,
) -> Result<SandwichCov> {
    let gamma = ctx.jacobians(beta).g;
    let var = moment_variance(ctx, beta, correction)?;
    let cm = c.matrix();
    if cm.nrows() != gamma.nrows() {
        return Err(Error::Dimension {
            what: "weighting matrix",
            expected: gamma.nrows(),
            found: cm.nrows(),
        });
    }
    let cg = cm * &gamma;
    let bread_inv = linalg::symmetrize(&(gamma.transpose() * &cg));
    if linalg::rcond_sym(&bread_inv) < linalg::RCOND_FLOOR {
        return Err(Error::SingularBread);
    }
    let bread = bread_inv
        .clone()
        .try_inverse()
        .map(|m| linalg::symmetrize(&m))
        .ok_or(Error::SingularBread)?;
    let meat = cg.transpose() * &var.s * &cg;
    let cov_beta = linalg::symmetrize(&(&bread * meat * &bread));

    let (s_inv, _) = linalg::invert_psd(&var.s);
    let opt_inv = linalg::symmetrize(&(gamma.transpose() * s_inv * &gamma));
    let optimal_form_gap = opt_inv
        .try_inverse()
        .map(|m| linalg::max_abs(&(m - &cov_beta)))
        .unwrap_or(f64::INFINITY);

    let n1 = ctx.phase1_size() as f64;
    let se = cov_beta.diagonal().map(|v| (v.max(0.0) / n1).sqrt());
    Ok(SandwichCov {
        gamma_hat: gamma,
        d_hat: var.d,
        omega_hat: var.omega,
        cov_beta,
        se,
        optimal_form_gap,
    })
}

/// Two-sided Wald intervals `beta_j +- z se_j`.
pub fn wald_ci(beta: &DVector<f64>, se: &DVector<f64>, level: f64) -> Vec<(f64, f64)> {
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1)");
    let z = normal::quantile(0.5 * (1.0 + level));
    beta.iter()
        .zip(se.iter())
        .map(|(b, s)| (b - z * s, b + z * s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wald_interval_values() {
        let ci = wald_ci(
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![0.5]),
            0.95,
        );
        assert!((ci[0].0 - 0.020_018_007_729_973).abs() < 1e-12);
        assert!((ci[0].1 - 1.979_981_992_270_027).abs() < 1e-12);
        let ci = wald_ci(
            &DVector::from_vec(vec![2.0]),
            &DVector::from_vec(vec![0.0]),
            0.9,
        );
        assert_eq!(ci[0], (2.0, 2.0));
    }
}
