//! End-to-end two-phase estimate: reduced-model fit on phase I, iterated
//! GMM on the stacked moments, sandwich standard errors.

use nalgebra::DVector;

use crate::asymptotics::{self, SandwichCov};
use crate::design::{PiMode, TwoPhaseDesign};
use crate::error::Result;
use crate::gmm::{self, GmmFit, GmmOptions};
use crate::logistic::{fit_logistic, FitOptions, LogisticFit};
use crate::moments::{MomentBlocks, MomentContext, TwoPhaseData};

#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    pub pi_mode: PiMode,
    pub blocks: MomentBlocks,
    pub gmm: GmmOptions,
    pub level: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            pi_mode: PiMode::Known,
            blocks: MomentBlocks::Stacked,
            gmm: GmmOptions::default(),
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoPhaseEstimate {
    pub reduced: LogisticFit,
    pub context: MomentContext,
    pub fit: GmmFit,
    pub sandwich: SandwichCov,
    pub ci: Vec<(f64, f64)>,
}

impl TwoPhaseEstimate {
    pub fn beta(&self) -> &DVector<f64> {
        &self.fit.beta_hat
    }

    pub fn se(&self) -> &DVector<f64> {
        &self.sandwich.se
    }
}

/// Moment context for `data` after validating the design against it and
/// fitting the reduced model on all phase-I rows.
pub fn build_context(
    data: &TwoPhaseData,
    design: &TwoPhaseDesign,
    pi_mode: PiMode,
    blocks: MomentBlocks,
) -> Result<(LogisticFit, MomentContext)> {
    data.validate()?;
    design.validate_for_estimation()?;
    design.check_counts(&data.y, &data.strata, &data.selected)?;
    let pi = design.pi_table(pi_mode)?;
    data.x.check_full_rank(None, "phase-II extended design")?;
    let reduced = fit_logistic(&data.y, &data.z, None, None, &FitOptions::default())?;
    let ctx = MomentContext::new(data, &pi, pi_mode, reduced.coef.clone(), blocks)?;
    Ok((reduced, ctx))
}

pub fn estimate(
    data: &TwoPhaseData,
    design: &TwoPhaseDesign,
    cfg: &EstimatorConfig,
) -> Result<TwoPhaseEstimate> {
    let (reduced, context) = build_context(data, design, cfg.pi_mode, cfg.blocks)?;
    let fit = gmm::iterated_gmm(&context, &cfg.gmm)?;
    let sandwich = asymptotics::sandwich_cov(&context, &fit, cfg.gmm.correction)?;
    let ci = asymptotics::wald_ci(&fit.beta_hat, &sandwich.se, cfg.level);
    Ok(TwoPhaseEstimate {
        reduced,
        context,
        fit,
        sandwich,
        ci,
    })
}
