//! Monte Carlo studies: configuration, the per-replicate pipeline, summary
//! metrics and result files.
//!
//! Replicate `k` draws from a ChaCha8 generator seeded with `base_seed` on
//! stream `k`, so each replicate is a pure function of `(base_seed, k)` and
//! the output does not depend on how many threads run them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{self, PhaseOneCorrection};
use crate::baselines;
use crate::datagen::{gen_outcomes, NWTS_M1, NWTS_M2};
use crate::datagen::{CovariateGenerator, CovariateSpec, OutcomeSpec, Scenario, VariableSpec};
use crate::design::{self, DesignCell, PhaseTwoSample, PiMode, StratumKey, TwoPhaseDesign};
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig};
use crate::io::{self, fmt_float, ModelConfig, PhaseOneTable, PhaseTwoTable};
use crate::model::{DesignMatrix, Frame, ModelSpec};
use crate::moments::{MomentBlocks, TwoPhaseData};

/// Tolerance for matching each pairwise correlation in latent calibration.
pub const CALIBRATION_TOL: f64 = 1e-10;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

pub fn replicate_rng(base_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorName {
    Gmm,
    Wl,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomScenario {
    pub variables: Vec<VariableSpec>,
    /// Target correlation matrix, row by row.
    pub correlation: Vec<Vec<f64>>,
    pub full_model: String,
    /// True coefficients, intercept first.
    pub beta: Vec<f64>,
    #[serde(default)]
    pub phase_two_only: Vec<String>,
    #[serde(default)]
    pub parameter_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioConfig {
    Preset { preset: String },
    Custom(CustomScenario),
}

impl ScenarioConfig {
    pub fn build(&self) -> Result<Scenario> {
        match self {
            ScenarioConfig::Preset { preset } if preset == "nwts" => Ok(Scenario::nwts()),
            ScenarioConfig::Preset { preset } => {
                Err(Error::Config(format!("unknown scenario preset `{preset}`")))
            }
            ScenarioConfig::Custom(c) => {
                let k = c.variables.len();
                if c.correlation.len() != k || c.correlation.iter().any(|r| r.len() != k) {
                    return Err(Error::Config(format!("correlation must be {k} x {k}")));
                }
                let flat: Vec<f64> = c.correlation.iter().flatten().copied().collect();
                let covariates = CovariateSpec {
                    variables: c.variables.clone(),
                    target_corr: nalgebra::DMatrix::from_row_slice(k, k, &flat),
                };
                covariates.validate()?;
                let model = ModelSpec::parse(&c.full_model)?;
                let labels = c
                    .parameter_labels
                    .clone()
                    .unwrap_or_else(|| model.column_names());
                if labels.len() != model.ncols() {
                    return Err(Error::Config(
                        "parameter_labels length differs from the full model".into(),
                    ));
                }
                let outcome = OutcomeSpec::new(model, DVector::from_vec(c.beta.clone()))?;
                Ok(Scenario {
                    covariates,
                    outcome,
                    phase_two_only: c.phase_two_only.clone(),
                    parameter_labels: labels,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellProbability {
    pub y: u8,
    pub s: u32,
    pub pi: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DesignConfig {
    /// All cases and `controls_per_case` controls per case, one stratum.
    CaseControl {
        #[serde(default = "one")]
        controls_per_case: f64,
    },
    /// All cases; controls split evenly over the strata of `stratify_by`.
    Balanced {
        stratify_by: String,
        /// Column value for stratum 1, 2, ...
        stratum_levels: Vec<f64>,
        #[serde(default = "one")]
        controls_per_case: f64,
    },
    /// Quotas `round(pi * N_ds)` from declared probabilities.
    Probabilities {
        stratify_by: String,
        stratum_levels: Vec<f64>,
        cells: Vec<CellProbability>,
    },
}

impl DesignConfig {
    pub fn describe(&self) -> String {
        match self {
            DesignConfig::CaseControl { controls_per_case } => {
                format!("case-control: all cases, round({controls_per_case} x cases) controls, one stratum")
            }
            DesignConfig::Balanced {
                stratify_by,
                controls_per_case,
                ..
            } => format!(
                "balanced on {stratify_by}: all cases, round({controls_per_case} x cases) controls split evenly across strata (capped by availability)"
            ),
            DesignConfig::Probabilities { stratify_by, .. } => {
                format!("probabilities on {stratify_by}: quota round(pi x N_ds) per cell")
            }
        }
    }

    fn validate(&self, columns: &[String]) -> Result<()> {
        let check_levels = |by: &String, levels: &Vec<f64>| {
            if !columns.contains(by) {
                return Err(Error::Config(format!(
                    "stratify_by column `{by}` is not generated"
                )));
            }
            if levels.is_empty() {
                return Err(Error::Config("stratum_levels is empty".into()));
            }
            Ok(())
        };
        let check_ratio = |r: f64| {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Config(format!(
                    "controls_per_case {r} must be finite and >= 0"
                )));
            }
            Ok(())
        };
        match self {
            DesignConfig::CaseControl { controls_per_case } => check_ratio(*controls_per_case),
            DesignConfig::Balanced {
                stratify_by,
                stratum_levels,
                controls_per_case,
            } => {
                check_levels(stratify_by, stratum_levels)?;
                check_ratio(*controls_per_case)
            }
            DesignConfig::Probabilities {
                stratify_by,
                stratum_levels,
                cells,
            } => {
                check_levels(stratify_by, stratum_levels)?;
                for c in cells {
                    if c.y > 1
                        || c.s == 0
                        || c.s as usize > stratum_levels.len()
                        || !(c.pi > 0.0 && c.pi <= 1.0)
                    {
                        return Err(Error::Config(format!(
                            "bad probability cell (y={}, s={}, pi={})",
                            c.y, c.s, c.pi
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    fn strata(&self, frame: &Frame) -> Result<Vec<u32>> {
        let (by, levels) = match self {
            DesignConfig::CaseControl { .. } => return Ok(vec![1; frame.nrows()]),
            DesignConfig::Balanced {
                stratify_by,
                stratum_levels,
                ..
            }
            | DesignConfig::Probabilities {
                stratify_by,
                stratum_levels,
                ..
            } => (stratify_by, stratum_levels),
        };
        let col = frame
            .column(by)
            .ok_or_else(|| Error::Config(format!("stratify_by column `{by}` is not generated")))?;
        col.iter()
            .map(|v| {
                levels
                    .iter()
                    .position(|l| l == v)
                    .map(|k| k as u32 + 1)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "value {v} of `{by}` is not a declared stratum level"
                        ))
                    })
            })
            .collect()
    }

    /// Draw the phase-II sample; for probability designs the declared
    /// probabilities replace the realized ratios in the returned design.
    pub fn sample(&self, y: &[u8], strata: &[u32], rng: &mut ChaCha8Rng) -> Result<PhaseTwoSample> {
        let (n1, _) = design::count_cells(y, strata, &[]);
        let cases: usize = y.iter().map(|&v| usize::from(v)).sum();
        match self {
            DesignConfig::CaseControl { controls_per_case } => {
                let controls = design::round_quota(controls_per_case * cases as f64);
                design::sample_case_control(y, cases, controls, rng)
            }
            DesignConfig::Balanced {
                stratum_levels,
                controls_per_case,
                ..
            } => {
                let j = stratum_levels.len() as u32;
                let mut quota: BTreeMap<StratumKey, usize> = BTreeMap::new();
                for s in 1..=j {
                    let key = StratumKey::new(1, s);
                    quota.insert(key, n1.get(&key).copied().unwrap_or(0));
                    quota.insert(StratumKey::new(0, s), 0);
                }
                let mut remaining = design::round_quota(controls_per_case * cases as f64);
                while remaining > 0 {
                    let mut placed = false;
                    for s in 1..=j {
                        let key = StratumKey::new(0, s);
                        let cap = n1.get(&key).copied().unwrap_or(0);
                        let q = quota.get_mut(&key).expect("initialized");
                        if remaining > 0 && *q < cap {
                            *q += 1;
                            remaining -= 1;
                            placed = true;
                        }
                    }
                    if !placed {
                        break;
                    }
                }
                design::sample_balanced(y, strata, &quota, rng)
            }
            DesignConfig::Probabilities { cells, .. } => {
                let pi: design::PiTable = cells
                    .iter()
                    .map(|c| (StratumKey::new(c.y, c.s), c.pi))
                    .collect();
                let quota = design::quotas_from_probabilities(&n1, &pi)?;
                let mut sample = design::sample_balanced(y, strata, &quota, rng)?;
                let declared: BTreeMap<StratumKey, DesignCell> = sample
                    .design
                    .cells()
                    .iter()
                    .map(|(k, c)| {
                        (
                            *k,
                            DesignCell {
                                pi: pi.get(k).copied().unwrap_or(c.pi),
                                ..*c
                            },
                        )
                    })
                    .collect();
                sample.design = TwoPhaseDesign::new(sample.design.strata(), declared)?;
                Ok(sample)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedModelConfig {
    pub name: String,
    pub terms: String,
}

fn default_estimators() -> Vec<EstimatorName> {
    vec![EstimatorName::Gmm, EstimatorName::Wl, EstimatorName::Oracle]
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub reps: usize,
    pub base_seed: u64,
    pub phase1_size: usize,
    #[serde(default)]
    pub pi_mode: PiMode,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub correction: PhaseOneCorrection,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorName>,
    pub scenario: ScenarioConfig,
    pub design: DesignConfig,
    pub reduced_models: Vec<ReducedModelConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("study config serializes")
    }

    /// The NWTS-like study with both reduced models.
    pub fn nwts(design: DesignConfig, reps: usize, base_seed: u64) -> Self {
        StudyConfig {
            reps,
            base_seed,
            phase1_size: 10_000,
            pi_mode: PiMode::Known,
            level: 0.95,
            correction: PhaseOneCorrection::Derived,
            estimators: default_estimators(),
            scenario: ScenarioConfig::Preset {
                preset: "nwts".into(),
            },
            design,
            reduced_models: vec![
                ReducedModelConfig {
                    name: "M1".into(),
                    terms: NWTS_M1.into(),
                },
                ReducedModelConfig {
                    name: "M2".into(),
                    terms: NWTS_M2.into(),
                },
            ],
            out_dir: None,
        }
    }

    /// Balanced on X1; stratum 1 is favorable histology (X1 = 0).
    pub fn nwts_balanced() -> DesignConfig {
        DesignConfig::Balanced {
            stratify_by: "X1".into(),
            stratum_levels: vec![0.0, 1.0],
            controls_per_case: 1.0,
        }
    }
}

/// Study inputs after parsing and cross-checking the configuration.
#[derive(Debug, Clone)]
pub struct PreparedStudy {
    pub config: StudyConfig,
    pub scenario: Scenario,
    pub generator: CovariateGenerator,
    pub reduced: Vec<(String, ModelSpec)>,
}

impl PreparedStudy {
    pub fn new(config: StudyConfig) -> Result<Self> {
        if config.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if config.phase1_size == 0 {
            return Err(Error::Config("phase1_size must be >= 1".into()));
        }
        if !(config.level > 0.0 && config.level < 1.0) {
            return Err(Error::Config(format!(
                "level {} outside (0, 1)",
                config.level
            )));
        }
        if config.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        let scenario = config.scenario.build()?;
        let generator = CovariateGenerator::new(scenario.covariates.clone(), CALIBRATION_TOL)?;
        let columns = generator.column_names();
        for c in scenario.outcome.model.base_columns() {
            if !columns.contains(&c) {
                return Err(Error::Config(format!(
                    "full model uses unknown column `{c}`"
                )));
            }
        }
        config.design.validate(&columns)?;
        if let DesignConfig::Balanced { stratify_by, .. }
        | DesignConfig::Probabilities { stratify_by, .. } = &config.design
        {
            if scenario.phase_two_only.contains(stratify_by) {
                return Err(Error::Config(format!(
                    "cannot stratify on phase-II-only column `{stratify_by}`"
                )));
            }
        }
        let mut reduced = Vec::new();
        for m in &config.reduced_models {
            let spec = ModelSpec::parse(&m.terms)?;
            for c in spec.base_columns() {
                if !columns.contains(&c) {
                    return Err(Error::Config(format!(
                        "reduced model {} uses unknown column `{c}`",
                        m.name
                    )));
                }
                if scenario.phase_two_only.contains(&c) {
                    return Err(Error::Config(format!(
                        "reduced model {} uses phase-II-only column `{c}`",
                        m.name
                    )));
                }
            }
            if reduced.iter().any(|(n, _)| n == &m.name) {
                return Err(Error::Config(format!(
                    "duplicate reduced model name `{}`",
                    m.name
                )));
            }
            reduced.push((m.name.clone(), spec));
        }
        if config.estimators.contains(&EstimatorName::Gmm) && reduced.is_empty() {
            return Err(Error::Config("gmm needs at least one reduced model".into()));
        }
        Ok(PreparedStudy {
            config,
            scenario,
            generator,
            reduced,
        })
    }

    /// Estimator labels in output order.
    pub fn estimator_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut names = self.config.estimators.clone();
        names.sort();
        names.dedup();
        for e in names {
            match e {
                EstimatorName::Gmm => {
                    out.extend(self.reduced.iter().map(|(n, _)| format!("gmm-{n}")))
                }
                EstimatorName::Wl => out.push("wl".into()),
                EstimatorName::Oracle => out.push("oracle".into()),
            }
        }
        out
    }
}

/// One simulated population with its phase-II sample.
#[derive(Debug, Clone)]
pub struct Population {
    pub frame: Frame,
    pub y: Vec<u8>,
    pub strata: Vec<u32>,
    pub x_full: DesignMatrix,
    pub sample: PhaseTwoSample,
}

pub fn draw_population(study: &PreparedStudy, index: usize) -> Result<Population> {
    let mut rng = replicate_rng(study.config.base_seed, index);
    let frame = study.generator.generate(study.config.phase1_size, &mut rng);
    let x_full = study.scenario.outcome.model.design(&frame)?;
    let y = gen_outcomes(&x_full, &study.scenario.outcome.beta, &mut rng);
    let strata = study.config.design.strata(&frame)?;
    let sample = study.config.design.sample(&y, &strata, &mut rng)?;
    Ok(Population {
        frame,
        y,
        strata,
        x_full,
        sample,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorDraw {
    pub estimator: String,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateFailure {
    pub rep: usize,
    pub stage: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplicateOutcome {
    Ok(Vec<EstimatorDraw>),
    Failed(ReplicateFailure),
}

fn draw_of(label: &str, beta: &DVector<f64>, se: &DVector<f64>, level: f64) -> EstimatorDraw {
    EstimatorDraw {
        estimator: label.to_string(),
        estimate: beta.iter().copied().collect(),
        se: se.iter().copied().collect(),
        ci: asymptotics::wald_ci(beta, se, level),
    }
}

/// Generate, sample and fit every requested estimator for replicate `index`.
pub fn run_replicate(study: &PreparedStudy, index: usize) -> ReplicateOutcome {
    let fail = |stage: &str, e: Error| {
        ReplicateOutcome::Failed(ReplicateFailure {
            rep: index,
            stage: stage.to_string(),
            kind: e.kind().to_string(),
            message: e.to_string(),
        })
    };
    let pop = match draw_population(study, index) {
        Ok(p) => p,
        Err(e) => return fail("sampling", e),
    };
    let cfg = &study.config;
    let x = pop.x_full.select_rows(&pop.sample.indices);
    let mut est_cfg = EstimatorConfig {
        pi_mode: cfg.pi_mode,
        level: cfg.level,
        ..EstimatorConfig::default()
    };
    est_cfg.gmm.correction = cfg.correction;

    let mut draws = Vec::new();
    for label in study.estimator_labels() {
        let result = if let Some(name) = label.strip_prefix("gmm-") {
            let spec = &study
                .reduced
                .iter()
                .find(|(n, _)| n == name)
                .expect("known model")
                .1;
            spec.design(&pop.frame)
                .and_then(|z| {
                    let data = TwoPhaseData {
                        y: pop.y.clone(),
                        strata: pop.strata.clone(),
                        z,
                        selected: pop.sample.indices.clone(),
                        x: x.clone(),
                    };
                    estimator::estimate(&data, &pop.sample.design, &est_cfg)
                })
                .map(|est| draw_of(&label, est.beta(), est.se(), cfg.level))
        } else if label == "wl" {
            let data = TwoPhaseData {
                y: pop.y.clone(),
                strata: pop.strata.clone(),
                z: DesignMatrix::intercept_only(pop.y.len()),
                selected: pop.sample.indices.clone(),
                x: x.clone(),
            };
            estimator::build_context(
                &data,
                &pop.sample.design,
                cfg.pi_mode,
                MomentBlocks::Stacked,
            )
            .and_then(|(_, ctx)| baselines::fit_wl(&ctx))
            .map(|b| draw_of(&label, &b.coef, &b.se, cfg.level))
        } else {
            baselines::fit_oracle(&pop.y, &pop.x_full)
                .map(|b| draw_of(&label, &b.coef, &b.se, cfg.level))
        };
        match result {
            Ok(d) => draws.push(d),
            Err(e) => return fail(&label, e),
        }
    }
    ReplicateOutcome::Ok(draws)
}

fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSummary {
    pub bias: f64,
    pub bias_pct: f64,
    pub sd: f64,
    pub esd: f64,
    pub cp: f64,
}

/// Per-parameter bias, percent bias, SD (divisor reps - 1), ESD (mean
/// reported se) and coverage. Sums run over sorted values so the result
/// does not depend on replicate order.
pub fn metrics(
    estimates: &[Vec<f64>],
    ses: &[Vec<f64>],
    cis: &[Vec<(f64, f64)>],
    truth: &[f64],
) -> Result<Vec<ParamSummary>> {
    let reps = estimates.len();
    if reps < 2 {
        return Err(Error::InvalidInput(
            "metrics need at least two replicates".into(),
        ));
    }
    if ses.len() != reps || cis.len() != reps {
        return Err(Error::Dimension {
            what: "replicate tables",
            expected: reps,
            found: ses.len().min(cis.len()),
        });
    }
    let p = truth.len();
    for row in estimates.iter().chain(ses) {
        if row.len() != p {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: p,
                found: row.len(),
            });
        }
    }
    let n = reps as f64;
    Ok((0..p)
        .map(|j| {
            let mean = sorted_sum(estimates.iter().map(|r| r[j]).collect()) / n;
            let ss = sorted_sum(estimates.iter().map(|r| (r[j] - mean).powi(2)).collect());
            let esd = sorted_sum(ses.iter().map(|r| r[j]).collect()) / n;
            let hits = cis
                .iter()
                .filter(|r| r[j].0 <= truth[j] && truth[j] <= r[j].1)
                .count();
            let bias = mean - truth[j];
            ParamSummary {
                bias,
                bias_pct: 100.0 * bias / truth[j].abs(),
                sd: (ss / (n - 1.0)).sqrt(),
                esd,
                cp: hits as f64 / n,
            }
        })
        .collect())
}

/// Variance ratio `baseline_sd^2 / sd^2`; above one favors the estimator.
pub fn relative_efficiency(baseline_sd: f64, sd: f64) -> f64 {
    (baseline_sd * baseline_sd) / (sd * sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub bias: f64,
    pub bias_pct: f64,
    pub sd: f64,
    pub esd: f64,
    pub cp: f64,
    pub re_wl: f64,
    pub re_oracle: f64,
}

impl ResultRow {
    /// Bit-level equality, treating NaN fields as equal to NaN.
    pub fn same_bits(&self, other: &ResultRow) -> bool {
        let a = [
            self.truth,
            self.bias,
            self.bias_pct,
            self.sd,
            self.esd,
            self.cp,
            self.re_wl,
            self.re_oracle,
        ];
        let b = [
            other.truth,
            other.bias,
            other.bias_pct,
            other.sd,
            other.esd,
            other.cp,
            other.re_wl,
            other.re_oracle,
        ];
        self.estimator == other.estimator
            && self.parameter == other.parameter
            && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

#[derive(Debug, Clone)]
pub struct McStudyResult {
    pub config: StudyConfig,
    pub design_rule: String,
    pub parameter_labels: Vec<String>,
    pub truth: Vec<f64>,
    pub rows: Vec<ResultRow>,
    pub replicates: Vec<(usize, Vec<EstimatorDraw>)>,
    pub failures: Vec<ReplicateFailure>,
}

impl McStudyResult {
    pub fn row(&self, estimator: &str, parameter: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.parameter == parameter)
    }

    pub fn failure_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for f in &self.failures {
            *out.entry(format!("{}:{}", f.stage, f.kind)).or_insert(0) += 1;
        }
        out
    }
}

pub fn run_mc(config: StudyConfig, threads: Option<usize>) -> Result<McStudyResult> {
    let study = PreparedStudy::new(config)?;
    let reps = study.config.reps;
    let run = || -> Vec<ReplicateOutcome> {
        (0..reps)
            .into_par_iter()
            .map(|k| run_replicate(&study, k))
            .collect()
    };
    let outcomes = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    aggregate(&study, outcomes)
}

fn aggregate(study: &PreparedStudy, outcomes: Vec<ReplicateOutcome>) -> Result<McStudyResult> {
    let reps = outcomes.len();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            ReplicateOutcome::Ok(d) => replicates.push((k, d)),
            ReplicateOutcome::Failed(f) => {
                log::warn!("replicate {} failed in {}: {}", f.rep, f.stage, f.message);
                failures.push(f);
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_SHARE * reps as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: reps,
        });
    }
    if replicates.len() < 2 {
        return Err(Error::InvalidInput(
            "fewer than two successful replicates".into(),
        ));
    }

    let truth: Vec<f64> = study.scenario.outcome.beta.iter().copied().collect();
    let labels = study.estimator_labels();
    let mut summaries = BTreeMap::new();
    for (e, label) in labels.iter().enumerate() {
        let est: Vec<Vec<f64>> = replicates
            .iter()
            .map(|(_, d)| d[e].estimate.clone())
            .collect();
        let ses: Vec<Vec<f64>> = replicates.iter().map(|(_, d)| d[e].se.clone()).collect();
        let cis: Vec<Vec<(f64, f64)>> = replicates.iter().map(|(_, d)| d[e].ci.clone()).collect();
        summaries.insert(label.clone(), metrics(&est, &ses, &cis, &truth)?);
    }
    let mut rows = Vec::new();
    for label in &labels {
        for (j, param) in study.scenario.parameter_labels.iter().enumerate() {
            let s = summaries[label][j];
            let re = |base: &str| {
                summaries
                    .get(base)
                    .map_or(f64::NAN, |b| relative_efficiency(b[j].sd, s.sd))
            };
            rows.push(ResultRow {
                estimator: label.clone(),
                parameter: param.clone(),
                truth: truth[j],
                bias: s.bias,
                bias_pct: s.bias_pct,
                sd: s.sd,
                esd: s.esd,
                cp: s.cp,
                re_wl: re("wl"),
                re_oracle: re("oracle"),
            });
        }
    }
    Ok(McStudyResult {
        design_rule: study.config.design.describe(),
        parameter_labels: study.scenario.parameter_labels.clone(),
        config: study.config.clone(),
        truth,
        rows,
        replicates,
        failures,
    })
}

const RESULT_HEADER: [&str; 10] = [
    "estimator",
    "parameter",
    "truth",
    "bias",
    "bias_pct",
    "sd",
    "esd",
    "cp",
    "re_wl",
    "re_oracle",
];

pub fn results_csv(result: &McStudyResult) -> String {
    let mut out = format!("# design: {}\n", result.design_rule);
    out.push_str(&RESULT_HEADER.join(","));
    out.push('\n');
    for r in &result.rows {
        let nums = [
            r.truth,
            r.bias,
            r.bias_pct,
            r.sd,
            r.esd,
            r.cp,
            r.re_wl,
            r.re_oracle,
        ];
        out.push_str(&r.estimator);
        out.push(',');
        out.push_str(&r.parameter);
        for v in nums {
            out.push(',');
            out.push_str(&fmt_float(v));
        }
        out.push('\n');
    }
    out
}

pub fn replicates_csv(result: &McStudyResult) -> String {
    let mut out = String::from("rep,estimator,parameter,estimate,se,ci_lo,ci_hi\n");
    for (k, draws) in &result.replicates {
        for d in draws {
            for (j, p) in result.parameter_labels.iter().enumerate() {
                out.push_str(&format!(
                    "{k},{},{p},{},{},{},{}\n",
                    d.estimator,
                    fmt_float(d.estimate[j]),
                    fmt_float(d.se[j]),
                    fmt_float(d.ci[j].0),
                    fmt_float(d.ci[j].1)
                ));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    package: &'static str,
    version: &'static str,
    rng: &'static str,
    base_seed: u64,
    reps: usize,
    successful: usize,
    failed: usize,
    design_rule: &'a str,
    failure_counts: BTreeMap<String, usize>,
    failures: &'a [ReplicateFailure],
    parameters: &'a [String],
    truth: &'a [f64],
    config: &'a StudyConfig,
}

pub fn summary_json(result: &McStudyResult) -> String {
    let s = Summary {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        rng: "ChaCha8, seed = base_seed, stream = replicate index",
        base_seed: result.config.base_seed,
        reps: result.config.reps,
        successful: result.replicates.len(),
        failed: result.failures.len(),
        design_rule: &result.design_rule,
        failure_counts: result.failure_counts(),
        failures: &result.failures,
        parameters: &result.parameter_labels,
        truth: &result.truth,
        config: &result.config,
    };
    let mut text = serde_json::to_string_pretty(&s).expect("summary serializes");
    text.push('\n');
    text
}

/// Writes `results.csv`, `replicates.csv` and `summary.json` into `dir`.
pub fn write_outputs(result: &McStudyResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(result))?;
    fs::write(dir.join("replicates.csv"), replicates_csv(result))?;
    fs::write(dir.join("summary.json"), summary_json(result))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_HEADER {
        return Err(Error::Parse(format!(
            "{}: unexpected results header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let num = |k: usize| -> Result<f64> {
            record[k].parse::<f64>().map_err(|_| {
                Error::Parse(format!("results field `{}` is not a number", &record[k]))
            })
        };
        rows.push(ResultRow {
            estimator: record[0].to_string(),
            parameter: record[1].to_string(),
            truth: num(2)?,
            bias: num(3)?,
            bias_pct: num(4)?,
            sd: num(5)?,
            esd: num(6)?,
            cp: num(7)?,
            re_wl: num(8)?,
            re_oracle: num(9)?,
        });
    }
    Ok(rows)
}

/// Writes one replicate's data as `phase1.csv`, `phase2.csv`, `design.txt`
/// and a `model.toml` using the first reduced model, ready for `fit`.
pub fn simulate(config: StudyConfig, dir: &Path) -> Result<()> {
    let study = PreparedStudy::new(config)?;
    let pop = draw_population(&study, 0)?;
    let ids: Vec<String> = (1..=pop.y.len()).map(|i| i.to_string()).collect();

    let mut phase1_cols = Frame::new(pop.y.len());
    let mut phase2_cols = Frame::new(pop.sample.indices.len());
    for name in pop.frame.names() {
        let col = pop.frame.column(name).expect("own column");
        if study.scenario.phase_two_only.contains(name) {
            phase2_cols.push(
                name.clone(),
                pop.sample.indices.iter().map(|&i| col[i]).collect(),
            )?;
        } else {
            phase1_cols.push(name.clone(), col.to_vec())?;
        }
    }
    fs::create_dir_all(dir)?;
    io::write_phase1(
        &dir.join("phase1.csv"),
        &PhaseOneTable {
            ids: ids.clone(),
            y: pop.y.clone(),
            strata: pop.strata.clone(),
            columns: phase1_cols,
        },
    )?;
    io::write_phase2(
        &dir.join("phase2.csv"),
        &PhaseTwoTable {
            ids: pop.sample.indices.iter().map(|&i| ids[i].clone()).collect(),
            columns: phase2_cols,
        },
    )?;
    fs::write(dir.join("design.txt"), pop.sample.design.to_text())?;
    let reduced = study
        .reduced
        .first()
        .map(|(_, m)| m.to_string())
        .ok_or_else(|| Error::Config("simulate needs a reduced model".into()))?;
    let model = ModelConfig {
        reduced,
        full: study.scenario.outcome.model.to_string(),
        pi_mode: study.config.pi_mode,
        level: study.config.level,
        correction: study.config.correction,
    };
    fs::write(dir.join("model.toml"), model.to_toml())?;
    Ok(())
}
