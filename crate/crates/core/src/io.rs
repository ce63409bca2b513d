//! File formats.
//!
//! * phase-I CSV: `id,y,s,<z-columns>`
//! * phase-II CSV: `id,<x-columns>`; rows join to phase I by `id`
//! * design: key/value text, see [`TwoPhaseDesign::parse`]
//! * model config: TOML with `reduced`, `full`, optional `pi_mode`, `level`
//!
//! Floats are written with 17 significant digits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asymptotics::PhaseOneCorrection;
use crate::baselines;
use crate::design::{PiMode, TwoPhaseDesign};
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig, TwoPhaseEstimate};
use crate::model::{Frame, ModelSpec};
use crate::moments::TwoPhaseData;

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(text: &str, what: &str) -> Result<f64> {
    text.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{what}: `{text}` is not a number")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOneTable {
    pub ids: Vec<String>,
    pub y: Vec<u8>,
    pub strata: Vec<u32>,
    pub columns: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTwoTable {
    pub ids: Vec<String>,
    pub columns: Frame,
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_phase1(path: &Path, table: &PhaseOneTable) -> Result<()> {
    let names = table.columns.names();
    let header: Vec<String> = ["id", "y", "s"]
        .iter()
        .map(|s| s.to_string())
        .chain(names.iter().cloned())
        .collect();
    let cols: Vec<&[f64]> = names
        .iter()
        .map(|n| table.columns.column(n).unwrap())
        .collect();
    write_csv(
        path,
        &header,
        (0..table.ids.len()).map(|i| {
            [
                table.ids[i].clone(),
                table.y[i].to_string(),
                table.strata[i].to_string(),
            ]
            .into_iter()
            .chain(cols.iter().map(|c| fmt_float(c[i])))
            .collect()
        }),
    )
}

pub fn write_phase2(path: &Path, table: &PhaseTwoTable) -> Result<()> {
    let names = table.columns.names();
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain(names.iter().cloned())
        .collect();
    let cols: Vec<&[f64]> = names
        .iter()
        .map(|n| table.columns.column(n).unwrap())
        .collect();
    write_csv(
        path,
        &header,
        (0..table.ids.len()).map(|i| {
            std::iter::once(table.ids[i].clone())
                .chain(cols.iter().map(|c| fmt_float(c[i])))
                .collect()
        }),
    )
}

fn read_table(
    path: &Path,
    leading: &[&str],
) -> Result<(Vec<Vec<String>>, Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if header.len() < leading.len() || header.iter().zip(leading).any(|(h, l)| h != l) {
        return Err(Error::Parse(format!(
            "{}: header must start with {}",
            path.display(),
            leading.join(",")
        )));
    }
    let names = header[leading.len()..].to_vec();
    let mut lead = vec![Vec::new(); leading.len()];
    let mut values = vec![Vec::new(); names.len()];
    for (lineno, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Parse(format!(
                "{} row {}: wrong field count",
                path.display(),
                lineno + 2
            )));
        }
        for (k, l) in lead.iter_mut().enumerate() {
            l.push(record[k].to_string());
        }
        for (k, col) in values.iter_mut().enumerate() {
            let v = parse_float(
                &record[leading.len() + k],
                &format!("{} row {}", path.display(), lineno + 2),
            )?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "{} row {}: non-finite value",
                    path.display(),
                    lineno + 2
                )));
            }
            col.push(v);
        }
    }
    Ok((lead, names, values))
}

fn frame_from(names: Vec<String>, values: Vec<Vec<f64>>, nrows: usize) -> Result<Frame> {
    let mut frame = Frame::new(nrows);
    for (name, col) in names.into_iter().zip(values) {
        frame.push(name, col)?;
    }
    Ok(frame)
}

fn check_unique(ids: &[String], path: &Path) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Parse(format!(
                "{}: duplicate id `{id}`",
                path.display()
            )));
        }
    }
    Ok(())
}

pub fn read_phase1(path: &Path) -> Result<PhaseOneTable> {
    let (lead, names, values) = read_table(path, &["id", "y", "s"])?;
    let [ids, ys, ss]: [Vec<String>; 3] = lead.try_into().expect("three leading columns");
    check_unique(&ids, path)?;
    let y = ys
        .iter()
        .map(|v| match v.as_str() {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(Error::Parse(format!(
                "{}: outcome `{other}` is not 0/1",
                path.display()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let strata = ss
        .iter()
        .map(|v| match v.parse::<u32>() {
            Ok(s) if s >= 1 => Ok(s),
            _ => Err(Error::Parse(format!(
                "{}: stratum `{v}` is not an integer >= 1",
                path.display()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let columns = frame_from(names, values, ids.len())?;
    Ok(PhaseOneTable {
        ids,
        y,
        strata,
        columns,
    })
}

pub fn read_phase2(path: &Path) -> Result<PhaseTwoTable> {
    let (lead, names, values) = read_table(path, &["id"])?;
    let ids = lead.into_iter().next().expect("id column");
    check_unique(&ids, path)?;
    let columns = frame_from(names, values, ids.len())?;
    Ok(PhaseTwoTable { ids, columns })
}

/// Join phase II onto phase I by id and expand both model designs.
///
/// A column present in both files must agree exactly on every joined row.
pub fn join_two_phase(
    phase1: &PhaseOneTable,
    phase2: &PhaseTwoTable,
    reduced: &ModelSpec,
    full: &ModelSpec,
) -> Result<TwoPhaseData> {
    let index: HashMap<&str, usize> = phase1
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut order: Vec<(usize, usize)> = phase2
        .ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            index
                .get(id.as_str())
                .map(|&i| (i, k))
                .ok_or_else(|| Error::Join { id: id.clone() })
        })
        .collect::<Result<_>>()?;
    order.sort_unstable();
    let selected: Vec<usize> = order.iter().map(|(i, _)| *i).collect();
    let phase2_rows: Vec<usize> = order.iter().map(|(_, k)| *k).collect();

    for name in reduced.base_columns() {
        if phase1.columns.column(&name).is_none() {
            return Err(Error::InvalidModel(format!(
                "reduced model uses `{name}`, which is not a phase-I column"
            )));
        }
    }

    let p1 = phase1.columns.select_rows(&selected);
    let p2 = phase2.columns.select_rows(&phase2_rows);
    let mut joined = p1.clone();
    for name in p2.names() {
        let col = p2.column(name).unwrap();
        match p1.column(name) {
            Some(existing) => {
                if existing != col {
                    return Err(Error::InvalidInput(format!(
                        "column `{name}` differs between phase-I and phase-II files"
                    )));
                }
            }
            None => joined.push(name.clone(), col.to_vec())?,
        }
    }

    Ok(TwoPhaseData {
        y: phase1.y.clone(),
        strata: phase1.strata.clone(),
        z: reduced.design(&phase1.columns)?,
        selected,
        x: full.design(&joined)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Reduced-model terms on phase-I columns.
    pub reduced: String,
    /// Extended-model terms.
    pub full: String,
    #[serde(default)]
    pub pi_mode: PiMode,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub correction: PhaseOneCorrection,
}

fn default_level() -> f64 {
    0.95
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !(cfg.level > 0.0 && cfg.level < 1.0) {
            return Err(Error::Config(format!("level {} outside (0, 1)", cfg.level)));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub rows: Vec<ReportRow>,
    pub wl: Option<Vec<ReportRow>>,
    pub estimate: TwoPhaseEstimate,
}

impl FitReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,term,estimate,se,ci_lo,ci_hi\n");
        let blocks = std::iter::once(("gmm", &self.rows)).chain(self.wl.iter().map(|r| ("wl", r)));
        for (method, rows) in blocks {
            for r in rows {
                out.push_str(&format!(
                    "{method},{},{},{},{},{}\n",
                    r.term,
                    fmt_float(r.estimate),
                    fmt_float(r.se),
                    fmt_float(r.ci_lo),
                    fmt_float(r.ci_hi)
                ));
            }
        }
        out
    }
}

/// Single-dataset pipeline behind `twophase fit`.
pub fn run_fit(phase1: &Path, phase2: &Path, design: &Path, model: &Path) -> Result<FitReport> {
    let p1 = read_phase1(phase1)?;
    let p2 = read_phase2(phase2)?;
    let design = TwoPhaseDesign::parse(&fs::read_to_string(design)?)?;
    let cfg = ModelConfig::from_toml(&fs::read_to_string(model)?)?;
    fit_tables(&p1, &p2, &design, &cfg)
}

pub fn fit_tables(
    p1: &PhaseOneTable,
    p2: &PhaseTwoTable,
    design: &TwoPhaseDesign,
    cfg: &ModelConfig,
) -> Result<FitReport> {
    let reduced = ModelSpec::parse(&cfg.reduced)?;
    let full = ModelSpec::parse(&cfg.full)?;
    let data = join_two_phase(p1, p2, &reduced, &full)?;
    let mut est_cfg = EstimatorConfig {
        pi_mode: cfg.pi_mode,
        level: cfg.level,
        ..EstimatorConfig::default()
    };
    est_cfg.gmm.correction = cfg.correction;
    let estimate = estimator::estimate(&data, design, &est_cfg)?;
    let names = full.column_names();
    let rows = names
        .iter()
        .enumerate()
        .map(|(j, term)| ReportRow {
            term: term.clone(),
            estimate: estimate.beta()[j],
            se: estimate.se()[j],
            ci_lo: estimate.ci[j].0,
            ci_hi: estimate.ci[j].1,
        })
        .collect();
    let wl = baselines::fit_wl(&estimate.context).ok().map(|b| {
        let ci = crate::asymptotics::wald_ci(&b.coef, &b.se, cfg.level);
        names
            .iter()
            .enumerate()
            .map(|(j, term)| ReportRow {
                term: term.clone(),
                estimate: b.coef[j],
                se: b.se[j],
                ci_lo: ci[j].0,
                ci_hi: ci[j].1,
            })
            .collect()
    });
    Ok(FitReport { rows, wl, estimate })
}
