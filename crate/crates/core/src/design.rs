//! Two-phase sampling designs: strata, selection probabilities and the
//! phase-II samplers.
//!
//! Cells are keyed by outcome `y` and a dense stratum id `s` in `1..=J`.
//! Strata are always supplied by the caller; nothing here infers them.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StratumKey {
    pub y: u8,
    pub s: u32,
}

impl StratumKey {
    pub fn new(y: u8, s: u32) -> Self {
        StratumKey { y, s }
    }
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(d={}, s={})", self.y, self.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignCell {
    /// N_ds
    pub phase1: usize,
    /// n_ds
    pub phase2: usize,
    pub pi: f64,
}

/// Which selection probabilities enter estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiMode {
    /// Probabilities declared by the design.
    #[default]
    Known,
    /// Realized ratios n_ds / N_ds.
    Empirical,
}

impl std::str::FromStr for PiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(PiMode::Known),
            "empirical" => Ok(PiMode::Empirical),
            other => Err(Error::Config(format!("unknown pi mode `{other}`"))),
        }
    }
}

pub type PiTable = BTreeMap<StratumKey, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseDesign {
    strata: u32,
    cells: BTreeMap<StratumKey, DesignCell>,
}

impl TwoPhaseDesign {
    pub fn new(strata: u32, cells: BTreeMap<StratumKey, DesignCell>) -> Result<Self> {
        let design = TwoPhaseDesign { strata, cells };
        design.check_structure()?;
        Ok(design)
    }

    pub fn strata(&self) -> u32 {
        self.strata
    }

    pub fn cells(&self) -> &BTreeMap<StratumKey, DesignCell> {
        &self.cells
    }

    pub fn cell(&self, key: StratumKey) -> Option<&DesignCell> {
        self.cells.get(&key)
    }

    pub fn phase1_size(&self) -> usize {
        self.cells.values().map(|c| c.phase1).sum()
    }

    pub fn phase2_size(&self) -> usize {
        self.cells.values().map(|c| c.phase2).sum()
    }

    fn check_structure(&self) -> Result<()> {
        if self.strata == 0 {
            return Err(Error::InvalidDesign("J must be at least 1".into()));
        }
        for (key, cell) in &self.cells {
            if key.y > 1 || key.s == 0 || key.s > self.strata {
                return Err(Error::InvalidDesign(format!(
                    "cell {key} outside y in {{0,1}}, s in 1..={}",
                    self.strata
                )));
            }
            if cell.phase1 == 0 && cell.phase2 > 0 {
                return Err(Error::EmptyCell { key: *key });
            }
            if cell.phase2 > cell.phase1 {
                return Err(Error::InvalidDesign(format!(
                    "cell {key}: n_ds = {} exceeds N_ds = {}",
                    cell.phase2, cell.phase1
                )));
            }
            if !(cell.pi.is_finite() && (0.0..=1.0).contains(&cell.pi)) {
                return Err(Error::InvalidDesign(format!(
                    "cell {key}: pi = {} outside [0, 1]",
                    cell.pi
                )));
            }
        }
        Ok(())
    }

    /// Checks required before a design may drive estimation: every occupied
    /// cell has `pi` in (0, 1].
    pub fn validate_for_estimation(&self) -> Result<()> {
        self.check_structure()?;
        for (key, cell) in &self.cells {
            if cell.phase1 > 0 && cell.pi <= 0.0 {
                return Err(Error::InvalidDesign(format!(
                    "cell {key} has N_ds = {} but pi = 0; estimation needs pi > 0",
                    cell.phase1
                )));
            }
        }
        Ok(())
    }

    /// Checks the declared counts against observed outcome/strata columns
    /// and the phase-II selection.
    pub fn check_counts(&self, y: &[u8], strata: &[u32], selected: &[usize]) -> Result<()> {
        let (n1, n2) = count_cells(y, strata, selected);
        for (key, &count) in &n1 {
            let cell = self
                .cells
                .get(key)
                .ok_or(Error::MissingCell { key: *key })?;
            if cell.phase1 != count {
                return Err(Error::InvalidDesign(format!(
                    "cell {key}: design says N_ds = {} but phase-I data has {count}",
                    cell.phase1
                )));
            }
            let m = n2.get(key).copied().unwrap_or(0);
            if cell.phase2 != m {
                return Err(Error::InvalidDesign(format!(
                    "cell {key}: design says n_ds = {} but phase-II data has {m}",
                    cell.phase2
                )));
            }
        }
        for (key, cell) in &self.cells {
            if cell.phase1 > 0 && !n1.contains_key(key) {
                return Err(Error::InvalidDesign(format!(
                    "cell {key}: design says N_ds = {} but phase-I data has none",
                    cell.phase1
                )));
            }
        }
        Ok(())
    }

    pub fn declared_pi(&self) -> PiTable {
        self.cells.iter().map(|(k, c)| (*k, c.pi)).collect()
    }

    pub fn pi_table(&self, mode: PiMode) -> Result<PiTable> {
        match mode {
            PiMode::Known => Ok(self.declared_pi()),
            PiMode::Empirical => empirical_pi(self),
        }
    }

    /// Plain-text key/value form. `pi` is written in shortest round-trip
    /// decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# two-phase design\n");
        out.push_str(&format!("strata = {}\n", self.strata));
        out.push_str("# cell = d s N_ds n_ds pi\n");
        for (key, cell) in &self.cells {
            out.push_str(&format!(
                "cell = {} {} {} {} {}\n",
                key.y, key.s, cell.phase1, cell.phase2, cell.pi
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut strata = None;
        let mut cells = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err =
                |msg: &str| Error::Parse(format!("design line {}: {msg}: `{raw}`", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value"))?;
            match key.trim() {
                "strata" | "J" => {
                    strata = Some(
                        value
                            .trim()
                            .parse::<u32>()
                            .map_err(|_| err("bad strata count"))?,
                    );
                }
                "cell" => {
                    let f: Vec<&str> = value.split_whitespace().collect();
                    if f.len() != 5 {
                        return Err(err("cell needs 5 fields: d s N_ds n_ds pi"));
                    }
                    let y = f[0].parse::<u8>().map_err(|_| err("bad d"))?;
                    let s = f[1].parse::<u32>().map_err(|_| err("bad s"))?;
                    let phase1 = f[2].parse::<usize>().map_err(|_| err("bad N_ds"))?;
                    let phase2 = f[3].parse::<usize>().map_err(|_| err("bad n_ds"))?;
                    let pi = parse_decimal(f[4]).ok_or_else(|| err("bad pi"))?;
                    let key = StratumKey::new(y, s);
                    if cells
                        .insert(key, DesignCell { phase1, phase2, pi })
                        .is_some()
                    {
                        return Err(err("duplicate cell"));
                    }
                }
                other => return Err(err(&format!("unknown key `{other}`"))),
            }
        }
        let strata = strata.ok_or_else(|| Error::Parse("design is missing `strata`".into()))?;
        TwoPhaseDesign::new(strata, cells)
    }
}

/// Decimal literal (optionally with exponent); no `inf`/`nan` spellings.
fn parse_decimal(text: &str) -> Option<f64> {
    let ok = text
        .chars()
        .all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'));
    if !ok || !text.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    text.parse::<f64>().ok()
}

/// Phase-I and phase-II cell counts.
pub fn count_cells(
    y: &[u8],
    strata: &[u32],
    selected: &[usize],
) -> (BTreeMap<StratumKey, usize>, BTreeMap<StratumKey, usize>) {
    let mut n1 = BTreeMap::new();
    for (yi, si) in y.iter().zip(strata) {
        *n1.entry(StratumKey::new(*yi, *si)).or_insert(0) += 1;
    }
    let mut n2 = BTreeMap::new();
    for &i in selected {
        *n2.entry(StratumKey::new(y[i], strata[i])).or_insert(0) += 1;
    }
    (n1, n2)
}

/// `n_ds / N_ds` for every cell.
pub fn empirical_pi(design: &TwoPhaseDesign) -> Result<PiTable> {
    let mut out = PiTable::new();
    for (key, cell) in design.cells() {
        if cell.phase1 == 0 {
            if cell.phase2 > 0 {
                return Err(Error::EmptyCell { key: *key });
            }
            continue;
        }
        out.insert(*key, cell.phase2 as f64 / cell.phase1 as f64);
    }
    Ok(out)
}

/// Round half up, used to turn probability-specified designs into quotas.
pub fn round_quota(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Quotas `round(pi * N_ds)` for each cell with a declared probability.
pub fn quotas_from_probabilities(
    counts: &BTreeMap<StratumKey, usize>,
    pi: &PiTable,
) -> Result<BTreeMap<StratumKey, usize>> {
    let mut out = BTreeMap::new();
    for (key, &n) in counts {
        let p = *pi.get(key).ok_or(Error::MissingCell { key: *key })?;
        out.insert(*key, round_quota(p * n as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTwoSample {
    /// Selection indicator per phase-I row.
    pub r: Vec<bool>,
    /// Selected row ids, ascending.
    pub indices: Vec<usize>,
    pub design: TwoPhaseDesign,
}

/// Simple random sampling without replacement within each `(y, s)` cell.
pub fn sample_balanced<R: Rng + ?Sized>(
    y: &[u8],
    strata: &[u32],
    quota: &BTreeMap<StratumKey, usize>,
    rng: &mut R,
) -> Result<PhaseTwoSample> {
    if y.len() != strata.len() {
        return Err(Error::Dimension {
            what: "strata",
            expected: y.len(),
            found: strata.len(),
        });
    }
    let mut members: BTreeMap<StratumKey, Vec<usize>> = BTreeMap::new();
    for (i, (yi, si)) in y.iter().zip(strata).enumerate() {
        if *yi > 1 {
            return Err(Error::InvalidInput("outcome must be 0/1".into()));
        }
        if *si == 0 {
            return Err(Error::InvalidInput("stratum ids start at 1".into()));
        }
        members
            .entry(StratumKey::new(*yi, *si))
            .or_default()
            .push(i);
    }
    let strata_count = strata
        .iter()
        .copied()
        .chain(quota.keys().map(|k| k.s))
        .max()
        .unwrap_or(1);

    for (key, &q) in quota {
        let available = members.get(key).map_or(0, |m| m.len());
        if available == 0 && q > 0 {
            return Err(Error::EmptyCell { key: *key });
        }
        if q > available {
            return Err(Error::InsufficientCell {
                key: *key,
                requested: q,
                available,
            });
        }
    }

    let mut r = vec![false; y.len()];
    let mut cells = BTreeMap::new();
    for (key, rows) in &members {
        let q = quota.get(key).copied().unwrap_or(0);
        for k in rand::seq::index::sample(rng, rows.len(), q) {
            r[rows[k]] = true;
        }
        cells.insert(
            *key,
            DesignCell {
                phase1: rows.len(),
                phase2: q,
                pi: q as f64 / rows.len() as f64,
            },
        );
    }
    let indices = r
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect();
    Ok(PhaseTwoSample {
        r,
        indices,
        design: TwoPhaseDesign::new(strata_count, cells)?,
    })
}

/// Case-control sampling with a single stratum (s = 1).
pub fn sample_case_control<R: Rng + ?Sized>(
    y: &[u8],
    n_cases: usize,
    n_controls: usize,
    rng: &mut R,
) -> Result<PhaseTwoSample> {
    let strata = vec![1u32; y.len()];
    let quota = BTreeMap::from([
        (StratumKey::new(1, 1), n_cases),
        (StratumKey::new(0, 1), n_controls),
    ]);
    sample_balanced(y, &strata, &quota, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nwts_shaped() -> (Vec<u8>, Vec<u32>) {
        // (d, s, count): phase-I cell sizes of an NWTS-shaped cohort
        let mut y = Vec::new();
        let mut s = Vec::new();
        for (d, st, n) in [
            (1u8, 1u32, 415usize),
            (0, 1, 3207),
            (1, 2, 156),
            (0, 2, 250),
        ] {
            y.extend(std::iter::repeat_n(d, n));
            s.extend(std::iter::repeat_n(st, n));
        }
        (y, s)
    }

    #[test]
    fn case_control_selects_all_cases() {
        let mut y = vec![1u8; 600];
        y.extend(vec![0u8; 9400]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = sample_case_control(&y, 600, 600, &mut rng).unwrap();
        assert_eq!(sample.indices.len(), 1200);
        assert!(sample.indices[..600]
            .iter()
            .enumerate()
            .all(|(k, &i)| k == i));
        let d = &sample.design;
        assert_eq!(d.cell(StratumKey::new(1, 1)).unwrap().pi, 1.0);
        assert_eq!(d.cell(StratumKey::new(0, 1)).unwrap().pi, 600.0 / 9400.0);
    }

    #[test]
    fn case_control_boundaries() {
        let y = [1u8, 1, 0, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_case_control(&y, 0, 2, &mut rng).unwrap();
        assert_eq!(s.indices.len(), 2);
        assert!(s.indices.iter().all(|&i| y[i] == 0));
        assert!(s.design.validate_for_estimation().is_err());
        assert!(matches!(
            sample_case_control(&y, 3, 1, &mut rng),
            Err(Error::InsufficientCell {
                requested: 3,
                available: 2,
                ..
            })
        ));
    }

    #[test]
    fn table2_balanced_quotas() {
        let (y, s) = nwts_shaped();
        let (n1, _) = count_cells(&y, &s, &[]);
        let pi = PiTable::from([
            (StratumKey::new(1, 1), 1.0),
            (StratumKey::new(0, 1), 0.086),
            (StratumKey::new(1, 2), 1.0),
            (StratumKey::new(0, 2), 1.0),
        ]);
        let q = quotas_from_probabilities(&n1, &pi).unwrap();
        assert_eq!(q[&StratumKey::new(1, 1)], 415);
        assert_eq!(q[&StratumKey::new(0, 1)], 276);
        assert_eq!(q[&StratumKey::new(1, 2)], 156);
        assert_eq!(q[&StratumKey::new(0, 2)], 250);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample = sample_balanced(&y, &s, &q, &mut rng).unwrap();
        let emp = empirical_pi(&sample.design).unwrap();
        assert_eq!(emp[&StratumKey::new(1, 1)], 1.0);
        assert!((emp[&StratumKey::new(0, 1)] - 0.086_061_739_943_872_8).abs() < 1e-15);
        assert_eq!(emp, sample.design.declared_pi());
    }

    #[test]
    fn full_ascertainment_and_determinism() {
        let (y, s) = nwts_shaped();
        let (n1, _) = count_cells(&y, &s, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let all = sample_balanced(&y, &s, &n1, &mut rng).unwrap();
        assert!(all.r.iter().all(|&v| v));
        assert!(all.design.cells().values().all(|c| c.pi == 1.0));

        let q = BTreeMap::from([(StratumKey::new(0, 1), 100), (StratumKey::new(1, 2), 10)]);
        let a = sample_balanced(&y, &s, &q, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_balanced(&y, &s, &q, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn empty_cell_errors() {
        let y = [0u8, 0, 1];
        let s = [1u32, 1, 1];
        let q = BTreeMap::from([(StratumKey::new(1, 2), 1)]);
        assert!(matches!(
            sample_balanced(&y, &s, &q, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyCell { .. })
        ));
        let cells = BTreeMap::from([(
            StratumKey::new(1, 1),
            DesignCell {
                phase1: 0,
                phase2: 2,
                pi: 0.5,
            },
        )]);
        assert!(matches!(
            TwoPhaseDesign::new(1, cells),
            Err(Error::EmptyCell { .. })
        ));
    }

    #[test]
    fn empirical_pi_ratios() {
        let cells = BTreeMap::from([
            (
                StratumKey::new(0, 1),
                DesignCell {
                    phase1: 100,
                    phase2: 25,
                    pi: 0.3,
                },
            ),
            (
                StratumKey::new(1, 1),
                DesignCell {
                    phase1: 40,
                    phase2: 40,
                    pi: 1.0,
                },
            ),
        ]);
        let d = TwoPhaseDesign::new(1, cells).unwrap();
        let e = empirical_pi(&d).unwrap();
        assert_eq!(e[&StratumKey::new(0, 1)], 0.25);
        assert_eq!(e[&StratumKey::new(1, 1)], 1.0);
        assert_eq!(
            d.pi_table(PiMode::Known).unwrap()[&StratumKey::new(0, 1)],
            0.3
        );
    }

    #[test]
    fn text_round_trip_and_errors() {
        let text = "strata = 2\ncell = 1 1 415 415 1\ncell = 0 1 3207 276 0.086\n# comment\ncell = 0 2 250 250 1\n";
        let d = TwoPhaseDesign::parse(text).unwrap();
        assert_eq!(d.cell(StratumKey::new(0, 1)).unwrap().pi, 0.086);
        assert_eq!(TwoPhaseDesign::parse(&d.to_text()).unwrap(), d);
        assert!(TwoPhaseDesign::parse("strata = 1\ncell = 0 1 10 2 nan\n").is_err());
        assert!(TwoPhaseDesign::parse("strata = 1\ncell = 0 1 10 20 1\n").is_err());
        assert!(TwoPhaseDesign::parse("cell = 0 1 10 2 0.2\n").is_err());
        assert!(TwoPhaseDesign::parse("strata = 1\ncell = 0 3 10 2 0.2\n").is_err());
    }

    #[test]
    fn round_half_up() {
        assert_eq!(round_quota(275.802), 276);
        assert_eq!(round_quota(2.5), 3);
        assert_eq!(round_quota(2.4999), 2);
    }
}
