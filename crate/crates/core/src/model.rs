//! Named data columns and the term lists that expand them into design
//! matrices. Column 0 of every design matrix is the intercept.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

pub const INTERCEPT: &str = "(Intercept)";

/// A set of equally long named numeric columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    nrows: usize,
}

impl Frame {
    pub fn new(nrows: usize) -> Self {
        Frame {
            names: Vec::new(),
            columns: Vec::new(),
            nrows,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.nrows {
            return Err(Error::Dimension {
                what: "frame column",
                expected: self.nrows,
                found: values.len(),
            });
        }
        if self.names.contains(&name) {
            return Err(Error::InvalidInput(format!("duplicate column `{name}`")));
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.columns[k].as_slice())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Frame {
        Frame {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            nrows: rows.len(),
        }
    }

    /// Stack `times` copies of the frame on top of each other.
    pub fn repeat(&self, times: usize) -> Frame {
        Frame {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.repeat(times)).collect(),
            nrows: self.nrows * times,
        }
    }
}

/// Product of one or more named columns, written `A:B` in term lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    factors: Vec<String>,
}

impl Term {
    pub fn factors(&self) -> &[String] {
        &self.factors
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.factors.join(":"))
    }
}

/// Intercept plus an ordered list of terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    terms: Vec<Term>,
}

impl ModelSpec {
    /// Parse `"X2 + D1 + X2:D1"`. The intercept is implicit; a bare `1` is
    /// accepted and ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in text.split('+') {
            let raw = raw.trim();
            if raw.is_empty() || raw == "1" {
                continue;
            }
            let factors: Vec<String> = raw.split(':').map(|s| s.trim().to_string()).collect();
            if factors.iter().any(|f| f.is_empty()) {
                return Err(Error::InvalidModel(format!("malformed term `{raw}`")));
            }
            let term = Term { factors };
            if terms.contains(&term) {
                return Err(Error::InvalidModel(format!("duplicate term `{raw}`")));
            }
            terms.push(term);
        }
        Ok(ModelSpec { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Number of design columns, intercept included.
    pub fn ncols(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn column_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain(self.terms.iter().map(|t| t.to_string()))
            .collect()
    }

    pub fn base_columns(&self) -> BTreeSet<String> {
        self.terms
            .iter()
            .flat_map(|t| t.factors.iter().cloned())
            .collect()
    }

    pub fn design(&self, frame: &Frame) -> Result<DesignMatrix> {
        let n = frame.nrows();
        let mut m = DMatrix::from_element(n, self.ncols(), 1.0);
        for (j, term) in self.terms.iter().enumerate() {
            for factor in &term.factors {
                let col = frame.column(factor).ok_or_else(|| {
                    Error::InvalidModel(format!(
                        "term `{term}` references unknown column `{factor}`"
                    ))
                })?;
                for (i, v) in col.iter().enumerate() {
                    m[(i, j + 1)] *= v;
                }
            }
        }
        DesignMatrix::new(m, self.column_names())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        if parts.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", parts.join(" + "))
        }
    }
}

/// N x p design with an all-ones first column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: DMatrix<f64>,
    names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(rows: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != rows.ncols() {
            return Err(Error::Dimension {
                what: "design column names",
                expected: rows.ncols(),
                found: names.len(),
            });
        }
        if rows.ncols() == 0 || rows.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidModel(
                "first design column must be the all-ones intercept".into(),
            ));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "design matrix has non-finite entries".into(),
            ));
        }
        Ok(DesignMatrix { rows, names })
    }

    /// Intercept-only design with `n` rows.
    pub fn intercept_only(n: usize) -> Self {
        DesignMatrix {
            rows: DMatrix::from_element(n, 1, 1.0),
            names: vec![INTERCEPT.to_string()],
        }
    }

    /// Intercept followed by the given covariate columns (row-major input).
    pub fn with_intercept(covariates: &[Vec<f64>]) -> Result<Self> {
        let n = covariates.len();
        let p = covariates.first().map_or(0, |r| r.len()) + 1;
        let mut m = DMatrix::from_element(n, p, 1.0);
        for (i, row) in covariates.iter().enumerate() {
            if row.len() + 1 != p {
                return Err(Error::Dimension {
                    what: "covariate row",
                    expected: p - 1,
                    found: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                m[(i, j + 1)] = *v;
            }
        }
        let names = std::iter::once(INTERCEPT.to_string())
            .chain((1..p).map(|j| format!("x{j}")))
            .collect();
        DesignMatrix::new(m, names)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nrows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.rows.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            rows: self.rows.select_rows(rows),
            names: self.names.clone(),
        }
    }

    /// Full column rank among rows with positive weight (all rows when
    /// `weights` is `None`), judged on the column-scaled Gram matrix.
    pub fn check_full_rank(&self, weights: Option<&[f64]>, what: &str) -> Result<()> {
        let p = self.ncols();
        let kept: Vec<usize> = (0..self.nrows())
            .filter(|&i| weights.is_none_or(|w| w[i] > 0.0))
            .collect();
        let sub = self.rows.select_rows(&kept);
        let mut gram = sub.transpose() * &sub;
        let deficient = || Error::RankDeficient {
            what: what.to_string(),
        };
        if kept.len() < p {
            return Err(deficient());
        }
        let diag: Vec<f64> = (0..p).map(|j| gram[(j, j)]).collect();
        if diag.iter().any(|&d| d <= 0.0) {
            return Err(deficient());
        }
        for i in 0..p {
            for j in 0..p {
                gram[(i, j)] /= (diag[i] * diag[j]).sqrt();
            }
        }
        if linalg::rcond_sym(&gram) < 1e-12 {
            return Err(deficient());
        }
        Ok(())
    }
}
