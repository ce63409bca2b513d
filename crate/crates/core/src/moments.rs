//! Stacked estimating functions `U_N(beta) = (U1, U2)` and their Jacobians.
//!
//! `U1` carries the phase-I reduced-model fit `theta_hat` into the extended
//! model through inverse-probability-weighted phase-II rows:
//!
//! ```text
//! U1(beta) = (1/N) sum_i R_i f(x_i, z_i; beta, theta_hat) / pi_i
//! f        = (expit(beta'x) - expit(theta'z)) z
//! ```
//!
//! `U2` is the phase-II logistic score with the case-control offset
//! `log(pi(1,s)/pi(0,s))` added to each row's linear predictor, averaged
//! over the `n` phase-II rows. `theta_hat` is fixed data here; its sampling
//! variability is handled in [`crate::asymptotics`].

use nalgebra::{DMatrix, DVector};

use crate::design::{PiMode, PiTable, StratumKey};
use crate::error::{Error, Result};
use crate::logistic::{expit, expit_prime, expit_second};
use crate::model::DesignMatrix;

/// Phase-I outcome, strata and reduced design for all `N` subjects, plus
/// the extended design for the selected rows.
#[derive(Debug, Clone)]
pub struct TwoPhaseData {
    pub y: Vec<u8>,
    pub strata: Vec<u32>,
    /// `N x q1`
    pub z: DesignMatrix,
    /// Ascending phase-I row ids of the phase-II sample.
    pub selected: Vec<usize>,
    /// `n x q2`, row `k` belongs to phase-I row `selected[k]`.
    pub x: DesignMatrix,
}

impl TwoPhaseData {
    pub fn phase1_size(&self) -> usize {
        self.y.len()
    }

    pub fn phase2_size(&self) -> usize {
        self.selected.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n1 = self.y.len();
        let dim = |what, expected, found| Error::Dimension {
            what,
            expected,
            found,
        };
        if self.strata.len() != n1 {
            return Err(dim("strata", n1, self.strata.len()));
        }
        if self.z.nrows() != n1 {
            return Err(dim("reduced design rows", n1, self.z.nrows()));
        }
        if self.x.nrows() != self.selected.len() {
            return Err(dim(
                "extended design rows",
                self.selected.len(),
                self.x.nrows(),
            ));
        }
        if self.selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "selected ids must be strictly ascending".into(),
            ));
        }
        if self.selected.last().is_some_and(|&i| i >= n1) {
            return Err(Error::InvalidInput(
                "selected id beyond phase-I size".into(),
            ));
        }
        if self.y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("outcome must be 0/1".into()));
        }
        Ok(())
    }

    pub fn selected_y(&self) -> Vec<u8> {
        self.selected.iter().map(|&i| self.y[i]).collect()
    }

    /// Stack `times` copies of the whole two-phase dataset.
    pub fn repeat(&self, times: usize) -> TwoPhaseData {
        let n1 = self.y.len();
        let all: Vec<usize> = (0..times).flat_map(|_| 0..n1).collect();
        let sel: Vec<usize> = (0..times).flat_map(|_| 0..self.selected.len()).collect();
        TwoPhaseData {
            y: self.y.repeat(times),
            strata: self.strata.repeat(times),
            z: self.z.select_rows(&all),
            selected: (0..times)
                .flat_map(|t| self.selected.iter().map(move |&i| i + t * n1))
                .collect(),
            x: self.x.select_rows(&sel),
        }
    }
}

/// Which estimating functions are stacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MomentBlocks {
    /// `(U1, U2)`: over-identified whenever `q1 > 0`.
    #[default]
    Stacked,
    /// `U2` alone: exactly identified.
    PhaseTwoOnly,
}

/// `U_N` and its derivatives at one `beta`.
#[derive(Debug, Clone)]
pub struct MomentValue {
    pub u1: DVector<f64>,
    pub u2: DVector<f64>,
    /// `dU/dbeta`, `(q1 + q2) x q2` (top block absent for phase-II-only).
    pub g: DMatrix<f64>,
    /// `dU1/dtheta`, `q1 x q1`.
    pub v1: DMatrix<f64>,
}

impl MomentValue {
    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.u1, &self.u2)
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// `(expit(beta'x) - expit(theta'z)) z`.
pub fn moment_f(x: &[f64], z: &[f64], beta: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
    let bx: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    let tz: f64 = z.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
    let d = expit(bx) - expit(tz);
    DVector::from_iterator(z.len(), z.iter().map(|v| v * d))
}

/// Everything needed to evaluate `U_N` for fixed data and `theta_hat`.
#[derive(Debug, Clone)]
pub struct MomentContext {
    blocks: MomentBlocks,
    pi_mode: PiMode,
    n_phase1: usize,
    theta_hat: DVector<f64>,
    /// Selected rows only.
    x: DMatrix<f64>,
    z_sel: DMatrix<f64>,
    y_sel: DVector<f64>,
    pi_sel: DVector<f64>,
    offset_sel: DVector<f64>,
    /// All phase-I rows.
    z_all: DMatrix<f64>,
    y_all: DVector<f64>,
    selected: Vec<usize>,
    x_names: Vec<String>,
    z_names: Vec<String>,
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * w[i])
}

impl MomentContext {
    pub fn new(
        data: &TwoPhaseData,
        pi: &PiTable,
        pi_mode: PiMode,
        theta_hat: DVector<f64>,
        blocks: MomentBlocks,
    ) -> Result<Self> {
        data.validate()?;
        if theta_hat.len() != data.z.ncols() {
            return Err(Error::Dimension {
                what: "theta_hat",
                expected: data.z.ncols(),
                found: theta_hat.len(),
            });
        }
        if data.selected.is_empty() {
            return Err(Error::InvalidInput("empty phase-II sample".into()));
        }
        let lookup = |key: StratumKey| -> Result<f64> {
            let p = *pi.get(&key).ok_or(Error::MissingCell { key })?;
            if p > 0.0 && p <= 1.0 {
                Ok(p)
            } else {
                Err(Error::InvalidDesign(format!(
                    "cell {key}: pi = {p} must lie in (0, 1]"
                )))
            }
        };
        let n = data.selected.len();
        let mut pi_sel = DVector::zeros(n);
        let mut offset_sel = DVector::zeros(n);
        for (k, &i) in data.selected.iter().enumerate() {
            let s = data.strata[i];
            pi_sel[k] = lookup(StratumKey::new(data.y[i], s))?;
            offset_sel[k] = (lookup(StratumKey::new(1, s))? / lookup(StratumKey::new(0, s))?).ln();
        }
        let y_sel = DVector::from_iterator(n, data.selected.iter().map(|&i| f64::from(data.y[i])));
        Ok(MomentContext {
            blocks,
            pi_mode,
            n_phase1: data.y.len(),
            theta_hat,
            x: data.x.matrix().clone(),
            z_sel: data.z.matrix().select_rows(&data.selected),
            y_sel,
            pi_sel,
            offset_sel,
            z_all: data.z.matrix().clone(),
            y_all: DVector::from_iterator(data.y.len(), data.y.iter().map(|&v| f64::from(v))),
            selected: data.selected.clone(),
            x_names: data.x.names().to_vec(),
            z_names: data.z.names().to_vec(),
        })
    }

    pub fn blocks(&self) -> MomentBlocks {
        self.blocks
    }

    pub fn with_blocks(&self, blocks: MomentBlocks) -> Self {
        MomentContext {
            blocks,
            ..self.clone()
        }
    }

    pub fn pi_mode(&self) -> PiMode {
        self.pi_mode
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    pub fn with_theta(&self, theta: DVector<f64>) -> Self {
        MomentContext {
            theta_hat: theta,
            ..self.clone()
        }
    }

    /// `N`
    pub fn phase1_size(&self) -> usize {
        self.n_phase1
    }

    /// `n`
    pub fn phase2_size(&self) -> usize {
        self.selected.len()
    }

    /// `q1`: dimension of the reduced model.
    pub fn q1(&self) -> usize {
        self.z_all.ncols()
    }

    /// `q2`: dimension of the extended model.
    pub fn q2(&self) -> usize {
        self.x.ncols()
    }

    /// Number of stacked moments.
    pub fn n_moments(&self) -> usize {
        match self.blocks {
            MomentBlocks::Stacked => self.q1() + self.q2(),
            MomentBlocks::PhaseTwoOnly => self.q2(),
        }
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn x_selected(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z_selected(&self) -> &DMatrix<f64> {
        &self.z_sel
    }

    pub fn y_selected(&self) -> &DVector<f64> {
        &self.y_sel
    }

    pub fn pi_selected(&self) -> &DVector<f64> {
        &self.pi_sel
    }

    pub fn offset_selected(&self) -> &DVector<f64> {
        &self.offset_sel
    }

    pub fn z_all(&self) -> &DMatrix<f64> {
        &self.z_all
    }

    pub fn y_all(&self) -> &DVector<f64> {
        &self.y_all
    }

    fn check_beta(&self, beta: &DVector<f64>) {
        assert_eq!(beta.len(), self.q2(), "beta has wrong length");
    }

    /// `U1` at an arbitrary `theta`.
    pub fn u1_at(&self, beta: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.check_beta(beta);
        let eta_x = &self.x * beta;
        let eta_z = &self.z_sel * theta;
        let w = DVector::from_fn(self.x.nrows(), |k, _| {
            (expit(eta_x[k]) - expit(eta_z[k])) / self.pi_sel[k]
        });
        self.z_sel.tr_mul(&w) / self.n_phase1 as f64
    }

    pub fn u1(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.u1_at(beta, &self.theta_hat)
    }

    pub fn u2(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.check_beta(beta);
        let eta = &self.x * beta + &self.offset_sel;
        let r = DVector::from_fn(self.x.nrows(), |k, _| self.y_sel[k] - expit(eta[k]));
        self.x.tr_mul(&r) / self.phase2_size() as f64
    }

    /// Stacked moment vector for the configured blocks.
    pub fn eval(&self, beta: &DVector<f64>) -> DVector<f64> {
        match self.blocks {
            MomentBlocks::Stacked => stack(&self.u1(beta), &self.u2(beta)),
            MomentBlocks::PhaseTwoOnly => self.u2(beta),
        }
    }

    /// `dU1/dtheta` at `theta`; it does not depend on `beta`.
    pub fn v1_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let eta_z = &self.z_sel * theta;
        let w = DVector::from_fn(self.x.nrows(), |k, _| {
            expit_prime(eta_z[k]) / self.pi_sel[k]
        });
        -(self.z_sel.tr_mul(&scale_rows(&self.z_sel, &w))) / self.n_phase1 as f64
    }

    /// `sum_k w_k d2U_k / dbeta dbeta'` for a weight vector over the stacked
    /// moments; with `w = C U` this is the part of the Hessian of `Q_N / 2`
    /// that Gauss-Newton drops.
    pub fn curvature(&self, beta: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        self.check_beta(beta);
        assert_eq!(w.len(), self.n_moments(), "weight has wrong length");
        let eta_x = &self.x * beta;
        let (w1, w2) = match self.blocks {
            MomentBlocks::Stacked => (Some(w.rows(0, self.q1())), w.rows(self.q1(), self.q2())),
            MomentBlocks::PhaseTwoOnly => (None, w.rows(0, self.q2())),
        };
        let x_w2 = &self.x * w2;
        let n1 = self.n_phase1 as f64;
        let n2 = self.phase2_size() as f64;
        let mut row_w = DVector::from_fn(self.x.nrows(), |k, _| {
            -expit_second(eta_x[k] + self.offset_sel[k]) * x_w2[k] / n2
        });
        if let Some(w1) = w1 {
            let z_w1 = &self.z_sel * w1;
            for k in 0..row_w.len() {
                row_w[k] += expit_second(eta_x[k]) * z_w1[k] / (self.pi_sel[k] * n1);
            }
        }
        self.x.tr_mul(&scale_rows(&self.x, &row_w))
    }

    pub fn jacobians(&self, beta: &DVector<f64>) -> MomentValue {
        self.check_beta(beta);
        let n1 = self.n_phase1 as f64;
        let n2 = self.phase2_size() as f64;
        let eta_x = &self.x * beta;
        let eta_off = &eta_x + &self.offset_sel;

        let hw = DVector::from_fn(self.x.nrows(), |k, _| expit_prime(eta_off[k]));
        let bottom = -(self.x.tr_mul(&scale_rows(&self.x, &hw))) / n2;

        let (u1, g, v1) = match self.blocks {
            MomentBlocks::Stacked => {
                let hz = DVector::from_fn(self.x.nrows(), |k, _| {
                    expit_prime(eta_x[k]) / self.pi_sel[k]
                });
                let top = self.z_sel.tr_mul(&scale_rows(&self.x, &hz)) / n1;
                let mut g = DMatrix::zeros(self.q1() + self.q2(), self.q2());
                g.rows_mut(0, self.q1()).copy_from(&top);
                g.rows_mut(self.q1(), self.q2()).copy_from(&bottom);
                (self.u1(beta), g, self.v1_at(&self.theta_hat))
            }
            MomentBlocks::PhaseTwoOnly => (DVector::zeros(0), bottom, DMatrix::zeros(0, 0)),
        };
        MomentValue {
            u1,
            u2: self.u2(beta),
            g,
            v1,
        }
    }
}
