#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use twophase_gmm::design::{round_quota, sample_balanced, StratumKey, TwoPhaseDesign};
use twophase_gmm::logistic::expit;
use twophase_gmm::model::DesignMatrix;
use twophase_gmm::moments::TwoPhaseData;

/// Simulated two-phase data: phase I has `(1, w)`, phase II adds a binary
/// `v` correlated with `w`. Strata split on the sign of `w`.
pub struct Fixture {
    pub data: TwoPhaseData,
    pub design: TwoPhaseDesign,
    /// Extended design on all phase-I rows.
    pub x_all: DesignMatrix,
}

pub fn full_row(w: f64, v: f64) -> Vec<f64> {
    vec![w, v, w * v]
}

pub fn fixture(n: usize, control_pi: [f64; 2], seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = [-1.5, 0.7, 0.9, -0.4];
    let mut w = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let wi: f64 = rng.sample(StandardNormal);
        let vi = f64::from(u8::from(rng.random::<f64>() < expit(0.8 * wi)));
        let eta = beta[0] + beta[1] * wi + beta[2] * vi + beta[3] * wi * vi;
        y.push(u8::from(rng.random::<f64>() < expit(eta)));
        w.push(wi);
        v.push(vi);
    }
    let strata: Vec<u32> = w.iter().map(|&wi| if wi > 0.0 { 2 } else { 1 }).collect();
    let mut counts = BTreeMap::new();
    for (yi, si) in y.iter().zip(&strata) {
        *counts.entry(StratumKey::new(*yi, *si)).or_insert(0usize) += 1;
    }
    let quota = counts
        .iter()
        .map(|(k, &c)| {
            let q = if k.y == 1 {
                c
            } else {
                round_quota(control_pi[k.s as usize - 1] * c as f64)
            };
            (*k, q)
        })
        .collect();
    let sample = sample_balanced(&y, &strata, &quota, &mut rng).expect("sampling");
    let z =
        DesignMatrix::with_intercept(&w.iter().map(|&wi| vec![wi]).collect::<Vec<_>>()).unwrap();
    let rows: Vec<Vec<f64>> = w.iter().zip(&v).map(|(&a, &b)| full_row(a, b)).collect();
    let x_all = DesignMatrix::with_intercept(&rows).unwrap();
    let data = TwoPhaseData {
        y,
        strata,
        z,
        x: x_all.select_rows(&sample.indices),
        selected: sample.indices,
    };
    Fixture {
        data,
        design: sample.design,
        x_all,
    }
}

/// Full ascertainment of the same population: everyone selected, pi = 1.
pub fn full_ascertainment(f: &Fixture) -> (TwoPhaseData, TwoPhaseDesign) {
    let n = f.data.y.len();
    let all: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = BTreeMap::new();
    for (yi, si) in f.data.y.iter().zip(&f.data.strata) {
        *counts.entry(StratumKey::new(*yi, *si)).or_insert(0usize) += 1;
    }
    let sample = sample_balanced(&f.data.y, &f.data.strata, &counts, &mut rng).unwrap();
    assert_eq!(sample.indices, all);
    let data = TwoPhaseData {
        y: f.data.y.clone(),
        strata: f.data.strata.clone(),
        z: f.data.z.clone(),
        selected: all,
        x: f.x_all.clone(),
    };
    (data, sample.design)
}

pub fn central_difference<F>(f: F, at: &DVector<f64>, h: f64, rows: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut out = DMatrix::zeros(rows, at.len());
    for j in 0..at.len() {
        let mut up = at.clone();
        let mut down = at.clone();
        up[j] += h;
        down[j] -= h;
        out.set_column(j, &((f(&up) - f(&down)) / (2.0 * h)));
    }
    out
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}
