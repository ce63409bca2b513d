//! GMM objective `Q_N(beta) = U_N' C U_N`, its Gauss-Newton minimizer and
//! the iterated optimal-weighting scheme.

use nalgebra::{DMatrix, DVector};

use crate::asymptotics::{self, PhaseOneCorrection};
use crate::baselines;
use crate::error::{Error, Result};
use crate::linalg::{self, Inversion};
use crate::moments::MomentContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Identity,
    Optimal,
    User,
}

#[derive(Debug, Clone)]
pub struct WeightingMatrix {
    c: DMatrix<f64>,
    kind: WeightKind,
}

impl WeightingMatrix {
    /// Checks symmetry and eigenvalues >= -1e-10.
    pub fn new(c: DMatrix<f64>, kind: WeightKind) -> Result<Self> {
        if !linalg::is_symmetric(&c, 1e-10) {
            return Err(Error::InvalidWeighting("matrix is not symmetric".into()));
        }
        let eig = linalg::sym_eigen(&c);
        let scale = 1.0_f64.max(linalg::max_abs(&c));
        if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale) {
            return Err(Error::InvalidWeighting(
                "matrix is not positive semidefinite".into(),
            ));
        }
        Ok(WeightingMatrix {
            c: linalg::symmetrize(&c),
            kind,
        })
    }

    pub fn identity(m: usize) -> Self {
        WeightingMatrix {
            c: DMatrix::identity(m, m),
            kind: WeightKind::Identity,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn scaled(&self, a: f64) -> Self {
        WeightingMatrix {
            c: &self.c * a,
            kind: WeightKind::User,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub tol_outer: f64,
    pub max_outer: usize,
    /// Box `|beta|_inf <= bound`.
    pub bound: f64,
    pub correction: PhaseOneCorrection,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            tol: 1e-9,
            max_iter: 200,
            tol_outer: 1e-8,
            max_outer: 50,
            bound: 30.0,
            correction: PhaseOneCorrection::Derived,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub outer: usize,
    pub beta: DVector<f64>,
    pub qn: f64,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub beta_hat: DVector<f64>,
    pub c_used: WeightingMatrix,
    pub qn_value: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub inner_trace: Vec<TraceEntry>,
    pub converged: bool,
    /// `|G' C U|_inf` at `beta_hat`.
    pub first_order: f64,
    /// `|U|_inf` at `beta_hat`.
    pub moment_norm: f64,
}

pub fn eval_qn(ctx: &MomentContext, beta: &DVector<f64>, c: &WeightingMatrix) -> Result<f64> {
    if beta.len() != ctx.q2() {
        return Err(Error::Dimension {
            what: "beta",
            expected: ctx.q2(),
            found: beta.len(),
        });
    }
    if c.dim() != ctx.n_moments() {
        return Err(Error::Dimension {
            what: "weighting matrix",
            expected: ctx.n_moments(),
            found: c.dim(),
        });
    }
    let u = ctx.eval(beta);
    Ok(u.dot(&(c.matrix() * &u)).max(0.0))
}

fn first_order(ctx: &MomentContext, beta: &DVector<f64>, c: &WeightingMatrix) -> (f64, f64) {
    let mv = ctx.jacobians(beta);
    let u = ctx.eval(beta);
    let grad = mv.g.transpose() * (c.matrix() * &u);
    (linalg::max_abs_vec(&grad), linalg::max_abs_vec(&u))
}

/// Minimizes `Q_N` from `beta_start` with step halving. Stops when the
/// accepted update is below `opts.tol` in max-norm.
pub fn minimize_qn(
    ctx: &MomentContext,
    c: &WeightingMatrix,
    beta_start: &DVector<f64>,
    opts: &GmmOptions,
) -> Result<GmmFit> {
    minimize_qn_tagged(ctx, c, beta_start, opts, 0)
}

fn minimize_qn_tagged(
    ctx: &MomentContext,
    c: &WeightingMatrix,
    beta_start: &DVector<f64>,
    opts: &GmmOptions,
    outer: usize,
) -> Result<GmmFit> {
    if beta_start.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite starting value".into()));
    }
    let mut beta = beta_start.clone();
    let mut q = eval_qn(ctx, &beta, c)?;
    let mut trace = vec![TraceEntry {
        outer,
        beta: beta.clone(),
        qn: q,
    }];
    let cm = c.matrix();

    for iter in 0..opts.max_iter {
        let g = ctx.jacobians(&beta).g;
        let u = ctx.eval(&beta);
        let cg = cm * &g;
        let normal = linalg::symmetrize(&(g.transpose() * &cg));
        let grad = cg.transpose() * &u;
        let rcond = linalg::rcond_sym(&normal);
        if rcond < linalg::RCOND_FLOOR {
            return Err(Error::SingularNormalEquations { rcond });
        }
        // Newton step with the exact Hessian when it is positive definite,
        // otherwise the Gauss-Newton step.
        let hessian = linalg::symmetrize(&(&normal + ctx.curvature(&beta, &(cm * &u))));
        let step = linalg::spd_solve(&hessian, &grad)
            .filter(|_| linalg::rcond_sym(&hessian) >= linalg::RCOND_FLOOR)
            .or_else(|| linalg::spd_solve(&normal, &grad))
            .or_else(|| normal.clone().lu().solve(&grad))
            .ok_or(Error::SingularNormalEquations { rcond })?;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let trial = &beta - &step * scale;
            let qt = eval_qn(ctx, &trial, c)?;
            if qt < q || (qt <= q && scale == 1.0) {
                accepted = Some((trial, qt));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, qn)) = accepted else {
            // No decrease at working precision: we are at the minimum if the
            // proposed update is already negligible.
            if linalg::max_abs_vec(&step) < opts.tol.sqrt() {
                return Ok(done(ctx, beta, c, q, outer, iter, trace));
            }
            return Err(Error::NonConvergence {
                what: "Gauss-Newton line search",
                iterations: iter,
                criterion: linalg::max_abs_vec(&grad),
            });
        };
        let update = linalg::max_abs_vec(&(&next - &beta));
        let max_abs = linalg::max_abs_vec(&next);
        if max_abs > opts.bound {
            return Err(Error::BoundHit {
                max_abs_coef: max_abs,
                bound: opts.bound,
            });
        }
        beta = next;
        q = qn;
        trace.push(TraceEntry {
            outer,
            beta: beta.clone(),
            qn: q,
        });
        if update < opts.tol {
            return Ok(done(ctx, beta, c, q, outer, iter + 1, trace));
        }
    }
    Err(Error::NonConvergence {
        what: "Gauss-Newton",
        iterations: opts.max_iter,
        criterion: q,
    })
}

fn done(
    ctx: &MomentContext,
    beta: DVector<f64>,
    c: &WeightingMatrix,
    q: f64,
    outer: usize,
    iterations: usize,
    trace: Vec<TraceEntry>,
) -> GmmFit {
    let (fo, un) = first_order(ctx, &beta, c);
    GmmFit {
        beta_hat: beta,
        c_used: c.clone(),
        qn_value: q,
        outer_iterations: outer + 1,
        inner_iterations: iterations,
        inner_trace: trace,
        converged: true,
        first_order: fo,
        moment_norm: un,
    }
}

/// Weight from an estimated variance of `sqrt(N) U_N`, inverted with the
/// ridge / pseudo-inverse fallbacks of [`linalg::invert_psd`].
pub fn optimal_c_from_variance(s: &DMatrix<f64>) -> (WeightingMatrix, Inversion) {
    let (inv, how) = linalg::invert_psd(s);
    if !matches!(how, Inversion::Exact) {
        log::warn!("moment variance is ill-conditioned; inverted via {how:?}");
    }
    (
        WeightingMatrix {
            c: linalg::symmetrize(&inv),
            kind: WeightKind::Optimal,
        },
        how,
    )
}

/// `(D Omega D')^-1` at `beta`.
pub fn optimal_c(
    ctx: &MomentContext,
    beta: &DVector<f64>,
    correction: PhaseOneCorrection,
) -> Result<WeightingMatrix> {
    let var = asymptotics::moment_variance(ctx, beta, correction)?;
    Ok(optimal_c_from_variance(&var.s).0)
}

/// Identity-weighted fit from the weighted-likelihood warm start, then
/// re-weighting with the optimal `C` until `beta` stops moving.
pub fn iterated_gmm(ctx: &MomentContext, opts: &GmmOptions) -> Result<GmmFit> {
    let start = baselines::wl_coefficients(ctx)?;
    iterated_gmm_from(ctx, &start, opts)
}

/// Rounds of the outer map `T(b) = argmin U' C(b) U`, started at `b`.
struct OuterMap<'a> {
    ctx: &'a MomentContext,
    opts: &'a GmmOptions,
    rounds: usize,
    inner: usize,
    trace: Vec<TraceEntry>,
}

impl OuterMap<'_> {
    fn apply(&mut self, beta: &DVector<f64>) -> Result<GmmFit> {
        self.rounds += 1;
        let c = optimal_c(self.ctx, beta, self.opts.correction)?;
        let mut fit = minimize_qn_tagged(self.ctx, &c, beta, self.opts, self.rounds)?;
        self.trace.append(&mut fit.inner_trace);
        self.inner += fit.inner_iterations;
        Ok(fit)
    }

    fn finish(self, mut fit: GmmFit) -> GmmFit {
        fit.inner_trace = self.trace;
        fit.inner_iterations = self.inner;
        fit.outer_iterations = self.rounds + 1;
        fit
    }
}

/// Differences of iterates and residuals kept by Anderson mixing.
const ANDERSON_MEMORY: usize = 5;

/// Iterated GMM from `start`. The outer map `T` is a contraction whose rate
/// approaches one along weakly identified directions, so its fixed point
/// is found with Anderson mixing over the last few rounds instead of plain
/// substitution. The fixed point is unchanged; each evaluation of `T`
/// counts against `max_outer`.
pub fn iterated_gmm_from(
    ctx: &MomentContext,
    start: &DVector<f64>,
    opts: &GmmOptions,
) -> Result<GmmFit> {
    let identity = WeightingMatrix::identity(ctx.n_moments());
    let mut first = minimize_qn_tagged(ctx, &identity, start, opts, 0)?;
    let mut map = OuterMap {
        ctx,
        opts,
        rounds: 0,
        inner: first.inner_iterations,
        trace: std::mem::take(&mut first.inner_trace),
    };

    let mut current = first.beta_hat;
    // (iterate, residual) pairs, newest last
    let mut history: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    let mut delta = f64::INFINITY;
    while map.rounds < opts.max_outer {
        let fit = match map.apply(&current) {
            Ok(fit) => fit,
            Err(e) => match history.last() {
                // mixed point was unusable: restart from the last plain image
                Some((x, g)) if history.len() > 1 => {
                    current = x + g;
                    history.clear();
                    continue;
                }
                _ => return Err(e),
            },
        };
        let residual = &fit.beta_hat - &current;
        delta = linalg::max_abs_vec(&residual);
        if delta < opts.tol_outer {
            return Ok(map.finish(fit));
        }
        history.push((current.clone(), residual));
        if history.len() > ANDERSON_MEMORY + 1 {
            history.remove(0);
        }
        current = anderson_mix(&history)
            .filter(|b| b.iter().all(|v| v.is_finite()) && linalg::max_abs_vec(b) <= opts.bound)
            .unwrap_or(fit.beta_hat);
    }
    Err(Error::NonConvergence {
        what: "iterated GMM",
        iterations: opts.max_outer,
        criterion: delta,
    })
}

/// Next iterate `x + g - (dX + dG) gamma` with `gamma` the least-squares
/// fit of the newest residual `g` on residual differences `dG`.
fn anderson_mix(history: &[(DVector<f64>, DVector<f64>)]) -> Option<DVector<f64>> {
    let (x, g) = history.last()?;
    let m = history.len() - 1;
    if m == 0 {
        return None;
    }
    let p = x.len();
    let mut dx = DMatrix::zeros(p, m);
    let mut dg = DMatrix::zeros(p, m);
    for k in 0..m {
        dx.set_column(k, &(&history[k + 1].0 - &history[k].0));
        dg.set_column(k, &(&history[k + 1].1 - &history[k].1));
    }
    let svd = dg.clone().svd(true, true);
    let eps = 1e-10 * svd.singular_values.max();
    let gamma = svd.solve(g, eps).ok()?;
    Some(x + g - (dx + dg) * gamma)
}
