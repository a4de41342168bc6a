//! Primal-dual interior-point solver.
//!
//! Inequalities `h(x) ≤ 0` receive slacks `s > 0` with `h + s = 0`. Each
//! iteration takes an exact Newton step on the perturbed KKT conditions,
//! eliminating the slack and bound-multiplier directions to obtain the
//! symmetric system
//!
//! ```text
//! [ W + J_hᵀ Σ J_h + δ_w I    J_cᵀ   ] [dx]   [ r_x ]
//! [ J_c                      −δ_c I  ] [dλ] = [ −c  ]
//! ```
//!
//! with `Σ = diag(z/s)`. `δ_w` grows until the factorisation shows `n`
//! positive and `m` negative pivots. The barrier parameter follows a monotone
//! schedule. Constraint rows are scaled by `1/max(1, ‖∇c_k(x₀)‖∞)`; reported
//! multipliers are always for the unscaled rows.

mod ldl;

use std::collections::HashMap;

use log::debug;
use thiserror::Error;

pub use ldl::{minimum_degree, ruiz_scaling, Factor, LdlError, Symbolic};

use crate::netmodel::UnbalanceMode;
use crate::opf::{ConstraintKind, Evaluation, NonlinearProgram, OpfError, OpfProblem};
use crate::powerflow::OperatingPoint;

/// Quasi-definite regularisation of the equality block.
const DELTA_C: f64 = 1e-9;
const MAX_REG: f64 = 1e20;
const REFINE_STEPS: usize = 10;
const RUIZ_SWEEPS: usize = 10;
/// Accepted relative residual of a refined KKT solve.
const SOLVE_TOL: f64 = 1e-8;
const KAPPA_SIGMA: f64 = 1e10;
const KAPPA_EPS: f64 = 10.0;
const SLACK_FLOOR: f64 = 1e-2;
const DIVERGENCE: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver setting {name} = {value}")]
    Setting { name: &'static str, value: f64 },
    #[error(transparent)]
    Eval(#[from] OpfError),
    #[error("initial point has length {got}, problem has {expected} variables")]
    StartLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub kkt_tol: f64,
    pub mu_init: f64,
    pub mu_factor: f64,
    pub fraction_to_boundary: f64,
    pub max_iter: usize,
    pub reg_init: f64,
    /// Bound on `Σ |z·h|`, the barrier's bias on the objective.
    pub gap_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            mu_init: 0.1,
            mu_factor: 0.2,
            fraction_to_boundary: 0.995,
            max_iter: 300,
            reg_init: 1e-8,
            gap_tol: 1e-8,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolverError> {
        let checks = [
            ("kkt_tol", self.kkt_tol, self.kkt_tol > 0.0 && self.kkt_tol < 1.0),
            ("mu_init", self.mu_init, self.mu_init > 0.0),
            ("mu_factor", self.mu_factor, self.mu_factor > 0.0 && self.mu_factor < 1.0),
            (
                "fraction_to_boundary",
                self.fraction_to_boundary,
                self.fraction_to_boundary > 0.0 && self.fraction_to_boundary < 1.0,
            ),
            ("max_iter", self.max_iter as f64, self.max_iter > 0),
            ("reg_init", self.reg_init, self.reg_init > 0.0),
            ("gap_tol", self.gap_tol, self.gap_tol > 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(SolverError::Setting { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// The iterates diverged or stalled away from feasibility. `vuf_related`
    /// marks hard-mode runs whose unbalance rows are implicated.
    Infeasible { vuf_related: bool },
    NumericalFailure(String),
}

impl SolveStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, SolveStatus::Converged)
    }

    pub fn label(&self) -> &'static str {
        if self.is_success() {
            "success"
        } else {
            "infeasible-or-nonconverged"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `‖∇f + J_cᵀλ + J_hᵀz‖∞`.
    pub stationarity: f64,
    /// `max(‖c‖∞, ‖max(h, 0)‖∞)`.
    pub feasibility: f64,
    /// `max |z_i·h_i|`.
    pub complementarity: f64,
    /// `Σ |z_i·h_i|`.
    pub gap: f64,
    /// Most negative inequality multiplier (zero if none negative).
    pub min_multiplier: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.stationarity < tol && self.feasibility < tol && self.complementarity < tol
    }

    fn worst(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// Primal-dual point returned by the solver. Multipliers follow the row order
/// of the problem's constraint lists.
#[derive(Debug, Clone)]
pub struct OpfSolution {
    pub x: Vec<f64>,
    /// Equality multipliers (free sign).
    pub lambda: Vec<f64>,
    /// Inequality multipliers (non-negative).
    pub z: Vec<f64>,
    pub status: SolveStatus,
    pub residuals: KktResiduals,
    pub objective: f64,
    pub iterations: usize,
}

impl OpfSolution {
    /// Multipliers keyed by the constraint they belong to.
    pub fn multipliers(&self, prob: &OpfProblem) -> HashMap<ConstraintKind, f64> {
        prob.eq_kinds
            .iter()
            .copied()
            .zip(self.lambda.iter().copied())
            .chain(prob.ineq_kinds.iter().copied().zip(self.z.iter().copied()))
            .collect()
    }
}

/// KKT residuals of `(x, λ, z)` from a fresh evaluation of the program.
pub fn kkt_residuals<P: NonlinearProgram + ?Sized>(
    nlp: &P,
    x: &[f64],
    lambda: &[f64],
    z: &[f64],
) -> Result<KktResiduals, OpfError> {
    let ev = nlp.evaluate(x, lambda, z)?;
    Ok(residuals_of(&ev, lambda, z))
}

fn residuals_of(ev: &Evaluation, lambda: &[f64], z: &[f64]) -> KktResiduals {
    let mut g = ev.grad.clone();
    for &(r, c, v) in &ev.jac_eq {
        g[c] += lambda[r] * v;
    }
    for &(r, c, v) in &ev.jac_ineq {
        g[c] += z[r] * v;
    }
    let inf = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0, f64::max);
    KktResiduals {
        stationarity: inf(&mut g.iter().map(|v| v.abs())),
        feasibility: inf(&mut ev.eq.iter().map(|v| v.abs()).chain(ev.ineq.iter().map(|v| v.max(0.0)))),
        complementarity: inf(&mut ev.ineq.iter().zip(z).map(|(h, z)| (h * z).abs())),
        gap: ev.ineq.iter().zip(z).map(|(h, z)| (h * z).abs()).sum(),
        min_multiplier: z.iter().copied().fold(0.0, f64::min),
    }
}

/// Fixed sparsity of the reduced KKT matrix.
struct KktPattern {
    n: usize,
    m: usize,
    entries: Vec<(usize, usize)>,
    n_hess: usize,
    /// `(ineq row, triplet p, triplet q, doubled)` for `J_hᵀ Σ J_h`.
    pairs: Vec<(usize, usize, usize, bool)>,
    symbolic: Symbolic,
}

impl KktPattern {
    fn new(n: usize, ev: &Evaluation) -> Self {
        let m = ev.eq.len();
        let mut entries: Vec<(usize, usize)> = ev.hess.iter().map(|&(r, c, _)| (r, c)).collect();
        let n_hess = entries.len();
        let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); ev.ineq.len()];
        for (t, &(r, _, _)) in ev.jac_ineq.iter().enumerate() {
            by_row[r].push(t);
        }
        let mut pairs = Vec::new();
        for (r, ts) in by_row.iter().enumerate() {
            for (a, &tp) in ts.iter().enumerate() {
                for &tq in &ts[..=a] {
                    let (cp, cq) = (ev.jac_ineq[tp].1, ev.jac_ineq[tq].1);
                    entries.push((cp.max(cq), cp.min(cq)));
                    pairs.push((r, tp, tq, tp != tq && cp == cq));
                }
            }
        }
        for &(r, c, _) in &ev.jac_eq {
            entries.push((n + r, c));
        }
        let symbolic = Symbolic::new(n + m, &entries);
        debug!("KKT dimension {}, {} entries, nnz(L) = {}", n + m, entries.len(), symbolic.nnz_l());
        Self {
            n,
            m,
            entries,
            n_hess,
            pairs,
            symbolic,
        }
    }

    fn values(&self, ev: &Evaluation, dc: &[f64], dh: &[f64], sigma: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.entries.len());
        v.extend(ev.hess.iter().map(|t| t.2));
        debug_assert_eq!(v.len(), self.n_hess);
        for &(r, tp, tq, doubled) in &self.pairs {
            let w = sigma[r] * dh[r] * dh[r] * ev.jac_ineq[tp].2 * ev.jac_ineq[tq].2;
            v.push(if doubled { 2.0 * w } else { w });
        }
        v.extend(ev.jac_eq.iter().map(|&(r, _, val)| dc[r] * val));
        v
    }
}

struct Iterate {
    x: Vec<f64>,
    s: Vec<f64>,
    lambda: Vec<f64>,
    z: Vec<f64>,
}

fn max_step(v: &[f64], dv: &[f64], tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for (&a, &d) in v.iter().zip(dv) {
        if d < 0.0 {
            alpha = alpha.min(-tau * a / d);
        }
    }
    alpha
}

fn row_scale(n_rows: usize, jac: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut norm = vec![0.0f64; n_rows];
    for &(r, _, v) in jac {
        norm[r] = norm[r].max(v.abs());
    }
    norm.into_iter().map(|g| 1.0 / g.max(1.0)).collect()
}

/// Solves a generic program from `x0`.
pub fn solve_nlp<P: NonlinearProgram + ?Sized>(
    nlp: &P,
    x0: &[f64],
    settings: &SolverSettings,
) -> Result<OpfSolution, SolverError> {
    settings.validate()?;
    let (n, me, mi) = (nlp.n_vars(), nlp.n_eq(), nlp.n_ineq());
    if x0.len() != n {
        return Err(SolverError::StartLength {
            got: x0.len(),
            expected: n,
        });
    }
    let ev0 = nlp.evaluate(x0, &vec![0.0; me], &vec![0.0; mi])?;
    let dc = row_scale(me, &ev0.jac_eq);
    let dh = row_scale(mi, &ev0.jac_ineq);
    let pattern = KktPattern::new(n, &ev0);

    let mut mu = settings.mu_init;
    let mu_min = (settings.kkt_tol.min(settings.gap_tol) / (10.0 * mi.max(1) as f64)).min(mu);
    let s0: Vec<f64> = ev0.ineq.iter().zip(&dh).map(|(h, d)| (-h * d).max(SLACK_FLOOR)).collect();
    let mut it = Iterate {
        x: x0.to_vec(),
        z: s0.iter().map(|s| mu / s).collect(),
        s: s0,
        lambda: vec![0.0; me],
    };
    let unscaled = |it: &Iterate| -> (Vec<f64>, Vec<f64>) {
        (
            it.lambda.iter().zip(&dc).map(|(l, d)| l * d).collect(),
            it.z.iter().zip(&dh).map(|(z, d)| z * d).collect(),
        )
    };

    let mut best: Option<(f64, OpfSolution)> = None;
    let mut delta_last = 0.0;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    for iter in 0..=settings.max_iter {
        iterations = iter;
        let (lu, zu) = unscaled(&it);
        let ev = match nlp.evaluate(&it.x, &lu, &zu) {
            Ok(ev) => ev,
            Err(e) => {
                status = SolveStatus::NumericalFailure(e.to_string());
                break;
            }
        };
        let res = residuals_of(&ev, &lu, &zu);
        let snapshot = |status: SolveStatus| OpfSolution {
            x: it.x.clone(),
            lambda: lu.clone(),
            z: zu.clone(),
            status,
            residuals: res,
            objective: ev.objective,
            iterations: iter,
        };
        if best.as_ref().is_none_or(|(w, _)| res.worst() < *w) {
            best = Some((res.worst(), snapshot(SolveStatus::MaxIterations)));
        }
        debug!(
            "iter {iter:3} obj {:.8e} stat {:.2e} feas {:.2e} comp {:.2e} gap {:.2e} mu {:.1e}",
            ev.objective, res.stationarity, res.feasibility, res.complementarity, res.gap, mu
        );
        if res.within(settings.kkt_tol) && res.gap < settings.gap_tol {
            return Ok(snapshot(SolveStatus::Converged));
        }
        if iter == settings.max_iter {
            break;
        }
        if it.x.iter().any(|v| v.abs() > DIVERGENCE) || it.z.iter().any(|v| *v > DIVERGENCE * DIVERGENCE) {
            status = SolveStatus::Infeasible { vuf_related: false };
            break;
        }

        // Scaled residuals.
        let c: Vec<f64> = ev.eq.iter().zip(&dc).map(|(v, d)| v * d).collect();
        let rh: Vec<f64> = (0..mi).map(|r| ev.ineq[r] * dh[r] + it.s[r]).collect();
        let mut grad_l = ev.grad.clone();
        for &(r, col, v) in &ev.jac_eq {
            grad_l[col] += lu[r] * v;
        }
        let mut grad_lz = grad_l.clone();
        for &(r, col, v) in &ev.jac_ineq {
            grad_lz[col] += zu[r] * v;
        }
        let barrier_err = grad_lz
            .iter()
            .map(|v| v.abs())
            .chain(c.iter().map(|v| v.abs()))
            .chain(rh.iter().map(|v| v.abs()))
            .chain(it.s.iter().zip(&it.z).map(|(s, z)| (s * z - mu).abs()))
            .fold(0.0, f64::max);
        if barrier_err < KAPPA_EPS * mu {
            mu = mu_min.max((settings.mu_factor * mu).min(mu.powf(1.5)));
        }

        let sigma: Vec<f64> = it.s.iter().zip(&it.z).map(|(s, z)| z / s).collect();
        let values = pattern.values(&ev, &dc, &dh, &sigma);
        let mut rhs = vec![0.0; n + me];
        for j in 0..n {
            rhs[j] = -grad_l[j];
        }
        for &(r, col, v) in &ev.jac_ineq {
            rhs[col] -= dh[r] * v * (mu / it.s[r] + sigma[r] * rh[r]);
        }
        for r in 0..me {
            rhs[n + r] = -c[r];
        }

        let (d, delta_w) = match kkt_solve(&pattern, &values, &rhs, delta_last, settings.reg_init) {
            Some(f) => f,
            None => {
                status = SolveStatus::NumericalFailure("inertia correction failed".into());
                break;
            }
        };
        delta_last = delta_w;
        let dx = &d[..n];
        let dl: Vec<f64> = d[n..].to_vec();

        let mut ds: Vec<f64> = rh.iter().map(|v| -v).collect();
        for &(r, col, v) in &ev.jac_ineq {
            ds[r] -= dh[r] * v * dx[col];
        }
        let dz: Vec<f64> = (0..mi).map(|r| mu / it.s[r] - it.z[r] - sigma[r] * ds[r]).collect();

        let tau = settings.fraction_to_boundary.max(1.0 - mu);
        let ap = max_step(&it.s, &ds, tau);
        let ad = max_step(&it.z, &dz, tau);
        for j in 0..n {
            it.x[j] += ap * dx[j];
        }
        for r in 0..mi {
            it.s[r] += ap * ds[r];
            it.z[r] += ad * dz[r];
            let lo = mu / (KAPPA_SIGMA * it.s[r]);
            let hi = KAPPA_SIGMA * mu / it.s[r];
            it.z[r] = it.z[r].clamp(lo, hi.max(lo));
        }
        for r in 0..me {
            it.lambda[r] += ad * dl[r];
        }
        if !it.x.iter().chain(&it.lambda).chain(&it.z).all(|v| v.is_finite()) {
            status = SolveStatus::NumericalFailure("non-finite iterate".into());
            break;
        }
    }

    let (_, mut sol) = best.expect("at least one evaluation");
    if matches!(status, SolveStatus::MaxIterations) && sol.residuals.feasibility > settings.kkt_tol {
        status = SolveStatus::Infeasible { vuf_related: false };
    }
    sol.status = status;
    sol.iterations = iterations;
    Ok(sol)
}

/// Factorises the reduced KKT matrix, raising `δ_w` until the inertia is
/// `(n, m)` and the refined solution reproduces the right-hand side, and
/// returns the direction together with the `δ_w` used.
fn kkt_solve(p: &KktPattern, values: &[f64], rhs: &[f64], delta_last: f64, reg_init: f64) -> Option<(Vec<f64>, f64)> {
    let mut shift = vec![0.0; p.n + p.m];
    for s in shift.iter_mut().skip(p.n) {
        *s = -DELTA_C;
    }
    let mut delta = 0.0;
    loop {
        for s in shift.iter_mut().take(p.n) {
            *s = delta;
        }
        let scale = ldl::ruiz_scaling(p.n + p.m, &p.entries, values, &shift, RUIZ_SWEEPS);
        if let Ok(f) = p.symbolic.factor_scaled(values, &shift, Some(&scale)) {
            if f.inertia() == (p.n, p.m) {
                if let Some(x) = refined_solve(p, values, delta, &f, rhs) {
                    return Some((x, delta));
                }
                debug!("inaccurate KKT solve at delta_w = {delta:.1e}");
            }
        }
        delta = if delta == 0.0 {
            if delta_last > 0.0 {
                (delta_last / 4.0).max(reg_init)
            } else {
                reg_init
            }
        } else {
            2.0 * delta
        };
        if delta > MAX_REG {
            return None;
        }
    }
}

/// Solves with the regularised factor, refining against the matrix without
/// the equality-block regularisation. `None` if the residual stays large.
fn refined_solve(p: &KktPattern, values: &[f64], delta_w: f64, f: &Factor, rhs: &[f64]) -> Option<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let residual = |x: &[f64]| {
        let mut r = ldl::sym_mul(p.n + p.m, &p.entries, values, x);
        for j in 0..p.n {
            r[j] += delta_w * x[j];
        }
        for (ri, bi) in r.iter_mut().zip(rhs) {
            *ri = bi - *ri;
        }
        r
    };
    let mut x = f.solve(rhs);
    let mut r = residual(&x);
    let mut err = norm(&r);
    for _ in 0..REFINE_STEPS {
        if err <= 1e-14 * norm(rhs) {
            break;
        }
        let d = f.solve(&r);
        let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let r_trial = residual(&trial);
        let e_trial = norm(&r_trial);
        if !(e_trial < err) {
            break;
        }
        x = trial;
        r = r_trial;
        err = e_trial;
    }
    // Relative to the size of the terms that produced the right-hand side.
    let ax_scale = norm(rhs).max(norm(&x)).max(1.0);
    (err <= SOLVE_TOL * ax_scale && x.iter().all(|v| v.is_finite())).then_some(x)
}

/// Solves the OPF from a power-flow warm start (or a flat start).
pub fn solve(
    prob: &OpfProblem,
    warm: Option<&OperatingPoint>,
    settings: &SolverSettings,
) -> Result<OpfSolution, SolverError> {
    let x0 = prob.initial_point(warm);
    let mut sol = solve_nlp(prob, &x0, settings)?;
    if let SolveStatus::Infeasible { .. } | SolveStatus::MaxIterations = sol.status {
        if prob.mode == UnbalanceMode::Hard {
            let violated = prob.ineq_kinds.iter().enumerate().any(|(r, k)| {
                matches!(k, ConstraintKind::VufLimit { .. })
                    && (sol.z[r] > 1e6 || prob.eval(&sol.x, &sol.lambda, &sol.z).map_or(true, |ev| ev.ineq[r] > settings.kkt_tol))
            });
            sol.status = SolveStatus::Infeasible { vuf_related: violated };
        } else {
            sol.status = SolveStatus::Infeasible { vuf_related: false };
        }
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x0 − 1)² + (x1 − 2)²  s.t.  x0 + x1 = 2,  x0 ≤ 0.25.
    struct Toy;

    impl NonlinearProgram for Toy {
        fn n_vars(&self) -> usize {
            2
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn n_ineq(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64], _l: &[f64], _z: &[f64]) -> Result<Evaluation, OpfError> {
            Ok(Evaluation {
                objective: (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2),
                grad: vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] - 2.0)],
                eq: vec![x[0] + x[1] - 2.0],
                ineq: vec![x[0] - 0.25],
                jac_eq: vec![(0, 0, 1.0), (0, 1, 1.0)],
                jac_ineq: vec![(0, 0, 1.0)],
                hess: vec![(0, 0, 2.0), (1, 1, 2.0)],
            })
        }
        fn describe_eq(&self, _: usize) -> String {
            "sum".into()
        }
        fn describe_ineq(&self, _: usize) -> String {
            "cap".into()
        }
    }

    #[test]
    fn toy_problem_multipliers() {
        // Unconstrained optimum on the line is (0.5, 1.5); the cap binds at 0.25.
        // Stationarity: 2(x0−1) + λ + z = 0, 2(x1−2) + λ = 0 → λ = 0.5, z = 1.
        let sol = solve_nlp(&Toy, &[0.0, 0.0], &SolverSettings::default()).unwrap();
        assert!(sol.status.is_success(), "{:?}", sol.status);
        assert!((sol.x[0] - 0.25).abs() < 1e-7);
        assert!((sol.x[1] - 1.75).abs() < 1e-7);
        assert!((sol.lambda[0] - 0.5).abs() < 1e-6);
        assert!((sol.z[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn settings_validation() {
        let mut s = SolverSettings::default();
        assert!(s.validate().is_ok());
        s.kkt_tol = 2.0;
        assert!(s.validate().is_err());
        s = SolverSettings {
            mu_factor: 0.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}

