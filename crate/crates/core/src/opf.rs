//! Nonlinear program for the three-phase OPF with optional unbalance terms.
//!
//! Decision variables, in order:
//! 1. rectangular voltages of every non-substation bus and phase;
//! 2. active and reactive output of each generator phase whose bounds are not
//!    equal (equal bounds make the output a fixed parameter);
//! 3. active and reactive flow leaving each end of each line, per phase.
//!
//! Equalities are written `c(x) = 0` and inequalities `h(x) ≤ 0`. Voltage
//! limits act on the squared magnitude, thermal limits on `p² + q²`, and the
//! hard unbalance limit on `f = VUF²` against the squared limit (%²).

use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::netmodel::{NetworkSpec, PenaltyBasis, Phase, UnbalanceMode};
use crate::network::Grid;
use crate::powerflow::{Injections, OperatingPoint};
use crate::sequence::{self, PhasorSet};

/// Smoothing added under the square root when the penalty is linear in VUF (%²).
pub const VUF_PENALTY_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpfError {
    #[error("generator \"{gen}\" phase {phase}: {field} lower bound {lo} exceeds upper bound {hi}")]
    InfeasibleBounds {
        gen: String,
        phase: Phase,
        field: &'static str,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite value while evaluating {0}")]
    NonFinite(String),
    #[error("unbalance term at bus {bus}: {source}")]
    Unbalance {
        bus: String,
        source: sequence::SequenceError,
    },
    #[error("variable vector has length {got}, layout expects {expected}")]
    Layout { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LineEnd {
    From,
    To,
}

impl fmt::Display for LineEnd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LineEnd::From => "from",
            LineEnd::To => "to",
        })
    }
}

/// What a decision variable represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    VoltageRe { bus: usize, phase: Phase },
    VoltageIm { bus: usize, phase: Phase },
    Pg { gen: usize, phase: Phase },
    Qg { gen: usize, phase: Phase },
    FlowP { line: usize, end: LineEnd, phase: Phase },
    FlowQ { line: usize, end: LineEnd, phase: Phase },
}

/// Constraint identity; each kind owns exactly one multiplier symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    PBalance { bus: usize, phase: Phase },
    QBalance { bus: usize, phase: Phase },
    FlowDefinitionP { line: usize, end: LineEnd, phase: Phase },
    FlowDefinitionQ { line: usize, end: LineEnd, phase: Phase },
    VMagLo { bus: usize, phase: Phase },
    VMagHi { bus: usize, phase: Phase },
    PgLo { gen: usize, phase: Phase },
    PgHi { gen: usize, phase: Phase },
    QgLo { gen: usize, phase: Phase },
    QgHi { gen: usize, phase: Phase },
    Thermal { line: usize, end: LineEnd, phase: Phase },
    VufLimit { bus: usize },
}

/// Dual-variable symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Multiplier {
    /// φ^p, nodal active balance.
    PhiP,
    /// φ^q, nodal reactive balance.
    PhiQ,
    /// σ⁻ / σ⁺, voltage magnitude limits.
    SigmaLo,
    SigmaHi,
    /// δ⁻ / δ⁺, active generation limits.
    DeltaLo,
    DeltaHi,
    /// θ⁻ / θ⁺, reactive generation limits.
    ThetaLo,
    ThetaHi,
    /// η, line thermal limit.
    Eta,
    /// ψ, unbalance limit.
    Psi,
    /// Flow-definition equalities (no economic interpretation).
    FlowDefinition,
}

impl Multiplier {
    /// Multipliers that appear in the nodal price derivation.
    pub const PRICE_SYMBOLS: [Multiplier; 10] = [
        Multiplier::PhiP,
        Multiplier::PhiQ,
        Multiplier::SigmaLo,
        Multiplier::SigmaHi,
        Multiplier::DeltaLo,
        Multiplier::DeltaHi,
        Multiplier::ThetaLo,
        Multiplier::ThetaHi,
        Multiplier::Eta,
        Multiplier::Psi,
    ];

    pub fn symbol(&self) -> &'static str {
        match self {
            Multiplier::PhiP => "phi_p",
            Multiplier::PhiQ => "phi_q",
            Multiplier::SigmaLo => "sigma_lo",
            Multiplier::SigmaHi => "sigma_hi",
            Multiplier::DeltaLo => "delta_lo",
            Multiplier::DeltaHi => "delta_hi",
            Multiplier::ThetaLo => "theta_lo",
            Multiplier::ThetaHi => "theta_hi",
            Multiplier::Eta => "eta",
            Multiplier::Psi => "psi",
            Multiplier::FlowDefinition => "lambda_flow",
        }
    }
}

impl ConstraintKind {
    pub fn multiplier(&self) -> Multiplier {
        match self {
            ConstraintKind::PBalance { .. } => Multiplier::PhiP,
            ConstraintKind::QBalance { .. } => Multiplier::PhiQ,
            ConstraintKind::FlowDefinitionP { .. } | ConstraintKind::FlowDefinitionQ { .. } => {
                Multiplier::FlowDefinition
            }
            ConstraintKind::VMagLo { .. } => Multiplier::SigmaLo,
            ConstraintKind::VMagHi { .. } => Multiplier::SigmaHi,
            ConstraintKind::PgLo { .. } => Multiplier::DeltaLo,
            ConstraintKind::PgHi { .. } => Multiplier::DeltaHi,
            ConstraintKind::QgLo { .. } => Multiplier::ThetaLo,
            ConstraintKind::QgHi { .. } => Multiplier::ThetaHi,
            ConstraintKind::Thermal { .. } => Multiplier::Eta,
            ConstraintKind::VufLimit { .. } => Multiplier::Psi,
        }
    }

    pub fn is_equality(&self) -> bool {
        matches!(
            self,
            ConstraintKind::PBalance { .. }
                | ConstraintKind::QBalance { .. }
                | ConstraintKind::FlowDefinitionP { .. }
                | ConstraintKind::FlowDefinitionQ { .. }
        )
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintKind::PBalance { bus, phase } => write!(f, "p_balance({bus},{phase})"),
            ConstraintKind::QBalance { bus, phase } => write!(f, "q_balance({bus},{phase})"),
            ConstraintKind::FlowDefinitionP { line, end, phase } => {
                write!(f, "flow_definition_p({line},{end},{phase})")
            }
            ConstraintKind::FlowDefinitionQ { line, end, phase } => {
                write!(f, "flow_definition_q({line},{end},{phase})")
            }
            ConstraintKind::VMagLo { bus, phase } => write!(f, "v_mag_lo({bus},{phase})"),
            ConstraintKind::VMagHi { bus, phase } => write!(f, "v_mag_hi({bus},{phase})"),
            ConstraintKind::PgLo { gen, phase } => write!(f, "pg_lo({gen},{phase})"),
            ConstraintKind::PgHi { gen, phase } => write!(f, "pg_hi({gen},{phase})"),
            ConstraintKind::QgLo { gen, phase } => write!(f, "qg_lo({gen},{phase})"),
            ConstraintKind::QgHi { gen, phase } => write!(f, "qg_hi({gen},{phase})"),
            ConstraintKind::Thermal { line, end, phase } => write!(f, "thermal({line},{end},{phase})"),
            ConstraintKind::VufLimit { bus } => write!(f, "vuf_limit({bus})"),
        }
    }
}

/// Either a decision variable or a fixed parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Output {
    Var(usize),
    Fixed(f64),
}

impl Output {
    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            Output::Var(i) => x[i],
            Output::Fixed(v) => v,
        }
    }

    pub fn var(&self) -> Option<usize> {
        match *self {
            Output::Var(i) => Some(i),
            Output::Fixed(_) => None,
        }
    }
}

/// Sparse evaluation of the NLP at one point.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    /// `(row, col, value)`; duplicates are summed.
    pub jac_eq: Vec<(usize, usize, f64)>,
    pub jac_ineq: Vec<(usize, usize, f64)>,
    /// Lower triangle `(row ≥ col)` of the Lagrangian Hessian; duplicates summed.
    pub hess: Vec<(usize, usize, f64)>,
}

/// Interface the interior-point solver works against.
pub trait NonlinearProgram {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    /// Evaluates everything at `x`; the Hessian is that of
    /// `f + λᵀc + zᵀh`. The triplet structure must not depend on the values.
    fn evaluate(&self, x: &[f64], lambda: &[f64], z: &[f64]) -> Result<Evaluation, OpfError>;
    fn describe_eq(&self, row: usize) -> String;
    fn describe_ineq(&self, row: usize) -> String;
}

#[derive(Debug, Clone)]
struct UnbalanceTerm {
    bus: usize,
    vars: [usize; 6],
}

/// Assembled OPF problem. Immutable after [`build_problem`].
#[derive(Debug, Clone)]
pub struct OpfProblem {
    pub grid: Grid,
    pub mode: UnbalanceMode,
    /// Hard limit on `f` (%²).
    pub f_limit: f64,
    pub penalty_weight: f64,
    pub penalty_on: PenaltyBasis,
    pub base_kva: f64,
    pub vars: Vec<VarKind>,
    pub eq_kinds: Vec<ConstraintKind>,
    pub ineq_kinds: Vec<ConstraintKind>,
    /// `[gen][phase]` active and reactive outputs.
    pub pg: Vec<[Output; 3]>,
    pub qg: Vec<[Output; 3]>,
    pub gen_bus: Vec<usize>,
    pub gen_cost: Vec<f64>,
    pub gen_p_bounds: Vec<[(f64, f64); 3]>,
    pub gen_q_bounds: Vec<[(f64, f64); 3]>,
    /// `[line][end][phase]` indices of `p` and `q` flow variables.
    pub flow_p: Vec<[[usize; 3]; 2]>,
    pub flow_q: Vec<[[usize; 3]; 2]>,
    pub vmin: Vec<f64>,
    pub vmax: Vec<f64>,
    pub demand: Vec<[Complex64; 3]>,
    pub unbalance_buses: Vec<usize>,
    unbalance_terms: Vec<UnbalanceTerm>,
}

fn end_index(end: LineEnd) -> usize {
    match end {
        LineEnd::From => 0,
        LineEnd::To => 1,
    }
}

/// Builds the NLP for the network's own unbalance configuration.
pub fn build_problem(net: &NetworkSpec) -> Result<OpfProblem, OpfError> {
    let grid = Grid::new(net);
    let cfg = &net.unbalance;
    let mut vars = Vec::new();
    for i in 0..grid.n_bus {
        if grid.slot[i].is_some() {
            for ph in Phase::ALL {
                vars.push(VarKind::VoltageRe { bus: i, phase: ph });
                vars.push(VarKind::VoltageIm { bus: i, phase: ph });
            }
        }
    }
    debug_assert_eq!(vars.len(), grid.n_voltage_vars());

    let mut pg = Vec::new();
    let mut qg = Vec::new();
    let mut gen_p_bounds = Vec::new();
    let mut gen_q_bounds = Vec::new();
    for (g, gen) in net.generators.iter().enumerate() {
        let mut prow = [Output::Fixed(0.0); 3];
        let mut qrow = [Output::Fixed(0.0); 3];
        let mut pb = [(0.0, 0.0); 3];
        let mut qb = [(0.0, 0.0); 3];
        for ph in Phase::ALL {
            let (pmin, pmax) = gen.p_bounds(ph);
            let (qmin, qmax) = gen.q_bounds(ph);
            for (field, lo, hi) in [("p", pmin, pmax), ("q", qmin, qmax)] {
                if lo > hi {
                    return Err(OpfError::InfeasibleBounds {
                        gen: gen.id.clone(),
                        phase: ph,
                        field,
                        lo,
                        hi,
                    });
                }
            }
            pb[ph.index()] = (pmin, pmax);
            qb[ph.index()] = (qmin, qmax);
            if gen.balanced && ph != Phase::A {
                prow[ph.index()] = prow[0];
                qrow[ph.index()] = qrow[0];
                continue;
            }
            prow[ph.index()] = if pmin < pmax {
                vars.push(VarKind::Pg { gen: g, phase: ph });
                Output::Var(vars.len() - 1)
            } else {
                Output::Fixed(pmin)
            };
            qrow[ph.index()] = if qmin < qmax {
                vars.push(VarKind::Qg { gen: g, phase: ph });
                Output::Var(vars.len() - 1)
            } else {
                Output::Fixed(qmin)
            };
        }
        pg.push(prow);
        qg.push(qrow);
        gen_p_bounds.push(pb);
        gen_q_bounds.push(qb);
    }

    let mut flow_p = Vec::new();
    let mut flow_q = Vec::new();
    for l in 0..grid.branches.len() {
        let mut fp = [[0; 3]; 2];
        let mut fq = [[0; 3]; 2];
        for end in [LineEnd::From, LineEnd::To] {
            for ph in Phase::ALL {
                vars.push(VarKind::FlowP { line: l, end, phase: ph });
                fp[end_index(end)][ph.index()] = vars.len() - 1;
                vars.push(VarKind::FlowQ { line: l, end, phase: ph });
                fq[end_index(end)][ph.index()] = vars.len() - 1;
            }
        }
        flow_p.push(fp);
        flow_q.push(fq);
    }

    let mut eq_kinds = Vec::new();
    for i in 0..grid.n_bus {
        for ph in Phase::ALL {
            eq_kinds.push(ConstraintKind::PBalance { bus: i, phase: ph });
            eq_kinds.push(ConstraintKind::QBalance { bus: i, phase: ph });
        }
    }
    for l in 0..grid.branches.len() {
        for end in [LineEnd::From, LineEnd::To] {
            for ph in Phase::ALL {
                eq_kinds.push(ConstraintKind::FlowDefinitionP { line: l, end, phase: ph });
                eq_kinds.push(ConstraintKind::FlowDefinitionQ { line: l, end, phase: ph });
            }
        }
    }

    let mut ineq_kinds = Vec::new();
    for i in 0..grid.n_bus {
        if grid.slot[i].is_some() {
            for ph in Phase::ALL {
                ineq_kinds.push(ConstraintKind::VMagLo { bus: i, phase: ph });
                ineq_kinds.push(ConstraintKind::VMagHi { bus: i, phase: ph });
            }
        }
    }
    for g in 0..pg.len() {
        for ph in Phase::ALL {
            if net.generators[g].balanced && ph != Phase::A {
                continue;
            }
            if pg[g][ph.index()].var().is_some() {
                ineq_kinds.push(ConstraintKind::PgLo { gen: g, phase: ph });
                ineq_kinds.push(ConstraintKind::PgHi { gen: g, phase: ph });
            }
            if qg[g][ph.index()].var().is_some() {
                ineq_kinds.push(ConstraintKind::QgLo { gen: g, phase: ph });
                ineq_kinds.push(ConstraintKind::QgHi { gen: g, phase: ph });
            }
        }
    }
    for l in 0..grid.branches.len() {
        for end in [LineEnd::From, LineEnd::To] {
            for ph in Phase::ALL {
                ineq_kinds.push(ConstraintKind::Thermal { line: l, end, phase: ph });
            }
        }
    }

    let unbalance_buses: Vec<usize> = cfg
        .buses
        .iter()
        .map(|b| net.bus_index(b).expect("validated subset"))
        .collect();
    let unbalance_terms: Vec<UnbalanceTerm> = unbalance_buses
        .iter()
        .map(|&bus| {
            let base = grid.vvar(bus, 0).expect("substation excluded from subset");
            UnbalanceTerm {
                bus,
                vars: [base, base + 1, base + 2, base + 3, base + 4, base + 5],
            }
        })
        .collect();
    if cfg.mode == UnbalanceMode::Hard {
        for t in &unbalance_terms {
            ineq_kinds.push(ConstraintKind::VufLimit { bus: t.bus });
        }
    }

    Ok(OpfProblem {
        mode: cfg.mode,
        f_limit: cfg.vuf_limit * cfg.vuf_limit,
        penalty_weight: cfg.penalty_weight,
        penalty_on: cfg.penalty_on,
        base_kva: net.base.base_kva,
        vars,
        eq_kinds,
        ineq_kinds,
        pg,
        qg,
        gen_bus: net
            .generators
            .iter()
            .map(|g| net.bus_index(&g.bus).unwrap())
            .collect(),
        gen_cost: net.generators.iter().map(|g| g.cost).collect(),
        gen_p_bounds,
        gen_q_bounds,
        flow_p,
        flow_q,
        vmin: net.buses.iter().map(|b| b.vmin).collect(),
        vmax: net.buses.iter().map(|b| b.vmax).collect(),
        demand: net.demand(),
        unbalance_buses,
        unbalance_terms,
        grid,
    })
}

/// A voltage entry that is either a pair of decision variables or the fixed
/// substation phasor.
#[derive(Clone, Copy)]
struct Slot {
    v: Complex64,
    idx: Option<usize>,
}

/// Pushes the lower-triangle contribution of `w·u_r·u_c`.
fn push_bilinear(hess: &mut Vec<(usize, usize, f64)>, r: usize, c: usize, w: f64) {
    if r == c {
        hess.push((r, r, 2.0 * w));
    } else {
        hess.push((r.max(c), r.min(c), w));
    }
}

impl OpfProblem {
    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    fn slot(&self, x: &[f64], bus: usize, phase: usize) -> Slot {
        match self.grid.vvar(bus, phase) {
            Some(o) => Slot {
                v: Complex64::new(x[o], x[o + 1]),
                idx: Some(o),
            },
            None => Slot {
                v: self.grid.v_source[phase],
                idx: None,
            },
        }
    }

    pub fn voltages(&self, x: &[f64]) -> Vec<[Complex64; 3]> {
        self.grid.voltages_from_vars(&x[..self.grid.n_voltage_vars()])
    }

    pub fn phasors(&self, x: &[f64], bus: usize) -> PhasorSet {
        PhasorSet::from_array([0, 1, 2].map(|p| self.slot(x, bus, p).v))
    }

    /// Total generation cost (€ over one hour) excluding any penalty.
    pub fn generation_cost(&self, x: &[f64]) -> f64 {
        let mut cost = 0.0;
        for (g, row) in self.pg.iter().enumerate() {
            for out in row {
                cost += self.gen_cost[g] * self.base_kva * out.value(x);
            }
        }
        cost
    }

    /// Total active losses (pu) implied by the flow variables.
    pub fn losses(&self, x: &[f64]) -> f64 {
        self.flow_p
            .iter()
            .map(|ends| ends.iter().flatten().map(|&i| x[i]).sum::<f64>())
            .sum()
    }

    /// Index of the balance equality for `(bus, phase)`.
    pub fn balance_row(&self, bus: usize, phase: Phase, reactive: bool) -> usize {
        6 * bus + 2 * phase.index() + usize::from(reactive)
    }

    /// Index of the flow-definition equality for one line end and phase.
    pub fn flow_row(&self, line: usize, end: LineEnd, phase: usize, reactive: bool) -> usize {
        6 * self.grid.n_bus + 12 * line + 6 * end_index(end) + 2 * phase + usize::from(reactive)
    }

    /// Starting point from a power-flow solution (or flat voltages).
    pub fn initial_point(&self, warm: Option<&OperatingPoint>) -> Vec<f64> {
        let mut x = vec![0.0; self.n_vars()];
        let v = match warm {
            Some(op) => op.voltage_arrays(),
            None => self.grid.flat_voltages(),
        };
        x[..self.grid.n_voltage_vars()].copy_from_slice(&self.grid.vars_from_voltages(&v));
        for l in 0..self.grid.branches.len() {
            let (sf, st) = self.grid.branch_flows(l, &v);
            for p in 0..3 {
                x[self.flow_p[l][0][p]] = sf[p].re;
                x[self.flow_q[l][0][p]] = sf[p].im;
                x[self.flow_p[l][1][p]] = st[p].re;
                x[self.flow_q[l][1][p]] = st[p].im;
            }
        }
        // Generators: the substation covers the net outflow, others sit at mid-range
        // unless free (then at maximum).
        for g in 0..self.pg.len() {
            for p in 0..3 {
                if let Output::Var(i) = self.pg[g][p] {
                    let (lo, hi) = self.gen_p_bounds[g][p];
                    x[i] = if self.gen_bus[g] == self.grid.substation {
                        let out = self.grid.net_outflow(self.grid.substation, &v);
                        (out[p].re + self.demand[self.grid.substation][p].re).clamp(lo, hi)
                    } else if self.gen_cost[g] == 0.0 {
                        hi
                    } else {
                        0.0f64.clamp(lo, hi)
                    };
                }
                if let Output::Var(i) = self.qg[g][p] {
                    let (lo, hi) = self.gen_q_bounds[g][p];
                    x[i] = if self.gen_bus[g] == self.grid.substation {
                        let out = self.grid.net_outflow(self.grid.substation, &v);
                        (out[p].im + self.demand[self.grid.substation][p].im).clamp(lo, hi)
                    } else {
                        0.0f64.clamp(lo, hi)
                    };
                }
            }
        }
        x
    }

    /// Net injections (generation minus demand) implied by the dispatch in `x`.
    pub fn injections(&self, x: &[f64]) -> Injections {
        let mut inj: Vec<[Complex64; 3]> = self.demand.iter().map(|d| d.map(|s| -s)).collect();
        for g in 0..self.pg.len() {
            for p in 0..3 {
                inj[self.gen_bus[g]][p] += Complex64::new(self.pg[g][p].value(x), self.qg[g][p].value(x));
            }
        }
        Injections(inj)
    }

    /// Operating point described by the voltage part of `x`.
    pub fn operating_point(&self, x: &[f64]) -> OperatingPoint {
        OperatingPoint::from_voltages(&self.grid, &self.voltages(x))
    }

    /// Number of unbalance terms (constraints in hard mode, penalties in soft mode).
    pub fn n_unbalance_terms(&self) -> usize {
        self.unbalance_terms.len()
    }

    /// Unbalance penalty value at `x` (€/h); zero unless in soft mode.
    pub fn penalty(&self, x: &[f64]) -> Result<f64, OpfError> {
        if self.mode != UnbalanceMode::Soft {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for t in &self.unbalance_terms {
            let f = self.f_at(x, t.bus)?;
            total += self.penalty_weight
                * match self.penalty_on {
                    PenaltyBasis::F => f,
                    PenaltyBasis::Vuf => (f + VUF_PENALTY_SMOOTHING).sqrt(),
                };
        }
        Ok(total)
    }

    fn f_at(&self, x: &[f64], bus: usize) -> Result<f64, OpfError> {
        sequence::f_metric(&self.phasors(x, bus)).map_err(|source| OpfError::Unbalance {
            bus: bus.to_string(),
            source,
        })
    }

    /// Objective, constraints and derivatives at `x`. `lambda` and `z` weight
    /// the constraint Hessians; the objective enters with weight one.
    pub fn eval(&self, x: &[f64], lambda: &[f64], z: &[f64]) -> Result<Evaluation, OpfError> {
        if x.len() != self.n_vars() {
            return Err(OpfError::Layout {
                got: x.len(),
                expected: self.n_vars(),
            });
        }
        let n = self.n_vars();
        let mut ev = Evaluation {
            grad: vec![0.0; n],
            eq: vec![0.0; self.eq_kinds.len()],
            ineq: vec![0.0; self.ineq_kinds.len()],
            ..Default::default()
        };

        // Objective: generation cost plus soft-mode penalty.
        ev.objective = self.generation_cost(x);
        for (g, row) in self.pg.iter().enumerate() {
            for out in row {
                if let Some(i) = out.var() {
                    ev.grad[i] += self.gen_cost[g] * self.base_kva;
                }
            }
        }
        if self.mode == UnbalanceMode::Soft {
            for t in &self.unbalance_terms {
                let v = self.phasors(x, t.bus);
                let err = |source| OpfError::Unbalance {
                    bus: t.bus.to_string(),
                    source,
                };
                let f = sequence::f_metric(&v).map_err(err)?;
                let g = sequence::grad_f(&v).map_err(err)?.to_real();
                let h = sequence::hess_f(&v).map_err(err)?;
                let c = self.penalty_weight;
                let (val, d1, d2) = match self.penalty_on {
                    PenaltyBasis::F => (f, 1.0, 0.0),
                    PenaltyBasis::Vuf => {
                        let s = (f + VUF_PENALTY_SMOOTHING).sqrt();
                        (s, 0.5 / s, -0.25 / (s * s * s))
                    }
                };
                ev.objective += c * val;
                for k in 0..6 {
                    ev.grad[t.vars[k]] += c * d1 * g[k];
                    for m in 0..=k {
                        ev.hess.push((t.vars[k], t.vars[m], c * (d1 * h[k][m] + d2 * g[k] * g[m])));
                    }
                }
            }
        }

        self.eval_equalities(x, lambda, &mut ev);
        self.eval_inequalities(x, z, &mut ev)?;

        if !ev.objective.is_finite() {
            return Err(OpfError::NonFinite("objective".into()));
        }
        if let Some(r) = ev.eq.iter().position(|v| !v.is_finite()) {
            return Err(OpfError::NonFinite(self.eq_kinds[r].to_string()));
        }
        if let Some(r) = ev.ineq.iter().position(|v| !v.is_finite()) {
            return Err(OpfError::NonFinite(self.ineq_kinds[r].to_string()));
        }
        Ok(ev)
    }

    fn eval_equalities(&self, x: &[f64], lambda: &[f64], ev: &mut Evaluation) {
        let grid = &self.grid;
        // Nodal balances: Σ flows leaving − generation + demand = 0.
        for i in 0..grid.n_bus {
            for ph in 0..3 {
                let rp = self.balance_row(i, Phase::from_index(ph), false);
                let rq = rp + 1;
                let mut vp = self.demand[i][ph].re;
                let mut vq = self.demand[i][ph].im;
                for &(b, is_from) in &grid.incident[i] {
                    let e = if is_from { 0 } else { 1 };
                    let (ip, iq) = (self.flow_p[b][e][ph], self.flow_q[b][e][ph]);
                    vp += x[ip];
                    vq += x[iq];
                    ev.jac_eq.push((rp, ip, 1.0));
                    ev.jac_eq.push((rq, iq, 1.0));
                }
                for g in 0..self.pg.len() {
                    if self.gen_bus[g] != i {
                        continue;
                    }
                    let (pout, qout) = (self.pg[g][ph], self.qg[g][ph]);
                    vp -= pout.value(x);
                    vq -= qout.value(x);
                    if let Some(j) = pout.var() {
                        ev.jac_eq.push((rp, j, -1.0));
                    }
                    if let Some(j) = qout.var() {
                        ev.jac_eq.push((rq, j, -1.0));
                    }
                }
                ev.eq[rp] = vp;
                ev.eq[rq] = vq;
            }
        }

        // Flow definitions: p − Re(S) = 0, q − Im(S) = 0 with
        // S = V_a·conj(Σ_k y_ak (V_k − V_k')) expanded into bilinear terms.
        let mut row = 6 * grid.n_bus;
        for (l, br) in grid.branches.iter().enumerate() {
            for (e, (near, far)) in [(br.from, br.to), (br.to, br.from)].into_iter().enumerate() {
                for ph in 0..3 {
                    let rp = row;
                    let rq = row + 1;
                    debug_assert_eq!(rp, self.flow_row(l, [LineEnd::From, LineEnd::To][e], ph, false));
                    row += 2;
                    let ip = self.flow_p[l][e][ph];
                    let iq = self.flow_q[l][e][ph];
                    ev.jac_eq.push((rp, ip, 1.0));
                    ev.jac_eq.push((rq, iq, 1.0));
                    let (lp, lq) = (lambda.get(rp).copied().unwrap_or(0.0), lambda.get(rq).copied().unwrap_or(0.0));
                    let a = self.slot(x, near, ph);
                    let mut s = Complex64::new(0.0, 0.0);
                    for k in 0..3 {
                        let c = br.y[ph][k].conj();
                        for (b, sign) in [(self.slot(x, near, k), 1.0), (self.slot(x, far, k), -1.0)] {
                            let cc = sign * c;
                            s += cc * a.v * b.v.conj();
                            bilinear_term(ev, rp, rq, cc, a, b, -lp, -lq);
                        }
                    }
                    ev.eq[rp] = x[ip] - s.re;
                    ev.eq[rq] = x[iq] - s.im;
                }
            }
        }
    }

    fn eval_inequalities(&self, x: &[f64], z: &[f64], ev: &mut Evaluation) -> Result<(), OpfError> {
        for (r, kind) in self.ineq_kinds.iter().enumerate() {
            let zr = z.get(r).copied().unwrap_or(0.0);
            match *kind {
                ConstraintKind::VMagLo { bus, phase } | ConstraintKind::VMagHi { bus, phase } => {
                    let o = self.grid.vvar(bus, phase.index()).unwrap();
                    let m2 = x[o] * x[o] + x[o + 1] * x[o + 1];
                    let (sign, val) = if matches!(kind, ConstraintKind::VMagLo { .. }) {
                        (-1.0, self.vmin[bus] * self.vmin[bus] - m2)
                    } else {
                        (1.0, m2 - self.vmax[bus] * self.vmax[bus])
                    };
                    ev.ineq[r] = val;
                    ev.jac_ineq.push((r, o, sign * 2.0 * x[o]));
                    ev.jac_ineq.push((r, o + 1, sign * 2.0 * x[o + 1]));
                    ev.hess.push((o, o, sign * 2.0 * zr));
                    ev.hess.push((o + 1, o + 1, sign * 2.0 * zr));
                }
                ConstraintKind::PgLo { gen, phase } | ConstraintKind::PgHi { gen, phase } => {
                    let i = self.pg[gen][phase.index()].var().unwrap();
                    let (lo, hi) = self.gen_p_bounds[gen][phase.index()];
                    if matches!(kind, ConstraintKind::PgLo { .. }) {
                        ev.ineq[r] = lo - x[i];
                        ev.jac_ineq.push((r, i, -1.0));
                    } else {
                        ev.ineq[r] = x[i] - hi;
                        ev.jac_ineq.push((r, i, 1.0));
                    }
                }
                ConstraintKind::QgLo { gen, phase } | ConstraintKind::QgHi { gen, phase } => {
                    let i = self.qg[gen][phase.index()].var().unwrap();
                    let (lo, hi) = self.gen_q_bounds[gen][phase.index()];
                    if matches!(kind, ConstraintKind::QgLo { .. }) {
                        ev.ineq[r] = lo - x[i];
                        ev.jac_ineq.push((r, i, -1.0));
                    } else {
                        ev.ineq[r] = x[i] - hi;
                        ev.jac_ineq.push((r, i, 1.0));
                    }
                }
                ConstraintKind::Thermal { line, end, phase } => {
                    let e = end_index(end);
                    let ip = self.flow_p[line][e][phase.index()];
                    let iq = self.flow_q[line][e][phase.index()];
                    let s = self.grid.branches[line].s_rating;
                    ev.ineq[r] = x[ip] * x[ip] + x[iq] * x[iq] - s * s;
                    ev.jac_ineq.push((r, ip, 2.0 * x[ip]));
                    ev.jac_ineq.push((r, iq, 2.0 * x[iq]));
                    ev.hess.push((ip, ip, 2.0 * zr));
                    ev.hess.push((iq, iq, 2.0 * zr));
                }
                ConstraintKind::VufLimit { bus } => {
                    let t = self
                        .unbalance_terms
                        .iter()
                        .find(|t| t.bus == bus)
                        .expect("unbalance term for limit");
                    let v = self.phasors(x, bus);
                    let err = |source| OpfError::Unbalance {
                        bus: bus.to_string(),
                        source,
                    };
                    let f = sequence::f_metric(&v).map_err(err)?;
                    let g = sequence::grad_f(&v).map_err(err)?.to_real();
                    let h = sequence::hess_f(&v).map_err(err)?;
                    ev.ineq[r] = f - self.f_limit;
                    for k in 0..6 {
                        ev.jac_ineq.push((r, t.vars[k], g[k]));
                        for m in 0..=k {
                            ev.hess.push((t.vars[k], t.vars[m], zr * h[k][m]));
                        }
                    }
                }
                _ => unreachable!("equality kind in inequality list"),
            }
        }
        Ok(())
    }
}

/// Adds the derivatives of `T = c·V_a·conj(V_b)` to rows `rp` (real part) and
/// `rq` (imaginary part) with the sign convention `row = … − T`, plus the
/// Hessian of `wr·Re(T) + wi·Im(T)`.
#[allow(clippy::too_many_arguments)]
fn bilinear_term(ev: &mut Evaluation, rp: usize, rq: usize, c: Complex64, a: Slot, b: Slot, wr: f64, wi: f64) {
    // T = c·(A + jB), A = xa·xb + ya·yb, B = ya·xb − xa·yb.
    let (xa, ya, xb, yb) = (a.v.re, a.v.im, b.v.re, b.v.im);
    let mut push_grad = |idx: usize, da: f64, db: f64| {
        // Re T = cr·A − ci·B, Im T = ci·A + cr·B; rows carry −T.
        ev.jac_eq.push((rp, idx, -(c.re * da - c.im * db)));
        ev.jac_eq.push((rq, idx, -(c.im * da + c.re * db)));
    };
    if let Some(ia) = a.idx {
        push_grad(ia, xb, -yb);
        push_grad(ia + 1, yb, xb);
    }
    if let Some(ib) = b.idx {
        push_grad(ib, xa, ya);
        push_grad(ib + 1, ya, -xa);
    }
    if let (Some(ia), Some(ib)) = (a.idx, b.idx) {
        let alpha = wr * c.re + wi * c.im;
        let beta = -wr * c.im + wi * c.re;
        push_bilinear(&mut ev.hess, ia, ib, alpha);
        push_bilinear(&mut ev.hess, ia + 1, ib + 1, alpha);
        push_bilinear(&mut ev.hess, ia + 1, ib, beta);
        push_bilinear(&mut ev.hess, ia, ib + 1, -beta);
    }
}

impl NonlinearProgram for OpfProblem {
    fn n_vars(&self) -> usize {
        self.vars.len()
    }

    fn n_eq(&self) -> usize {
        self.eq_kinds.len()
    }

    fn n_ineq(&self) -> usize {
        self.ineq_kinds.len()
    }

    fn evaluate(&self, x: &[f64], lambda: &[f64], z: &[f64]) -> Result<Evaluation, OpfError> {
        self.eval(x, lambda, z)
    }

    fn describe_eq(&self, row: usize) -> String {
        self.eq_kinds[row].to_string()
    }

    fn describe_ineq(&self, row: usize) -> String {
        self.ineq_kinds[row].to_string()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::netmodel::UnbalanceConfig;

    pub const THREE_BUS: &str = r#"{
        "base_kva": 50, "base_volt_ln": 240,
        "buses": [{"id": "s"}, {"id": "1"}, {"id": "2"}],
        "lines": [
          {"from": "s", "to": "1",
           "z_real": [[0.05,0.015,0.014],[0.015,0.05,0.015],[0.014,0.015,0.05]],
           "z_imag": [[0.03,0.012,0.011],[0.012,0.03,0.012],[0.011,0.012,0.03]],
           "s_rating": 60},
          {"from": "1", "to": "2",
           "z_real": [[0.06,0.02,0.02],[0.02,0.06,0.02],[0.02,0.02,0.06]],
           "z_imag": [[0.03,0.01,0.01],[0.01,0.03,0.01],[0.01,0.01,0.03]],
           "s_rating": 40}],
        "loads": [{"bus": "1", "p": [6, 3, 4], "q": [2, 1, 1]},
                  {"bus": "2", "p": [5, 1, 3], "q": [1.5, 0.3, 1]}],
        "gens": [
          {"bus": "s", "phases": ["a","b","c"], "pmin": [-80,-80,-80], "pmax": [80,80,80],
           "qmin": [-80,-80,-80], "qmax": [80,80,80], "cost": 1.0, "is_substation": true},
          {"id": "pv", "bus": "2", "phases": ["b"], "pmin": [0,0,0], "pmax": [0,2.5,0],
           "qmin": [0,-1,0], "qmax": [0,1,0], "cost": 0.0}]
    }"#;

    fn net(cfg: UnbalanceConfig) -> NetworkSpec {
        NetworkSpec::from_json_str(THREE_BUS).unwrap().with_unbalance(cfg).unwrap()
    }

    #[test]
    fn mode_gates_unbalance_rows() {
        let p = build_problem(&net(UnbalanceConfig::none())).unwrap();
        assert!(!p.ineq_kinds.iter().any(|k| matches!(k, ConstraintKind::VufLimit { .. })));
        let p = build_problem(&net(UnbalanceConfig::hard(1.0))).unwrap();
        let rows: Vec<_> = p
            .ineq_kinds
            .iter()
            .filter(|k| matches!(k, ConstraintKind::VufLimit { .. }))
            .collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(p.f_limit, 1.0);
    }

    #[test]
    fn absent_phases_are_fixed_parameters() {
        let p = build_problem(&net(UnbalanceConfig::none())).unwrap();
        assert_eq!(p.pg[1][0], Output::Fixed(0.0));
        assert!(p.pg[1][1].var().is_some());
        assert!(p.qg[1][1].var().is_some());
    }

    #[test]
    fn every_price_symbol_is_housed() {
        let p = build_problem(&net(UnbalanceConfig::hard(1.0))).unwrap();
        let housed: std::collections::BTreeSet<Multiplier> = p
            .eq_kinds
            .iter()
            .chain(p.ineq_kinds.iter())
            .map(|k| k.multiplier())
            .collect();
        for m in Multiplier::PRICE_SYMBOLS {
            assert!(housed.contains(&m), "{m:?} has no constraint");
        }
    }

    #[test]
    fn zero_load_flat_start_balances() {
        let mut n = net(UnbalanceConfig::none());
        for l in &mut n.loads {
            l.p = [0.0; 3];
            l.q = [0.0; 3];
        }
        let p = build_problem(&n).unwrap();
        let mut x = p.initial_point(None);
        // No-load point: generators off.
        for row in p.pg.iter().chain(p.qg.iter()) {
            for o in row {
                if let Some(i) = o.var() {
                    x[i] = 0.0;
                }
            }
        }
        let ev = p.eval(&x, &[], &[]).unwrap();
        assert!(ev.eq.iter().all(|r| r.abs() < 1e-14));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_problem(&net(UnbalanceConfig::soft(1.0))).unwrap();
        let b = build_problem(&net(UnbalanceConfig::soft(1.0))).unwrap();
        assert_eq!(a.vars, b.vars);
        assert_eq!(a.eq_kinds, b.eq_kinds);
        assert_eq!(a.ineq_kinds, b.ineq_kinds);
    }

    fn dense(rows: usize, cols: usize, t: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; cols]; rows];
        for &(r, c, v) in t {
            m[r][c] += v;
        }
        m
    }

    fn lagrangian_grad(p: &OpfProblem, x: &[f64], lam: &[f64], z: &[f64]) -> Vec<f64> {
        let ev = p.eval(x, lam, z).unwrap();
        let mut g = ev.grad.clone();
        for &(r, c, v) in &ev.jac_eq {
            g[c] += lam[r] * v;
        }
        for &(r, c, v) in &ev.jac_ineq {
            g[c] += z[r] * v;
        }
        g
    }

    fn perturbed_point(p: &OpfProblem) -> Vec<f64> {
        let mut x = p.initial_point(None);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += 0.01 * ((i as f64 * 0.7).sin());
        }
        x
    }

    fn check_derivatives(cfg: UnbalanceConfig) {
        let p = build_problem(&net(cfg)).unwrap();
        let x = perturbed_point(&p);
        let n = p.n_vars();
        let lam: Vec<f64> = (0..p.eq_kinds.len()).map(|i| ((i as f64) * 1.3).cos()).collect();
        let z: Vec<f64> = (0..p.ineq_kinds.len()).map(|i| 0.5 + ((i as f64) * 0.9).sin().abs()).collect();
        let ev = p.eval(&x, &lam, &z).unwrap();
        let je = dense(p.eq_kinds.len(), n, &ev.jac_eq);
        let ji = dense(p.ineq_kinds.len(), n, &ev.jac_ineq);
        let h = dense(n, n, &ev.hess);
        let step = 1e-6;
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let ep = p.eval(&xp, &lam, &z).unwrap();
            let em = p.eval(&xm, &lam, &z).unwrap();
            let fd_obj = (ep.objective - em.objective) / (2.0 * step);
            assert!((fd_obj - ev.grad[j]).abs() < 1e-5 * (1.0 + fd_obj.abs()), "objective grad {j}");
            for r in 0..p.eq_kinds.len() {
                let fd = (ep.eq[r] - em.eq[r]) / (2.0 * step);
                assert!((fd - je[r][j]).abs() < 1e-6 * (1.0 + fd.abs()), "{} col {j}", p.eq_kinds[r]);
            }
            for r in 0..p.ineq_kinds.len() {
                let fd = (ep.ineq[r] - em.ineq[r]) / (2.0 * step);
                assert!((fd - ji[r][j]).abs() < 1e-5 * (1.0 + fd.abs()), "{} col {j}", p.ineq_kinds[r]);
            }
            let gp = lagrangian_grad(&p, &xp, &lam, &z);
            let gm = lagrangian_grad(&p, &xm, &lam, &z);
            for i in j..n {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                assert!((fd - h[i][j]).abs() < 1e-4 * (1.0 + fd.abs()), "hessian ({i},{j}): {fd} vs {}", h[i][j]);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences_hard() {
        check_derivatives(UnbalanceConfig::hard(1.0));
    }

    #[test]
    fn derivatives_match_finite_differences_soft() {
        check_derivatives(UnbalanceConfig::soft(2.0));
        let mut cfg = UnbalanceConfig::soft(2.0);
        cfg.penalty_on = PenaltyBasis::Vuf;
        check_derivatives(cfg);
    }

    #[test]
    fn inverted_generator_bounds_fail_at_build() {
        let mut n = net(UnbalanceConfig::none());
        n.generators[1].pmin[1] = 1.0;
        n.generators[1].pmax[1] = 0.5;
        assert!(matches!(build_problem(&n), Err(OpfError::InfeasibleBounds { .. })));
    }
}
