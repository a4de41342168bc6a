//! Scenario execution: power-flow warm start, OPF build, interior-point
//! solve, price decomposition and the optional sensitivity report.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;
use vudlmp_core::dlmp::{self, DlmpBreakdown, SensitivityEntry};
use vudlmp_core::ipsolver::{self, KktResiduals, SolveStatus, SolverError, SolverSettings};
use vudlmp_core::netmodel::{load_network, NetworkError, NetworkSpec, PerUnitBase, UnbalanceConfig, UnbalanceMode};
use vudlmp_core::opf::{self, OpfError};
use vudlmp_core::powerflow::{self, Injections};

use crate::config::{ConfigError, ScenarioConfig, SweepKind};
use crate::report;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Build(#[from] OpfError),
    #[error(transparent)]
    Settings(#[from] SolverError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("no sweep section in the scenario config")]
    NoSweep,
}

/// Stage at which a run stopped short of a priced solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Solve,
    Decompose,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Solve => "solve",
            Stage::Decompose => "decompose",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Success,
    Failed { stage: Stage, reason: String },
}

impl RunStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, RunStatus::Success)
    }

    /// Value of the `status` column.
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Success => "success",
            RunStatus::Failed { .. } => "infeasible-or-nonconverged",
        }
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub powerflow_ms: f64,
    pub build_ms: f64,
    pub solve_ms: f64,
    pub decompose_ms: f64,
    pub sensitivity_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("powerflow", self.powerflow_ms),
            ("build", self.build_ms),
            ("solve", self.solve_ms),
            ("decompose", self.decompose_ms),
            ("sensitivity", self.sensitivity_ms),
            ("total", self.total_ms),
        ]
    }
}

/// Outcome of one OPF run. Headline figures are `None` unless the solve
/// succeeded.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub case_id: String,
    /// Sweep value (weight multiple or limit) that produced this run.
    pub weight: Option<f64>,
    pub unbalance: UnbalanceConfig,
    pub base: PerUnitBase,
    pub status: RunStatus,
    pub total_gen_cost_eur: Option<f64>,
    pub total_losses_kw: Option<f64>,
    pub highest_vuf_pct: Option<f64>,
    pub vuf_bus: Option<String>,
    /// Objective including any unbalance penalty (€).
    pub objective: f64,
    pub iterations: usize,
    pub residuals: KktResiduals,
    pub warm_started: bool,
    pub prices: Vec<DlmpBreakdown>,
    pub sensitivities: Vec<SensitivityEntry>,
    pub sensitivity_error: Option<String>,
    pub timings: StageTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn describe(status: &SolveStatus) -> String {
    match status {
        SolveStatus::Converged => "converged".into(),
        SolveStatus::MaxIterations => "iteration limit reached".into(),
        SolveStatus::Infeasible { vuf_related: true } => "infeasible, unbalance limit implicated".into(),
        SolveStatus::Infeasible { vuf_related: false } => "infeasible".into(),
        SolveStatus::NumericalFailure(m) => format!("numerical failure: {m}"),
    }
}

/// Runs one case without touching the file system.
pub fn solve_case(
    case_id: &str,
    net: &NetworkSpec,
    settings: &SolverSettings,
    with_sensitivity: bool,
) -> Result<ScenarioResult, ScenarioError> {
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let warm = match powerflow::solve_pf(net, &Injections::nominal(net)) {
        Ok(op) => Some(op),
        Err(e) => {
            warn!("{case_id}: power-flow warm start failed ({e}); starting flat");
            None
        }
    };
    timings.powerflow_ms = ms(t);

    let t = Instant::now();
    let prob = opf::build_problem(net)?;
    timings.build_ms = ms(t);

    let t = Instant::now();
    let sol = ipsolver::solve(&prob, warm.as_ref(), settings)?;
    timings.solve_ms = ms(t);
    info!("{case_id}: {} after {} iterations", describe(&sol.status), sol.iterations);

    let mut result = ScenarioResult {
        case_id: case_id.to_string(),
        weight: None,
        unbalance: net.unbalance.clone(),
        base: net.base,
        status: RunStatus::Success,
        total_gen_cost_eur: None,
        total_losses_kw: None,
        highest_vuf_pct: None,
        vuf_bus: None,
        objective: sol.objective,
        iterations: sol.iterations,
        residuals: sol.residuals,
        warm_started: warm.is_some(),
        prices: Vec::new(),
        sensitivities: Vec::new(),
        sensitivity_error: None,
        timings,
    };

    if !sol.status.is_success() {
        result.status = RunStatus::Failed {
            stage: Stage::Solve,
            reason: describe(&sol.status),
        };
        result.timings.total_ms = ms(start);
        return Ok(result);
    }

    let t = Instant::now();
    match dlmp::decompose(&sol, &prob, net) {
        Ok(prices) => result.prices = prices,
        Err(e) => {
            result.status = RunStatus::Failed {
                stage: Stage::Decompose,
                reason: e.to_string(),
            };
        }
    }
    result.timings.decompose_ms = ms(t);

    let point = prob.operating_point(&sol.x);
    result.total_gen_cost_eur = Some(prob.generation_cost(&sol.x));
    result.total_losses_kw = Some(net.base.power_from_pu(prob.losses(&sol.x)));
    match point.max_vuf() {
        Ok((vuf, bus)) => {
            result.highest_vuf_pct = Some(vuf);
            result.vuf_bus = Some(net.buses[bus].id.clone());
        }
        Err(e) => warn!("{case_id}: VUF undefined at the solution ({e})"),
    }

    if with_sensitivity && result.status.is_success() {
        let t = Instant::now();
        match dlmp::sensitivity_report(net, &point, &prob.injections(&sol.x)) {
            Ok(s) => result.sensitivities = s,
            Err(e) => {
                warn!("{case_id}: sensitivity report failed ({e})");
                result.sensitivity_error = Some(e.to_string());
            }
        }
        result.timings.sensitivity_ms = ms(t);
    }
    result.timings.total_ms = ms(start);
    Ok(result)
}

/// Network named by `cfg`, with its unbalance section replaced if asked.
pub fn load_case_network(cfg: &ScenarioConfig) -> Result<NetworkSpec, ScenarioError> {
    let net = load_network(&cfg.network)?;
    Ok(match &cfg.unbalance {
        Some(u) => net.with_unbalance(u.to_config())?,
        None => net,
    })
}

fn settings_of(cfg: &ScenarioConfig) -> Result<SolverSettings, ScenarioError> {
    let settings = cfg.solver.apply();
    settings.validate()?;
    Ok(settings)
}

/// Runs the single case described by `cfg` and writes its files to
/// `cfg.output_dir`. A solver failure is a result, not an error.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult, ScenarioError> {
    cfg.validate()?;
    let net = load_case_network(cfg)?;
    let settings = settings_of(cfg)?;
    let result = solve_case(&cfg.case_id, &net, &settings, cfg.reports.sensitivity)?;
    report::write_outputs(&result, &cfg.output_dir, &cfg.reports)?;
    Ok(result)
}

/// Marginal cost of the substation supply (€/kWh).
pub fn substation_cost(net: &NetworkSpec) -> f64 {
    net.generators.iter().find(|g| g.is_substation).map_or(0.0, |g| g.cost)
}

/// Unbalance settings for one sweep value. Penalties scale the substation
/// cost; the bus subset and penalty basis come from `net`.
pub fn sweep_config(net: &NetworkSpec, kind: SweepKind, value: f64) -> UnbalanceConfig {
    let base = UnbalanceConfig {
        penalty_on: net.unbalance.penalty_on,
        ..match kind {
            SweepKind::Penalty => UnbalanceConfig::soft(value * substation_cost(net)),
            SweepKind::Limit => UnbalanceConfig::hard(value),
        }
    };
    base.with_buses_of(&net.unbalance)
}

pub fn sweep_case_id(case_id: &str, kind: SweepKind, value: f64) -> String {
    match kind {
        SweepKind::Penalty => format!("{case_id}-w{value}"),
        SweepKind::Limit => format!("{case_id}-limit{value}"),
    }
}

/// Runs every sweep value on the rayon pool. Each run writes to its own
/// subdirectory; the combined table goes to `sweep.csv`. Results keep the
/// order of the sweep list.
pub fn run_sweep(cfg: &ScenarioConfig) -> Result<Vec<ScenarioResult>, ScenarioError> {
    cfg.validate()?;
    let sweep = cfg.sweep.as_ref().ok_or(ScenarioError::NoSweep)?;
    let (kind, values) = sweep.kind_and_values()?;
    let net = load_case_network(cfg)?;
    let settings = settings_of(cfg)?;
    let results = values
        .par_iter()
        .map(|&value| {
            let case_id = sweep_case_id(&cfg.case_id, kind, value);
            let run_net = net.with_unbalance(sweep_config(&net, kind, value))?;
            let mut r = solve_case(&case_id, &run_net, &settings, cfg.reports.sensitivity)?;
            r.weight = Some(value);
            report::write_outputs(&r, &run_dir(cfg, &case_id), &cfg.reports)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    report::write_sweep_table(&results, kind, &cfg.output_dir)?;
    Ok(results)
}

pub fn run_dir(cfg: &ScenarioConfig, case_id: &str) -> PathBuf {
    cfg.output_dir.join(case_id)
}

/// Mode label used in reports.
pub fn mode_label(u: &UnbalanceConfig) -> String {
    match u.mode {
        UnbalanceMode::None => "none".into(),
        UnbalanceMode::Hard => format!("hard, limit {} %", u.vuf_limit),
        UnbalanceMode::Soft => format!("soft, weight {} on {:?}", u.penalty_weight, u.penalty_on).to_lowercase(),
    }
}
