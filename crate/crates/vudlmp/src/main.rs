use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vudlmp::config::{Reports, ScenarioConfig, SolverOverrides};
use vudlmp::report;
use vudlmp::scenario::{self, ScenarioResult};
use vudlmp_core::dlmp::Sensitivity;
use vudlmp_core::ipsolver::SolverSettings;
use vudlmp_core::netmodel::{load_network, PenaltyBasis, UnbalanceDoc, UnbalanceMode};
use vudlmp_core::powerflow::{self, Injections};
use vudlmp_core::sequence;

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;

#[derive(Parser)]
#[command(name = "vudlmp", version, about = "Unbalance-aware three-phase OPF and nodal prices")]
struct Cli {
    /// Worker threads for sweeps and perturbation solves [default: all cores].
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Hard,
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    F,
    Vuf,
}

#[derive(Subcommand)]
enum Command {
    /// Power flow at nominal injections: voltages, VUF and losses.
    Pf { net: PathBuf },
    /// Single OPF run; prices and reports go to --out.
    Opf {
        net: PathBuf,
        /// Unbalance treatment [default: the network file's own].
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Hard-mode VUF limit (%).
        #[arg(long, requires = "mode", conflicts_with = "penalty")]
        limit: Option<f64>,
        /// Soft-mode weight (€/h per %²).
        #[arg(long, requires = "mode")]
        penalty: Option<f64>,
        /// What the soft penalty is linear in.
        #[arg(long, value_enum, requires = "penalty")]
        penalty_on: Option<BasisArg>,
        #[arg(long, default_value = "vudlmp-out")]
        out: PathBuf,
        #[arg(long, default_value = "case")]
        case_id: String,
        /// Skip the perturbation-oracle sensitivity report.
        #[arg(long)]
        no_sensitivity: bool,
    },
    /// Scenario or sweep from a JSON config; trailing --key=value pairs
    /// override config fields (dotted keys reach nested ones).
    Sweep {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Closed-form VUF sensitivities at the OPF solution against
    /// perturb-and-resolve finite differences.
    Sens { net: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            // Library errors already quote their sources.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()
            .context("cannot size the worker pool")?;
    }
    match cli.command {
        Command::Pf { net } => power_flow(net),
        Command::Opf {
            net,
            mode,
            limit,
            penalty,
            penalty_on,
            out,
            case_id,
            no_sensitivity,
        } => {
            let unbalance = mode.map(|m| UnbalanceDoc {
                mode: match m {
                    ModeArg::None => UnbalanceMode::None,
                    ModeArg::Hard => UnbalanceMode::Hard,
                    ModeArg::Soft => UnbalanceMode::Soft,
                },
                limit_pct: limit,
                penalty,
                penalty_on: penalty_on.map(|b| match b {
                    BasisArg::F => PenaltyBasis::F,
                    BasisArg::Vuf => PenaltyBasis::Vuf,
                }),
                buses: Vec::new(),
            });
            let cfg = ScenarioConfig {
                case_id,
                network: net,
                unbalance,
                solver: SolverOverrides::default(),
                output_dir: out,
                sweep: None,
                reports: Reports {
                    sensitivity: !no_sensitivity,
                    ..Reports::default()
                },
            };
            let result = scenario::run_scenario(&cfg)?;
            print!("{}", report::render_report(&result));
            println!("\nOutputs in {}", cfg.output_dir.display());
            Ok(exit_for(std::slice::from_ref(&result)))
        }
        Command::Sweep { config, overrides } => {
            let cfg = ScenarioConfig::load(&config, &overrides)?;
            let results = if cfg.sweep.is_some() {
                scenario::run_sweep(&cfg)?
            } else {
                vec![scenario::run_scenario(&cfg)?]
            };
            println!("{}", report::SUMMARY_HEADER.join(","));
            for r in &results {
                println!("{}", report::summary_row(r).join(","));
            }
            println!("\nOutputs in {}", cfg.output_dir.display());
            Ok(exit_for(&results))
        }
        Command::Sens { net } => sensitivities(net),
    }
}

fn exit_for(results: &[ScenarioResult]) -> ExitCode {
    if results.iter().all(|r| r.status.is_success()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_SOLVER)
    }
}

fn power_flow(path: PathBuf) -> Result<ExitCode> {
    let net = load_network(&path)?;
    let op = match powerflow::solve_pf(&net, &Injections::nominal(&net)) {
        Ok(op) => op,
        Err(e) => {
            eprintln!("power flow failed: {e}");
            return Ok(ExitCode::from(EXIT_SOLVER));
        }
    };
    println!("{:>8} {:>9} {:>9} {:>9} {:>9}", "bus", "|Va| pu", "|Vb| pu", "|Vc| pu", "VUF %");
    for (bus, v) in net.buses.iter().zip(&op.voltages) {
        let m = v.as_array().map(|x| x.norm());
        let u = sequence::vuf(v).map_or_else(|_| "-".to_string(), |u| format!("{u:.4}"));
        println!("{:>8} {:>9.5} {:>9.5} {:>9.5} {:>9}", bus.id, m[0], m[1], m[2], u);
    }
    println!(
        "\nConverged in {} iterations; losses {:.4} kW",
        op.iterations,
        net.base.power_from_pu(op.losses)
    );
    if let Ok((u, b)) = op.max_vuf() {
        println!("Highest VUF {u:.4} % at bus {}", net.buses[b].id);
    }
    Ok(ExitCode::SUCCESS)
}

fn sensitivities(path: PathBuf) -> Result<ExitCode> {
    let net = load_network(&path)?;
    let result = scenario::solve_case("sens", &net, &SolverSettings::default(), true)?;
    if !result.status.is_success() {
        eprint!("{}", report::render_report(&result));
        return Ok(ExitCode::from(EXIT_SOLVER));
    }
    if let Some(e) = &result.sensitivity_error {
        eprintln!("sensitivity report failed: {e}");
        return Ok(ExitCode::from(EXIT_SOLVER));
    }
    println!(
        "{:>8} {:>5} {:>8} {:>13} {:>13} {:>8}",
        "bus", "phase", "kind", "closed form", "oracle", "gap %"
    );
    for e in &result.sensitivities {
        let closed = match e.closed_form {
            Sensitivity::Defined(v) => format!("{v:.6e}"),
            Sensitivity::Undefined { .. } => "null".into(),
        };
        let gap = e.rel_gap.map_or_else(|| "-".into(), |g| format!("{:.1}", 100.0 * g));
        let flag = if e.flagged { " *" } else { "" };
        println!(
            "{:>8} {:>5} {:>8} {:>13} {:>13.6e} {:>8}{flag}",
            e.bus,
            e.phase,
            e.kind.label(),
            closed,
            e.finite_difference,
            gap
        );
    }
    println!("\nUnits: %² of f per unit of extra demand ({} kVA base).", net.base.base_kva);
    println!("* gap above 25 %");
    Ok(ExitCode::SUCCESS)
}
