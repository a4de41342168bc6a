//! CSV and text artefacts of a run.
//!
//! Numbers are written in shortest round-trip form (see [`num`]), so equal
//! results give identical bytes. Undefined sensitivities are the literal
//! `null`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use csv::{Terminator, Writer, WriterBuilder};
use vudlmp_core::dlmp::{DlmpBreakdown, PowerKind, Sensitivity};

use crate::config::{Reports, SweepKind};
use crate::scenario::{mode_label, RunStatus, ScenarioError, ScenarioResult};

pub const SUMMARY_HEADER: [&str; 7] = [
    "case_id",
    "total_gen_cost_eur",
    "total_losses_kw",
    "highest_vuf_pct",
    "vuf_bus",
    "status",
    "wall_ms",
];

const PRICE_HEADER: [&str; 9] = [
    "bus",
    "phase",
    "total",
    "energy",
    "loss",
    "congestion",
    "voltage_limit",
    "unbalance",
    "residual",
];

const COMPONENTS: [&str; 5] = ["energy", "loss", "congestion", "voltage_limit", "unbalance"];

/// Every file a run may produce, removed up front so that a failed run
/// leaves no stale prices from an earlier one.
const ARTEFACTS: [&str; 9] = [
    "summary.csv",
    "dlmp_active.csv",
    "dlmp_reactive.csv",
    "sensitivity.csv",
    "plot_active.csv",
    "plot_reactive.csv",
    "report.txt",
    "timings.csv",
    "FAILED",
];

fn writer(path: &Path) -> Result<Writer<fs::File>, ScenarioError> {
    WriterBuilder::new()
        .terminator(Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|source| csv_err(path, source))
}

fn csv_err(path: &Path, source: csv::Error) -> ScenarioError {
    ScenarioError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Shortest round-trip form, in exponent notation outside `[1e-4, 1e15)`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn components(b: &DlmpBreakdown) -> [f64; 5] {
    [b.energy, b.loss, b.congestion, b.voltage_limit, b.unbalance]
}

fn prices_of(result: &ScenarioResult, kind: PowerKind) -> impl Iterator<Item = &DlmpBreakdown> {
    result.prices.iter().filter(move |b| b.kind == kind)
}

fn write_records<I>(path: &Path, header: &[&str], rows: I) -> Result<(), ScenarioError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Summary row in the fixed column order.
pub fn summary_row(r: &ScenarioResult) -> Vec<String> {
    vec![
        r.case_id.clone(),
        opt(r.total_gen_cost_eur),
        opt(r.total_losses_kw),
        opt(r.highest_vuf_pct),
        r.vuf_bus.clone().unwrap_or_default(),
        r.status.label().to_string(),
        format!("{:.0}", r.timings.total_ms),
    ]
}

/// Writes the enabled artefacts of one run to `dir`, creating it if needed.
/// Price, sensitivity and plot files exist only for successful runs; a
/// failed run leaves `summary.csv`, `report.txt` and a `FAILED` marker.
pub fn write_outputs(result: &ScenarioResult, dir: &Path, reports: &Reports) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for name in ARTEFACTS {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
        }
    }
    let mut written = Vec::new();

    let path = dir.join("summary.csv");
    write_records(&path, &SUMMARY_HEADER, [summary_row(result)])?;
    written.push(path);

    let path = dir.join("timings.csv");
    let rows = result.timings.rows().map(|(stage, t)| vec![stage.to_string(), format!("{t:.3}")]);
    write_records(&path, &["stage", "ms"], rows)?;
    written.push(path);

    if let RunStatus::Failed { stage, reason } = &result.status {
        let path = dir.join("FAILED");
        fs::write(&path, format!("stage: {stage}\nreason: {reason}\n")).map_err(|e| io_err(&path, e))?;
        written.push(path);
    } else {
        if reports.shadow_prices {
            for (kind, name) in [(PowerKind::Active, "dlmp_active.csv"), (PowerKind::Reactive, "dlmp_reactive.csv")] {
                let path = dir.join(name);
                let rows = prices_of(result, kind).map(|b| {
                    let mut row = vec![b.bus.clone(), b.phase.to_string(), num(b.total)];
                    row.extend(components(b).map(num));
                    row.push(num(b.residual));
                    row
                });
                write_records(&path, &PRICE_HEADER, rows)?;
                written.push(path);
            }
        }
        if reports.sensitivity && result.sensitivity_error.is_none() {
            let path = dir.join("sensitivity.csv");
            write_sensitivity(result, &path)?;
            written.push(path);
        }
        if reports.plot_data {
            written.extend(emit_plot_data(result, dir)?);
        }
    }
    if reports.tables {
        let path = dir.join("report.txt");
        fs::write(&path, render_report(result)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn write_sensitivity(result: &ScenarioResult, path: &Path) -> Result<(), ScenarioError> {
    let header = ["bus", "phase", "kind", "closed_form", "finite_difference", "rel_gap", "flagged"];
    let rows = result.sensitivities.iter().map(|e| {
        let closed = match e.closed_form {
            Sensitivity::Defined(v) => num(v),
            Sensitivity::Undefined { .. } => "null".to_string(),
        };
        vec![
            e.bus.clone(),
            e.phase.to_string(),
            e.kind.label().to_string(),
            closed,
            num(e.finite_difference),
            e.rel_gap.map_or_else(|| "null".to_string(), num),
            e.flagged.to_string(),
        ]
    });
    write_records(path, &header, rows)
}

/// Long-format `(bus, phase, component, value)` price rows for plotting, one
/// file per power kind. Rows follow bus order, then phase, then component;
/// zero components are kept.
pub fn emit_plot_data(result: &ScenarioResult, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    let mut written = Vec::new();
    for (kind, name) in [(PowerKind::Active, "plot_active.csv"), (PowerKind::Reactive, "plot_reactive.csv")] {
        let path = dir.join(name);
        let rows = prices_of(result, kind).flat_map(|b| {
            COMPONENTS
                .iter()
                .zip(components(b))
                .map(|(c, v)| vec![b.bus.clone(), b.phase.to_string(), c.to_string(), num(v)])
                .collect::<Vec<_>>()
        });
        write_records(&path, &["bus", "phase", "component", "value"], rows)?;
        written.push(path);
    }
    Ok(written)
}

/// Combined table of a sweep, one row per run in sweep order.
pub fn write_sweep_table(results: &[ScenarioResult], kind: SweepKind, dir: &Path) -> Result<PathBuf, ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("sweep.csv");
    let value_col = match kind {
        SweepKind::Penalty => "weight",
        SweepKind::Limit => "limit_pct",
    };
    let mut header = vec![SUMMARY_HEADER[0], value_col];
    header.extend_from_slice(&SUMMARY_HEADER[1..]);
    let rows = results.iter().map(|r| {
        let mut row = summary_row(r);
        row.insert(1, opt(r.weight));
        row
    });
    write_records(&path, &header, rows)?;
    Ok(path)
}

/// Unit conversions behind every price in the outputs.
pub fn conversion_footer(base_kva: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Unit conversions (base {base_kva} kVA per phase)");
    let _ = writeln!(s, "  balance dual, €/h per pu active power    / {base_kva}  -> €/kWh");
    let _ = writeln!(s, "  balance dual, €/h per pu reactive power  / {base_kva}  -> €/kvarh");
    let _ = writeln!(s, "  power, pu                                 x {base_kva}  -> kW or kvar");
    let _ = writeln!(s, "  unbalance metric f                        = VUF² in %²");
    let _ = writeln!(s, "  soft weight                               €/h per %² of f");
    s
}

/// Plain-text report: headline figures, price tables, conventions and the
/// conversion footer.
pub fn render_report(r: &ScenarioResult) -> String {
    let mut s = String::new();
    let fmt4 = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let _ = writeln!(s, "Case {}", r.case_id);
    let _ = writeln!(s, "Unbalance treatment: {}", mode_label(&r.unbalance));
    match &r.status {
        RunStatus::Success => {
            let _ = writeln!(
                s,
                "Status: success after {} iterations (stationarity {:.1e}, feasibility {:.1e}, complementarity {:.1e})",
                r.iterations, r.residuals.stationarity, r.residuals.feasibility, r.residuals.complementarity
            );
        }
        RunStatus::Failed { stage, reason } => {
            let _ = writeln!(s, "Status: FAILED at {stage}: {reason}");
            let _ = writeln!(s, "No prices or sensitivities were written for this run.");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>22} {:>18} {:>16} {:>8}", "Total gen. cost (€)", "Total losses (kW)", "Highest VUF (%)", "at bus");
    let _ = writeln!(
        s,
        "{:>22} {:>18} {:>16} {:>8}",
        fmt4(r.total_gen_cost_eur),
        fmt4(r.total_losses_kw),
        fmt4(r.highest_vuf_pct),
        r.vuf_bus.as_deref().unwrap_or("-")
    );

    for (kind, title, unit) in [
        (PowerKind::Active, "Active-power prices", "€/kWh"),
        (PowerKind::Reactive, "Reactive-power prices", "€/kvarh"),
    ] {
        if r.prices.is_empty() {
            break;
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{title} ({unit})");
        let _ = writeln!(
            s,
            "{:>8} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "bus", "phase", "total", "energy", "loss", "congest.", "voltage", "unbalance"
        );
        for b in prices_of(r, kind) {
            let _ = writeln!(
                s,
                "{:>8} {:>5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
                b.bus, b.phase, b.total, b.energy, b.loss, b.congestion, b.voltage_limit, b.unbalance
            );
        }
    }

    if !r.sensitivities.is_empty() {
        let defined: Vec<f64> = r.sensitivities.iter().filter_map(|e| e.rel_gap).collect();
        let flagged = r.sensitivities.iter().filter(|e| e.flagged).count();
        let undefined = r.sensitivities.len() - defined.len();
        let worst = defined.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Sensitivity of f to demand: {} entries, {} undefined, {} flagged, largest gap to the oracle {:.1} %",
            r.sensitivities.len(),
            undefined,
            flagged,
            100.0 * worst
        );
    }
    if let Some(e) = &r.sensitivity_error {
        let _ = writeln!(s);
        let _ = writeln!(s, "Sensitivity report unavailable: {e}");
    }

    let _ = writeln!(s);
    let _ = writeln!(s, "Price components");
    let _ = writeln!(s, "  energy      substation price on the same phase");
    let _ = writeln!(s, "  loss        balance-dual remainder once the energy price is taken out");
    let _ = writeln!(s, "  congestion  thermal limits; voltage: magnitude limits; unbalance: VUF limit or penalty");
    let _ = writeln!(s);
    s.push_str(&conversion_footer(r.base.base_kva));
    s
}
