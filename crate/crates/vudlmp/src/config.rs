//! Scenario configuration documents and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use vudlmp_core::ipsolver::SolverSettings;
use vudlmp_core::netmodel::UnbalanceDoc;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("override \"{0}\" is not of the form --key=value")]
    Override(String),
    #[error("override key \"{0}\" does not address an object field")]
    OverridePath(String),
    #[error("sweep needs exactly one of \"penalties\" or \"limits\"")]
    SweepKind,
    #[error("sweep list is empty")]
    EmptySweep,
    #[error("sweep value {0} is out of range (weights >= 0, limits > 0)")]
    SweepValue(f64),
    #[error("case_id must be non-empty and free of path separators, got \"{0}\"")]
    CaseId(String),
}

/// One scenario, or a family of them when `sweep` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_case_id")]
    pub case_id: String,
    pub network: PathBuf,
    /// Replaces the network's own unbalance section. An empty bus list keeps
    /// the network's subset.
    #[serde(default)]
    pub unbalance: Option<UnbalanceDoc>,
    #[serde(default)]
    pub solver: SolverOverrides,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub reports: Reports,
}

fn default_case_id() -> String {
    "case".to_string()
}

/// Solver settings to change; anything left out keeps its default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    pub kkt_tol: Option<f64>,
    pub gap_tol: Option<f64>,
    pub mu_init: Option<f64>,
    pub mu_factor: Option<f64>,
    pub fraction_to_boundary: Option<f64>,
    pub max_iter: Option<usize>,
    pub reg_init: Option<f64>,
}

impl SolverOverrides {
    pub fn apply(&self) -> SolverSettings {
        let d = SolverSettings::default();
        SolverSettings {
            kkt_tol: self.kkt_tol.unwrap_or(d.kkt_tol),
            gap_tol: self.gap_tol.unwrap_or(d.gap_tol),
            mu_init: self.mu_init.unwrap_or(d.mu_init),
            mu_factor: self.mu_factor.unwrap_or(d.mu_factor),
            fraction_to_boundary: self.fraction_to_boundary.unwrap_or(d.fraction_to_boundary),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            reg_init: self.reg_init.unwrap_or(d.reg_init),
        }
    }
}

/// Soft-mode weights as multiples of the substation's marginal cost, or
/// hard-mode limits in percent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub penalties: Option<Vec<f64>>,
    pub limits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepKind {
    Penalty,
    Limit,
}

impl SweepSpec {
    pub fn kind_and_values(&self) -> Result<(SweepKind, &[f64]), ConfigError> {
        let (kind, values) = match (&self.penalties, &self.limits) {
            (Some(p), None) => (SweepKind::Penalty, p.as_slice()),
            (None, Some(l)) => (SweepKind::Limit, l.as_slice()),
            _ => return Err(ConfigError::SweepKind),
        };
        if values.is_empty() {
            return Err(ConfigError::EmptySweep);
        }
        let admissible = |v: f64| v.is_finite() && (v > 0.0 || (v == 0.0 && kind == SweepKind::Penalty));
        if let Some(&bad) = values.iter().find(|v| !admissible(**v)) {
            return Err(ConfigError::SweepValue(bad));
        }
        Ok((kind, values))
    }
}

/// Which artefacts to write besides `summary.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Reports {
    /// Human-readable `report.txt` with price tables and unit footer.
    pub tables: bool,
    /// `dlmp_active.csv` and `dlmp_reactive.csv`.
    pub shadow_prices: bool,
    /// `sensitivity.csv`, closed form against the perturbation oracle.
    pub sensitivity: bool,
    /// Long-format `plot_active.csv` and `plot_reactive.csv`.
    pub plot_data: bool,
}

impl Default for Reports {
    fn default() -> Self {
        Self {
            tables: true,
            shadow_prices: true,
            sensitivity: true,
            plot_data: true,
        }
    }
}

impl ScenarioConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file; overrides are applied afterwards and taken as given.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut doc: Value = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for key in ["network", "output_dir"] {
            if let Some(Value::String(p)) = doc.get_mut(key) {
                if Path::new(p.as_str()).is_relative() {
                    *p = dir.join(p.as_str()).to_string_lossy().into_owned();
                }
            }
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ScenarioConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.case_id.is_empty() || self.case_id.contains(['/', '\\']) {
            return Err(ConfigError::CaseId(self.case_id.clone()));
        }
        if let Some(sweep) = &self.sweep {
            sweep.kind_and_values()?;
        }
        Ok(())
    }
}

/// Applies `--a.b=value` to a JSON document. Values that parse as JSON are
/// used as such, anything else becomes a string. Dashes in keys read as
/// underscores.
pub fn apply_override(doc: &mut Value, arg: &str) -> Result<(), ConfigError> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    let (key, raw) = body.split_once('=').ok_or_else(|| ConfigError::Override(arg.to_string()))?;
    if key.is_empty() {
        return Err(ConfigError::Override(arg.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let key = key.replace('-', "_");
    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::OverridePath(key.clone()))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}
