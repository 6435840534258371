//! Experiment configuration: JSON parsing, `--set` overrides and validation.

use std::path::{Path, PathBuf};

use cda_nse::mesh::Rect;
use cda_nse::mms::{builtin, BUILTIN_NAMES};
use cda_nse::observation::ObservationMode;
use cda_nse::solver::SolveConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    MmsConvergence,
    CdaSweep,
    UniquenessTest,
    ConditionReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equations {
    #[default]
    NavierStokes,
    Stokes,
}

/// A nudging parameter, absolute or relative to the per-cell threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuSpec {
    Absolute(f64),
    Multiple { mu_min_multiple: f64 },
}

impl MuSpec {
    pub fn resolve(&self, mu_min: f64) -> f64 {
        match *self {
            MuSpec::Absolute(mu) => mu,
            MuSpec::Multiple { mu_min_multiple } => mu_min_multiple * mu_min,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            MuSpec::Absolute(mu) => format!("{mu}"),
            MuSpec::Multiple { mu_min_multiple } => format!("{mu_min_multiple}*mu_min"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessKind {
    Zero,
    Stokes,
    /// Interpolant of the exact velocity plus a seeded random perturbation.
    Perturbed,
}

/// User-supplied bound constants; absent fields default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    #[serde(default = "one")]
    pub m: f64,
    #[serde(default = "one")]
    pub m1: f64,
    #[serde(default = "one")]
    pub m2: f64,
    /// Estimated from the probe set when omitted.
    pub c_i: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn default_solution() -> String {
    "paper".into()
}

fn default_guesses() -> Vec<GuessKind> {
    vec![GuessKind::Zero, GuessKind::Stokes, GuessKind::Perturbed]
}

fn default_perturbation() -> f64 {
    0.5
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Fine mesh sizes.
    pub h: Vec<f64>,
    /// Coarse observation mesh sizes.
    #[serde(rename = "H", default)]
    pub coarse_h: Vec<f64>,
    /// Reynolds numbers `1/ν`; defaults to `1/solver.nu`.
    #[serde(rename = "Re", default)]
    pub re: Vec<f64>,
    /// Nudging parameters; defaults to `solver.mu`.
    #[serde(default)]
    pub mu: Vec<MuSpec>,
    #[serde(default = "default_solution")]
    pub solution: String,
    /// CSV of observed coarse nodal velocities replacing the exact ones.
    #[serde(default)]
    pub observations: Option<PathBuf>,
    #[serde(default)]
    pub observation_mode: ObservationMode,
    #[serde(default)]
    pub equations: Equations,
    #[serde(default)]
    pub solver: SolveConfig,
    #[serde(default)]
    pub constants: Option<ConstantsConfig>,
    /// Replaces the discrete dual-norm estimate of the forcing.
    #[serde(default)]
    pub f_dual_norm: Option<f64>,
    #[serde(default = "default_guesses")]
    pub guesses: Vec<GuessKind>,
    /// H1-seminorm of the random perturbation of the exact interpolant.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub vtk: bool,
}

impl ExperimentConfig {
    pub fn reynolds_numbers(&self) -> Vec<f64> {
        if self.re.is_empty() {
            vec![1.0 / self.solver.nu]
        } else {
            self.re.clone()
        }
    }

    pub fn mu_values(&self) -> Vec<MuSpec> {
        if self.mu.is_empty() {
            vec![MuSpec::Absolute(self.solver.mu)]
        } else {
            self.mu.clone()
        }
    }

    /// Semantic checks that the schema cannot express. Errors carry the
    /// dotted path of the offending field.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |path: &str, msg: String| Err((path.to_string(), msg));
        if self.h.is_empty() {
            return err("h", "list must not be empty".into());
        }
        let domain = match builtin(&self.solution) {
            Ok(s) => s.domain,
            Err(_) => return err("solution", format!("unknown solution, expected one of {BUILTIN_NAMES:?}")),
        };
        for (k, &h) in self.h.iter().enumerate() {
            if let Err(m) = cells_per_side(domain, h) {
                return err(&format!("h.{k}"), m);
            }
        }
        let needs_coarse = self.experiment != Experiment::MmsConvergence;
        if needs_coarse && self.coarse_h.is_empty() {
            return err("H", "list must not be empty for this experiment".into());
        }
        for (k, &hc) in self.coarse_h.iter().enumerate() {
            if let Err(m) = cells_per_side(domain, hc) {
                return err(&format!("H.{k}"), m);
            }
        }
        for (k, &re) in self.re.iter().enumerate() {
            if !(re > 0.0 && re.is_finite()) {
                return err(&format!("Re.{k}"), format!("Reynolds number must be positive, got {re}"));
            }
        }
        for (k, mu) in self.mu.iter().enumerate() {
            let v = match *mu {
                MuSpec::Absolute(v) => v,
                MuSpec::Multiple { mu_min_multiple } => mu_min_multiple,
            };
            if !(v >= 0.0 && v.is_finite()) {
                return err(&format!("mu.{k}"), format!("must be non-negative and finite, got {v}"));
            }
        }
        if let Err(e) = self.solver.validate() {
            return err("solver", e.to_string());
        }
        if let Some(c) = &self.constants {
            for (name, v) in [("m", Some(c.m)), ("m1", Some(c.m1)), ("m2", Some(c.m2)), ("c_i", c.c_i)] {
                if let Some(v) = v {
                    if !(v > 0.0 && v.is_finite()) {
                        return err(&format!("constants.{name}"), format!("must be positive, got {v}"));
                    }
                }
            }
        }
        if let Some(f) = self.f_dual_norm {
            if !(f >= 0.0 && f.is_finite()) {
                return err("f_dual_norm", format!("must be non-negative, got {f}"));
            }
        }
        if self.experiment == Experiment::UniquenessTest && self.guesses.len() < 3 {
            return err("guesses", "uniqueness_test needs at least three initial guesses".into());
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            return err("perturbation", format!("must be non-negative, got {}", self.perturbation));
        }
        if let Some(p) = &self.observations {
            if !p.is_file() {
                return err("observations", format!("file {} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

/// Number of cells per side for mesh size `h`; the domain must be split
/// into an integer number of square-ish cells along both axes.
pub fn cells_per_side(domain: Rect, h: f64) -> Result<(usize, usize), String> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(format!("mesh size must be positive, got {h}"));
    }
    let count = |len: f64| -> Result<usize, String> {
        let n = (len / h).round();
        if n < 1.0 || ((n * h - len).abs() > 1e-9 * len) {
            return Err(format!("mesh size {h} does not divide the domain side {len}"));
        }
        Ok(n as usize)
    };
    Ok((count(domain.width())?, count(domain.height())?))
}

/// Applies one `key=value` override. The value is read as JSON when it
/// parses, otherwise as a string; missing objects along the path are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override '{assignment}' is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(format!("override key '{key}' has an empty segment"));
    }
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| format!("'{seg}' in '{key}' is not an array index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| format!("index {idx} in '{key}' is out of range ({len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("'{key}' descends into a non-container value")),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// 1-based line of the field at a dotted path, found by scanning for each
/// key in turn. Array indices are skipped.
fn locate(text: &str, path: &str) -> Option<usize> {
    let mut offset = 0;
    let mut found = None;
    for seg in path.split('.') {
        if seg.parse::<usize>().is_ok() || seg == "?" {
            continue;
        }
        let needle = format!("\"{seg}\"");
        let at = text[offset..].find(&needle)? + offset;
        offset = at + needle.len();
        found = Some(at);
    }
    found.map(|at| text[..at].matches('\n').count() + 1)
}

/// Parses, overrides and validates a configuration document.
pub fn parse_config(text: &str, source: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut value: Value = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("{source}:{}:{}: {e}", e.line(), e.column())))?;
    for o in overrides {
        apply_override(&mut value, o).map_err(|m| CliError::Config(format!("--set: {m}")))?;
    }
    let overridden = |path: &str| {
        overrides
            .iter()
            .filter_map(|o| o.split('=').next())
            .any(|k| path.starts_with(k) || k.starts_with(&format!("{path}.")))
    };
    let describe = |path: &str, msg: &str| -> CliError {
        if overridden(path) {
            CliError::Config(format!("{source} (--set {path}): {msg}"))
        } else {
            match locate(text, path) {
                Some(line) => CliError::Config(format!("{source}:{line}: {path}: {msg}")),
                None => CliError::Config(format!("{source}: {path}: {msg}")),
            }
        }
    };
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        describe(&path, &e.into_inner().to_string())
    })?;
    config.validate().map_err(|(path, msg)| describe(&path, &msg))?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string(), overrides)
}
