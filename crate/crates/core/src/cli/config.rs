//! Scenario configuration: a sectioned TOML file, or the `config` object
//! echoed in an earlier `report.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{validate_coupling, CouplingMatrix, ProbabilityVector};
use crate::grid::TorusGrid;
use crate::hamiltonian::{HamiltonianSpec, Potential};
use crate::paths::{ControlPolicy, SamplingConfig};
use crate::solver::{DppOptions, EvidenceConfig, GammaOptions};
use crate::stopping::{default_cap, parse_rule_with_default_cap, StoppingRule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{path}:{line}: {key}: {msg}")]
    Invalid {
        path: String,
        line: usize,
        key: String,
        msg: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Row-major `Λ`.
    pub coupling: Vec<Vec<f64>>,
    /// One potential per mode; `H_i = ½|p|² + V_i(x)`.
    pub potential: Vec<Potential>,
}

fn default_dt() -> f64 {
    0.005
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    200_000
}
fn default_epsilons() -> Vec<f64> {
    vec![0.1, 0.05, 0.025]
}
fn default_alpha_tol() -> f64 {
    0.0025
}
fn default_spread() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Level of the pinned solve; the critical value estimate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_alpha_tol")]
    pub alpha_tol: f64,
    /// Assumed bound on `max_i u_i − min_i u_i`, used to size the velocity box.
    #[serde(default = "default_spread")]
    pub spread_bound: f64,
    #[serde(default)]
    pub velocity_points: Option<usize>,
    /// Residual tolerance; `C_H (h + Δt)` when absent.
    #[serde(default)]
    pub residual_tol: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            alpha: None,
            epsilons: default_epsilons(),
            alpha_tol: default_alpha_tol(),
            spread_bound: default_spread(),
            velocity_points: None,
            residual_tol: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinSection {
    #[serde(default)]
    pub y: Vec<f64>,
    #[serde(default)]
    pub b: Vec<f64>,
}

fn default_samples() -> usize {
    10_000
}
fn default_dt_curve() -> f64 {
    1.0 / 64.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSection {
    #[serde(default)]
    pub x: Vec<f64>,
    /// Constant control velocity.
    #[serde(default)]
    pub velocity: Vec<f64>,
    #[serde(default)]
    pub rule: String,
    /// Initial distribution `a`.
    #[serde(default)]
    pub initial: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_dt_curve")]
    pub dt_curve: f64,
    /// Levels of the action-vs-α series; the solver level when empty.
    #[serde(default)]
    pub alphas: Vec<f64>,
    /// Cap for hitting and jump rules given without one.
    #[serde(default)]
    pub cap: Option<f64>,
}

impl Default for ActionSection {
    fn default() -> Self {
        Self {
            x: Vec::new(),
            velocity: Vec::new(),
            rule: String::new(),
            initial: Vec::new(),
            samples: default_samples(),
            dt_curve: default_dt_curve(),
            alphas: Vec::new(),
            cap: None,
        }
    }
}

fn default_horizon() -> f64 {
    5.0
}
fn default_count() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub initial: Vec<f64>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            count: default_count(),
            initial: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissibleSection {
    /// Random τ-cycles sampled as supporting evidence; none when zero.
    #[serde(default)]
    pub evidence_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub grid: GridSection,
    pub system: SystemSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub pin: PinSection,
    #[serde(default)]
    pub action: ActionSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub admissible: AdmissibleSection,
    /// Not echoed: where a run writes must not change what it reports.
    #[serde(default, skip_serializing)]
    pub output: OutputSection,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub pin_y: Option<Vec<f64>>,
    pub samples: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.solver.alpha = Some(a);
        }
        if let Some(y) = &self.pin_y {
            cfg.pin.y = y.clone();
        }
        if let Some(n) = self.samples {
            cfg.action.samples = n;
        }
        if let Some(d) = &self.out {
            cfg.output.dir = d.clone();
        }
    }
}

/// Line of the first `key = …` (or `[key]`) in `text`, 1-based; 0 when absent.
fn line_of(text: &str, key: &str) -> usize {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(leaf)
                .map(|r| r.trim_start().starts_with('='))
                .unwrap_or(false)
                || t.trim_matches(|c| c == '[' || c == ']') == key
        })
        .map(|k| k + 1)
        .unwrap_or(0)
}

impl ScenarioConfig {
    /// Reads a TOML scenario or a `report.json` carrying a `config` object.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn load_with(path: &Path, ov: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text_with(&text, &path.display().to_string(), ov)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        Self::from_text_with(text, origin, &Overrides::default())
    }

    /// Parses, applies command-line overrides, then validates.
    pub fn from_text_with(text: &str, origin: &str, ov: &Overrides) -> Result<Self, ConfigError> {
        let parse_err = |msg: String| ConfigError::Parse {
            path: origin.to_string(),
            msg,
        };
        let mut cfg: ScenarioConfig = if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| parse_err(e.to_string()))?
        };
        ov.apply(&mut cfg);
        cfg.resolve(text, origin)?;
        Ok(cfg)
    }

    pub fn m(&self) -> usize {
        self.system.potential.len()
    }

    /// Validates and fills dimension-dependent defaults so the echoed config
    /// is complete.
    fn resolve(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let invalid = |key: &str, msg: String| ConfigError::Invalid {
            path: origin.to_string(),
            line: line_of(text, key),
            key: key.to_string(),
            msg,
        };
        let dim = self.grid.dim;
        let m = self.m();
        if !(dim == 1 || dim == 2) {
            return Err(invalid("grid.dim", format!("dimension must be 1 or 2, got {dim}")));
        }
        if self.grid.n < 8 {
            return Err(invalid("grid.n", format!("need at least 8 points per axis, got {}", self.grid.n)));
        }
        if m == 0 {
            return Err(invalid("system.potential", "at least one mode is required".into()));
        }
        let rows = &self.system.coupling;
        if rows.len() != m {
            return Err(invalid(
                "system.coupling",
                format!("row count ≠ M ({} rows, M = {m} potentials)", rows.len()),
            ));
        }
        if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(invalid("system.coupling", format!("row {k} has {} entries ≠ M = {m}", r.len())));
        }
        validate_coupling(rows).map_err(|e| invalid("system.coupling", e.to_string()))?;
        HamiltonianSpec::quadratic(dim, self.system.potential.clone())
            .map_err(|e| invalid("system.potential", e.to_string()))?;

        let s = &self.solver;
        for (key, v) in [
            ("solver.dt", s.dt),
            ("solver.tol", s.tol),
            ("solver.alpha_tol", s.alpha_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be positive, got {v}")));
            }
        }
        if s.epsilons.is_empty() || s.epsilons.iter().any(|e| !(*e > 0.0) || e * s.dt >= 1.0) {
            return Err(invalid("solver.epsilons", "discounts must be positive with ε·Δt < 1".into()));
        }
        if s.spread_bound < 0.0 {
            return Err(invalid("solver.spread_bound", "must be nonnegative".into()));
        }
        if let Some(t) = s.residual_tol {
            if !(t > 0.0) {
                return Err(invalid("solver.residual_tol", format!("must be positive, got {t}")));
            }
        }
        if s.max_iter == 0 {
            return Err(invalid("solver.max_iter", "must be positive".into()));
        }

        fill(&mut self.pin.y, dim, 0.0);
        fill(&mut self.pin.b, m, 0.0);
        check_len(&self.pin.y, dim, "pin.y", &invalid)?;
        check_len(&self.pin.b, m, "pin.b", &invalid)?;

        let first_mode = |v: &mut Vec<f64>| {
            if v.is_empty() {
                *v = (0..m).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            }
        };
        let cap = default_cap(&self.coupling_matrix());
        let a = &mut self.action;
        fill(&mut a.x, dim, 0.0);
        fill(&mut a.velocity, dim, 0.0);
        first_mode(&mut a.initial);
        if a.rule.is_empty() {
            a.rule = "deterministic t=1".into();
        }
        if a.cap.is_none() {
            a.cap = Some(cap);
        }
        check_len(&a.x, dim, "action.x", &invalid)?;
        check_len(&a.velocity, dim, "action.velocity", &invalid)?;
        check_len(&a.initial, m, "action.initial", &invalid)?;
        ProbabilityVector::new(a.initial.clone()).map_err(|e| invalid("action.initial", e.to_string()))?;
        parse_rule_with_default_cap(&a.rule, a.cap).map_err(|e| invalid("action.rule", e.to_string()))?;
        if a.samples < 2 {
            return Err(invalid("action.samples", "need at least 2 samples".into()));
        }
        if !(a.dt_curve > 0.0) {
            return Err(invalid("action.dt_curve", "must be positive".into()));
        }

        first_mode(&mut self.sample.initial);
        check_len(&self.sample.initial, m, "sample.initial", &invalid)?;
        ProbabilityVector::new(self.sample.initial.clone())
            .map_err(|e| invalid("sample.initial", e.to_string()))?;
        if !(self.sample.horizon > 0.0) {
            return Err(invalid("sample.horizon", "must be positive".into()));
        }
        Ok(())
    }

    pub fn coupling_matrix(&self) -> CouplingMatrix {
        CouplingMatrix::new(&self.system.coupling).expect("validated")
    }

    pub fn hamiltonian(&self) -> HamiltonianSpec {
        HamiltonianSpec::quadratic(self.grid.dim, self.system.potential.clone()).expect("validated")
    }

    pub fn torus_grid(&self) -> TorusGrid {
        TorusGrid::new(self.grid.dim, self.grid.n).expect("validated")
    }

    pub fn dpp(&self) -> DppOptions {
        DppOptions {
            dt: self.solver.dt,
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
        }
    }

    pub fn gamma_options(&self) -> GammaOptions {
        GammaOptions {
            epsilons: self.solver.epsilons.clone(),
            alpha_tol: self.solver.alpha_tol,
            dpp: self.dpp(),
        }
    }

    pub fn action_rule(&self) -> StoppingRule {
        parse_rule_with_default_cap(&self.action.rule, self.action.cap).expect("validated")
    }

    pub fn action_policy(&self) -> ControlPolicy {
        ControlPolicy::constant(&self.action.velocity)
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            samples: self.action.samples,
            seed: self.seed,
            dt: self.action.dt_curve,
        }
    }

    pub fn evidence(&self) -> Option<EvidenceConfig> {
        (self.admissible.evidence_trials > 0).then(|| EvidenceConfig {
            trials: self.admissible.evidence_trials,
            samples: self.action.samples,
            seed: self.seed,
            dt: self.action.dt_curve,
        })
    }
}

fn fill(v: &mut Vec<f64>, len: usize, value: f64) {
    if v.is_empty() {
        *v = vec![value; len];
    }
}

fn check_len(
    v: &[f64],
    len: usize,
    key: &str,
    invalid: &dyn Fn(&str, String) -> ConfigError,
) -> Result<(), ConfigError> {
    if v.len() != len {
        return Err(invalid(key, format!("expected {len} entries, got {}", v.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = "seed = 3\n[grid]\ndim = 1\nn = 32\n[system]\ncoupling = [[0.0]]\n\n[[system.potential]]\nkind = \"cosine\"\namplitude = 1.0\nfrequency = 1.0\n";

    #[test]
    fn defaults_are_filled() {
        let c = ScenarioConfig::from_text(SCALAR, "s.toml").unwrap();
        assert_eq!(c.pin.y, vec![0.0]);
        assert_eq!(c.action.initial, vec![1.0]);
        assert_eq!(c.solver.dt, 0.005);
        assert!(c.action.cap.is_some());
    }

    #[test]
    fn missing_row_is_reported_with_line() {
        let text = "seed = 1\n[grid]\ndim = 1\nn = 16\n[system]\ncoupling = [[1.0, -1.0]]\n[[system.potential]]\nkind = \"constant\"\nvalue = 0.0\n[[system.potential]]\nkind = \"constant\"\nvalue = 0.0\n";
        let e = ScenarioConfig::from_text(text, "c.toml").unwrap_err().to_string();
        assert!(e.contains("row count ≠ M"), "{e}");
        assert!(e.starts_with("c.toml:6:"), "{e}");
    }

    #[test]
    fn seed_is_mandatory() {
        let text = SCALAR.replace("seed = 3\n", "");
        assert!(matches!(
            ScenarioConfig::from_text(&text, "x"),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn json_echo_round_trips() {
        let c = ScenarioConfig::from_text(SCALAR, "s.toml").unwrap();
        let report = serde_json::json!({ "command": "gamma", "config": c });
        let back = ScenarioConfig::from_text(&report.to_string(), "r.json").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn nonpositive_tolerance_rejected() {
        let text = format!("{SCALAR}[solver]\ntol = 0.0\n");
        let e = ScenarioConfig::from_text(&text, "s.toml").unwrap_err().to_string();
        assert!(e.contains("solver.tol"), "{e}");
    }
}
