//! Run configuration: a JSON document, optionally seeded from a built-in
//! scenario and patched with `--set` overrides.

use std::path::{Path, PathBuf};

use codim2::classify::SweepPath;
use codim2::integrate::Tolerances;
use codim2::scenarios::{self, BALL_DEFAULTS};
use codim2::{Regularization, SystemDef, SystemSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub system: Option<SystemSpec>,
    #[serde(default = "default_psi")]
    pub regularization: Regularization,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub z: Option<Vec<f64>>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub portrait: PortraitConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub outputs: Outputs,
}

fn default_psi() -> Regularization {
    Regularization::Rational
}

fn default_epsilon() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub path: SweepPath,
    #[serde(default = "default_sweep_samples")]
    pub samples: usize,
}

fn default_sweep_samples() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The regularized system at `epsilon`.
    #[default]
    Full,
    /// The singular-limit candidate.
    Composite,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub x0: [f64; 2],
    pub t_end: f64,
    #[serde(default)]
    pub method: Method,
    /// Output rows after the initial one (full method only).
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// When non-empty, also tabulate the end-state distance to the composite
    /// trajectory for each of these epsilons.
    #[serde(default)]
    pub epsilons: Vec<f64>,
}

fn default_samples() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortraitConfig {
    #[serde(default = "default_streamlines")]
    pub streamlines: usize,
    /// Fast time per streamline.
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_streamlines() -> usize {
    24
}

fn default_t_max() -> f64 {
    30.0
}

impl Default for PortraitConfig {
    fn default() -> Self {
        Self { streamlines: default_streamlines(), t_max: default_t_max() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// Base document for a built-in scenario.
pub fn scenario_value(name: &str) -> Result<Value, CliError> {
    let sc = scenarios::scenario(name).map_err(|e| CliError::config("", e.to_string()))?;
    let mut v = json!({
        "system": sc.system,
        "regularization": sc.regularization,
        "epsilon": sc.epsilon,
        "z": sc.z,
        "simulate": {"x0": sc.x0, "t_end": sc.t_end},
    });
    if name == "ball_in_pool" {
        // radial path across the stick-slip speed
        let zc = BALL_DEFAULTS.z_crit();
        v["sweep"] = json!({
            "path": {"kind": "z", "from": [0.2 * zc, 0.0], "to": [1.9 * zc, 0.0]},
            "samples": 40,
        });
    }
    Ok(v)
}

pub fn read_value(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config("", format!("{}: {e}", path.display())))
}

/// Apply `key.sub.2=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config("", format!("--set expects key=value, got `{assignment}`")))?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::config("", format!("--set: malformed key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let mut pointer = String::new();
    for seg in &segments {
        pointer.push('/');
        pointer.push_str(seg);
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        node = match node {
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| CliError::config(&pointer, "expected an array index"))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::config(&pointer, format!("index out of range (length {len})")))?
            }
            _ => return Err(CliError::config(&pointer, "cannot descend into a scalar")),
        };
    }
    *node = value;
    Ok(())
}

impl Config {
    pub fn from_value(doc: Value) -> Result<Self, CliError> {
        let cfg: Config = serde_path_to_error::deserialize(doc).map_err(|e| {
            let pointer = pointer_of(e.path());
            CliError::config(&pointer, e.into_inner().to_string())
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::config("/epsilon", "must be positive and finite"));
        }
        let tol = self.tolerances;
        if !(tol.rtol > 0.0 && tol.atol > 0.0) {
            return Err(CliError::config("/tolerances", "rtol and atol must be positive"));
        }
        if let Some(sim) = &self.simulate {
            if !(sim.t_end >= 0.0 && sim.t_end.is_finite()) {
                return Err(CliError::config("/simulate/t_end", "must be finite and non-negative"));
            }
            if let Some(i) = sim.epsilons.iter().position(|e| e.is_nan() || *e <= 0.0) {
                return Err(CliError::config(&format!("/simulate/epsilons/{i}"), "must be positive"));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.samples < 2 {
                return Err(CliError::config("/sweep/samples", "need at least 2 samples"));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<SystemDef, CliError> {
        let spec = self.system.clone().ok_or_else(|| CliError::config("/system", "missing"))?;
        let sys = SystemDef::from_spec(spec).map_err(|e| CliError::config("/system", e.to_string()))?;
        if let Some(z) = &self.z {
            if z.len() != sys.m() {
                return Err(CliError::config(
                    "/z",
                    format!("has {} components, the system has m = {}", z.len(), sys.m()),
                ));
            }
        }
        Ok(sys)
    }

    pub fn z(&self) -> Result<&[f64], CliError> {
        self.z.as_deref().ok_or_else(|| CliError::config("/z", "missing"))
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_creates_and_indexes() {
        let mut doc = json!({"z": [1.0, 2.0]});
        apply_override(&mut doc, "z.1=5").unwrap();
        apply_override(&mut doc, "system.params.mu=0.5").unwrap();
        apply_override(&mut doc, "regularization=exp").unwrap();
        assert_eq!(doc["z"], json!([1.0, 5]));
        assert_eq!(doc["system"]["params"]["mu"], json!(0.5));
        assert_eq!(doc["regularization"], json!("exp"));
        let err = apply_override(&mut doc, "z.7=1").unwrap_err();
        assert_eq!(err.pointer(), Some("/z/7"));
    }

    #[test]
    fn unknown_key_has_pointer() {
        let doc = json!({"outputs": {"typo": 1}});
        let err = Config::from_value(doc).unwrap_err();
        assert_eq!(err.pointer(), Some("/outputs/typo"));
    }

    #[test]
    fn every_scenario_is_a_valid_config() {
        for sc in scenarios::builtin_scenarios() {
            let cfg = Config::from_value(scenario_value(&sc.name).unwrap()).unwrap();
            cfg.system().unwrap();
        }
    }
}
