//! Scenario files (TOML).

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expected_failures: Vec<String>,
    pub system: SystemConfig,
    pub noise: NoiseConfig,
    pub cost: CostConfig,
    pub controls: ControlsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Only `"linear"` (alias `"linear-affine"`) can be declared in a file.
    pub kind: String,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// `"gaussian"`, `"triangular"` or `"empirical"`.
    pub law: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// `"quadratic"`, `"indicator-outside"` or `"exponential"`.
    pub kind: String,
    #[serde(default)]
    pub params: CostParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    /// Filled from the LQ synthesis when absent.
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    /// Filled from the LQ synthesis when absent.
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    /// Exponential stage weight; `1 − λ°` from the stabilizer when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// `"prop4"` (default) or `"example3"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsConfig {
    /// `"unconstrained"`, `"box"` or `"ball"`.
    pub kind: String,
    #[serde(default)]
    pub params: ControlParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Symmetric bound: box `[-u_max, u_max]^m` or ball radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_max: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_points: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_max: Option<Vec<f64>>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_quadrature_order")]
    pub quadrature_order: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Whether the pipeline solves the horizon problem on a grid.
    #[serde(default = "default_true")]
    pub dynamic_programming: bool,
    /// Initial state for simulations (defaults to the origin).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

fn default_mc_samples() -> usize {
    20_000
}
fn default_quadrature_order() -> usize {
    9
}
fn default_paths() -> usize {
    1_000
}
fn default_steps() -> usize {
    10_000
}
fn default_true() -> bool {
    true
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grid_min: None,
            grid_max: None,
            grid_points: None,
            control_points: None,
            control_min: None,
            control_max: None,
            mc_samples: default_mc_samples(),
            quadrature_order: default_quadrature_order(),
            paths: default_paths(),
            steps: default_steps(),
            dynamic_programming: true,
            x0: None,
        }
    }
}

const TOP_LEVEL: [&str; 8] = [
    "name",
    "horizon",
    "expected_failures",
    "system",
    "noise",
    "cost",
    "controls",
    "solver",
];

impl ScenarioConfig {
    /// Parses a scenario document. Errors name the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::parse(error_field("document", &e), e.message()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        for key in table.keys() {
            if !TOP_LEVEL.contains(&key.as_str()) {
                return Err(Error::parse(key, "unknown top-level key"));
            }
        }
        let name: String = field(&table, "name")?;
        let horizon: usize = field(&table, "horizon")?;
        let expected_failures: Vec<String> = match table.get("expected_failures") {
            Some(_) => field(&table, "expected_failures")?,
            None => Vec::new(),
        };
        let solver = match table.get("solver") {
            Some(_) => field(&table, "solver")?,
            None => SolverConfig::default(),
        };
        Ok(Self {
            name,
            horizon,
            expected_failures,
            system: field(&table, "system")?,
            noise: field(&table, "noise")?,
            cost: field(&table, "cost")?,
            controls: field(&table, "controls")?,
            solver,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// Returns a copy with `key = value` applied. `key` is a dotted path
    /// (`cost.params.alpha`) or one of the aliases `N`, `alpha`, `U_max`,
    /// `seed`, `grid_points`, `control_points`. `value` is a TOML value;
    /// bare words are taken as strings.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut parsed = parse_value(value);
        let path: Vec<String> = match key {
            "N" | "horizon" => vec!["horizon".into()],
            "alpha" => vec!["cost".into(), "params".into(), "alpha".into()],
            "seed" => vec!["noise".into(), "seed".into()],
            "U_max" | "u_max" => vec!["controls".into(), "params".into(), "u_max".into()],
            "grid_points" | "control_points" => {
                if let toml::Value::Integer(n) = parsed {
                    let len = match key {
                        "grid_points" => self.system.a.len(),
                        _ => self.system.b.first().map_or(1, Vec::len),
                    };
                    parsed = toml::Value::Array(vec![toml::Value::Integer(n); len]);
                }
                vec!["solver".into(), key.into()]
            }
            other => other.split('.').map(str::to_string).collect(),
        };
        if path.iter().any(String::is_empty) {
            return Err(Error::parse(key, "empty path segment"));
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::parse(key, e.to_string()))?;
        if matches!(key, "U_max" | "u_max") {
            // a symmetric bound replaces any explicit box or radius
            if let Some(params) = root
                .get_mut("controls")
                .and_then(|c| c.get_mut("params"))
                .and_then(toml::Value::as_table_mut)
            {
                params.remove("lower");
                params.remove("upper");
                params.remove("radius");
            }
        }
        let mut cursor = &mut root;
        for seg in &path[..path.len() - 1] {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::parse(key, "path does not name a table"))?;
            cursor = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        cursor
            .as_table_mut()
            .ok_or_else(|| Error::parse(key, "path does not name a table"))?
            .insert(path[path.len() - 1].clone(), parsed);
        match root {
            toml::Value::Table(t) => Self::from_table(t),
            _ => unreachable!(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn field<T: DeserializeOwned>(table: &toml::Table, key: &str) -> Result<T> {
    let value = table
        .get(key)
        .ok_or_else(|| Error::parse(key, "missing required field"))?
        .clone();
    T::deserialize(value).map_err(|e| Error::parse(error_field(key, &e), e.message()))
}

/// `section.inner` when the message names an inner field.
fn error_field(section: &str, e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "missing field `", "duplicate key `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return format!("{section}.{}", &rest[..end]);
            }
        }
    }
    section.to_string()
}
