use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Solve,
    Certify,
    Simulate,
    Perf,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Synth, Stage::Solve, Stage::Certify, Stage::Simulate, Stage::Perf];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Solve => "solve",
            Stage::Certify => "certify",
            Stage::Simulate => "simulate",
            Stage::Perf => "perf",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| RunError::Usage(format!("unknown stage '{s}' (valid: synth, solve, certify, simulate, perf, all)")))
    }
}

/// Parses `synth,solve` or `all`; stages are deduplicated and ordered.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, RunError> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "all" {
            out.extend(Stage::ALL);
        } else {
            out.push(item.parse()?);
        }
    }
    if out.is_empty() {
        return Err(RunError::Usage("no stages given".into()));
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// One pipeline invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    /// Builtin name or path to a scenario TOML file.
    pub scenario: String,
    pub stages: Vec<Stage>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// `key=value` overrides applied to the scenario configuration.
    pub overrides: Vec<(String, String)>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
}

impl RunManifest {
    pub fn new(scenario: impl Into<String>, out: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.into(),
            stages: Stage::ALL.to_vec(),
            out: out.into(),
            seed: None,
            overrides: Vec::new(),
            paths: None,
            steps: None,
        }
    }

    pub fn wants(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Echo written next to the outputs. The output directory is omitted so
    /// that reruns into different directories stay byte-identical.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Echo<'a> {
            scenario: &'a str,
            stages: Vec<&'static str>,
            seed: Option<u64>,
            paths: Option<usize>,
            steps: Option<usize>,
            overrides: toml::Table,
        }
        let overrides = self
            .overrides
            .iter()
            .map(|(k, v)| (k.clone(), toml::Value::String(v.clone())))
            .collect();
        let echo = Echo {
            scenario: &self.scenario,
            stages: self.stages.iter().map(Stage::as_str).collect(),
            seed: self.seed,
            paths: self.paths,
            steps: self.steps,
            overrides,
        };
        toml::to_string(&echo).unwrap_or_default()
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), RunError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| RunError::Usage(format!("override '{s}' is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(RunError::Usage(format!("override '{s}' has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_parse_and_order() {
        assert_eq!(parse_stages("simulate,synth").unwrap(), vec![Stage::Synth, Stage::Simulate]);
        assert_eq!(parse_stages("all").unwrap().len(), 5);
        assert!(parse_stages("bogus").is_err());
        assert!(parse_stages("").is_err());
    }

    #[test]
    fn overrides_split() {
        assert_eq!(parse_override("N=5").unwrap(), ("N".into(), "5".into()));
        assert!(parse_override("N").is_err());
        assert!(parse_override("=3").is_err());
    }

    #[test]
    fn echo_is_toml() {
        let mut m = RunManifest::new("lq", "/tmp/x");
        m.seed = Some(7);
        m.overrides.push(("alpha".into(), "0.25".into()));
        let t: toml::Table = m.to_toml().parse().unwrap();
        assert_eq!(t["scenario"].as_str(), Some("lq"));
        assert_eq!(t["overrides"]["alpha"].as_str(), Some("0.25"));
    }
}
