use nalgebra::DMatrix;

use super::config::ScenarioConfig;
use super::{ControlSet, CostKind, CostSpec, NoiseModel, SystemModel};
use crate::linalg::{matrix_from_rows, min_sym_eigenvalue};
use crate::policy::OrthoStabilizer;
use crate::riccati::{synthesize_lq, LqSynthesis};
use crate::sampling::halton;
use crate::{Error, Result};

pub const BUILTIN_NAMES: [&str; 4] = [
    "lq",
    "integrator-indicator",
    "integrator-exponential",
    "ortho-rotation",
];

/// Which constant plays the role of `ρ` in `λ° = e^{ρ − U_max}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RhoRule {
    /// `ln E exp‖𝓡(A, I_d) w̄‖`.
    #[default]
    Prop4,
    /// `ln E ‖w‖`, i.e. `ln(σ√(2/π))` in the scalar case.
    Example3,
}

impl RhoRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prop4" => Ok(RhoRule::Prop4),
            "example3" => Ok(RhoRule::Example3),
            other => Err(Error::parse(
                "cost.params.rho",
                format!("expected `prop4` or `example3`, got `{other}`"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RhoRule::Prop4 => "prop4",
            RhoRule::Example3 => "example3",
        }
    }
}

/// Numerical settings carried by a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverHints {
    pub grid_min: Vec<f64>,
    pub grid_max: Vec<f64>,
    pub grid_points: Vec<usize>,
    pub control_points: Vec<usize>,
    pub control_min: Option<Vec<f64>>,
    pub control_max: Option<Vec<f64>>,
    pub mc_samples: usize,
    pub quadrature_order: usize,
    pub paths: usize,
    pub steps: usize,
    pub dynamic_programming: bool,
    pub x0: Vec<f64>,
}

impl SolverHints {
    pub fn default_for(d: usize, m: usize) -> Self {
        Self {
            grid_min: vec![-10.0; d],
            grid_max: vec![10.0; d],
            grid_points: vec![101; d],
            control_points: vec![21; m],
            control_min: None,
            control_max: None,
            mc_samples: 20_000,
            quadrature_order: 9,
            paths: 1_000,
            steps: 10_000,
            dynamic_programming: true,
            x0: vec![0.0; d],
        }
    }
}

/// A complete problem instance: system, noise, cost pair, control set and
/// horizon, plus derived synthesis data.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub horizon: usize,
    pub system: SystemModel,
    pub noise: NoiseModel,
    pub cost: CostSpec,
    pub controls: ControlSet,
    pub hints: SolverHints,
    pub expected_failures: Vec<String>,
    /// Present for linear systems with quadratic cost.
    pub lq: Option<LqSynthesis>,
    /// Present for orthogonal `A`, zero-mean Gaussian noise and a
    /// symmetric control bound.
    pub ortho: Option<OrthoStabilizer>,
    pub rho_rule: RhoRule,
    config: Option<ScenarioConfig>,
}

impl Scenario {
    /// Programmatic construction (closures allowed, no file form).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: impl Into<String>,
        horizon: usize,
        system: SystemModel,
        noise: NoiseModel,
        cost: CostSpec,
        controls: ControlSet,
        hints: SolverHints,
    ) -> Result<Self> {
        let s = Self {
            name: name.into(),
            horizon,
            system,
            noise,
            cost,
            controls,
            hints,
            expected_failures: Vec::new(),
            lq: None,
            ortho: None,
            rho_rule: RhoRule::Prop4,
            config: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.system.control_dim
    }

    pub fn config(&self) -> Option<&ScenarioConfig> {
        self.config.as_ref()
    }

    pub fn to_toml(&self) -> Result<String> {
        self.config
            .as_ref()
            .ok_or_else(|| Error::Unsupported("scenario was built from closures".into()))?
            .to_toml_string()
    }

    pub fn expects_failure(&self, check: &str) -> bool {
        self.expected_failures.iter().any(|f| f == check)
    }

    /// Checks dimensions, `0 ∈ U` and nonnegativity of `c`, `c_F` on
    /// quasi-random points of the grid box.
    pub fn validate(&self) -> Result<()> {
        let d = self.system.state_dim;
        let m = self.system.control_dim;
        if self.horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if self.noise.dim != self.system.noise_dim {
            return Err(Error::Dimension {
                what: "noise",
                expected: self.system.noise_dim,
                got: self.noise.dim,
            });
        }
        if self.controls.dim() != m {
            return Err(Error::Dimension {
                what: "control set",
                expected: m,
                got: self.controls.dim(),
            });
        }
        if !self.controls.contains_zero() {
            return Err(Error::Validation("control set must contain 0".into()));
        }
        let h = &self.hints;
        for (what, len) in [
            ("solver.grid_min", h.grid_min.len()),
            ("solver.grid_max", h.grid_max.len()),
            ("solver.grid_points", h.grid_points.len()),
            ("solver.x0", h.x0.len()),
        ] {
            if len != d {
                return Err(Error::Dimension {
                    what,
                    expected: d,
                    got: len,
                });
            }
        }
        if h.control_points.len() != m {
            return Err(Error::Dimension {
                what: "solver.control_points",
                expected: m,
                got: h.control_points.len(),
            });
        }
        if h.grid_min.iter().zip(&h.grid_max).any(|(a, b)| a >= b) {
            return Err(Error::Validation("solver.grid_min must be below grid_max".into()));
        }
        if h.quadrature_order == 0 || h.paths == 0 || h.steps == 0 || h.mc_samples == 0 {
            return Err(Error::Validation("solver counts must be positive".into()));
        }
        // nonnegativity spot check
        let pts = halton(d + m, 256);
        let span = |lo: f64, hi: f64, t: f64| lo + (hi - lo) * t;
        for p in &pts {
            let z: Vec<f64> = (0..d)
                .map(|i| span(h.grid_min[i], h.grid_max[i], p[i]))
                .collect();
            let u: Vec<f64> = (0..m).map(|j| 10.0 * (2.0 * p[d + j] - 1.0)).collect();
            let u = self.controls.project(&u);
            let (c, cf) = (self.cost.stage(&z, &u), self.cost.terminal(&z));
            if !(c >= 0.0 && cf >= 0.0) {
                return Err(Error::Validation(format!(
                    "costs must be nonnegative (c = {c}, c_F = {cf} at z = {z:?})"
                )));
            }
        }
        Ok(())
    }
}

/// `c(x, u)` with dimension checks.
pub fn eval_stage_cost(s: &Scenario, x: &[f64], u: &[f64]) -> Result<f64> {
    s.system.check_dims(x, u)?;
    Ok(s.cost.stage(x, u))
}

/// Validates a parsed configuration and assembles the scenario.
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    if config.name.trim().is_empty() {
        return Err(Error::parse("name", "must be non-empty"));
    }
    if config.horizon == 0 {
        return Err(Error::parse("horizon", "must be at least 1"));
    }
    let system = match config.system.kind.as_str() {
        "linear" | "linear-affine" => SystemModel::linear(
            matrix_from_rows(&config.system.a, "system.A")?,
            matrix_from_rows(&config.system.b, "system.B")?,
        )?,
        other => {
            return Err(Error::parse(
                "system.kind",
                format!("expected `linear`, got `{other}`"),
            ))
        }
    };
    let d = system.state_dim;
    let m = system.control_dim;

    let nc = &config.noise;
    let noise = match nc.law.as_str() {
        "gaussian" => {
            let cov = matrix_from_rows(
                nc.covariance
                    .as_ref()
                    .ok_or_else(|| Error::parse("noise.covariance", "required for gaussian"))?,
                "noise.covariance",
            )?;
            let mean = nc.mean.clone().unwrap_or_else(|| vec![0.0; cov.nrows()]);
            if mean.len() != cov.nrows() {
                return Err(Error::Dimension {
                    what: "noise.mean",
                    expected: cov.nrows(),
                    got: mean.len(),
                });
            }
            NoiseModel::gaussian(mean, cov, nc.seed)?
        }
        "triangular" => NoiseModel::triangular(
            nc.half_width
                .clone()
                .ok_or_else(|| Error::parse("noise.half_width", "required for triangular"))?,
            nc.seed,
        )?,
        "empirical" => NoiseModel::empirical(
            nc.samples
                .clone()
                .ok_or_else(|| Error::parse("noise.samples", "required for empirical"))?,
            nc.seed,
        )?,
        other => {
            return Err(Error::parse(
                "noise.law",
                format!("expected gaussian, triangular or empirical, got `{other}`"),
            ))
        }
    };
    if noise.dim != d {
        return Err(Error::Dimension {
            what: "noise",
            expected: d,
            got: noise.dim,
        });
    }

    let cp = &config.controls.params;
    let controls = match config.controls.kind.as_str() {
        "unconstrained" => ControlSet::Unconstrained { dim: m },
        "box" => match (cp.u_max, &cp.lower, &cp.upper) {
            (Some(u), _, _) => ControlSet::boxed(vec![-u; m], vec![u; m])?,
            (None, Some(l), Some(h)) => ControlSet::boxed(l.clone(), h.clone())?,
            _ => {
                return Err(Error::parse(
                    "controls.params",
                    "box needs `u_max` or both `lower` and `upper`",
                ))
            }
        },
        "ball" => ControlSet::ball(
            m,
            cp.u_max
                .or(cp.radius)
                .ok_or_else(|| Error::parse("controls.params.radius", "required for ball"))?,
        )?,
        other => {
            return Err(Error::parse(
                "controls.kind",
                format!("expected unconstrained, box or ball, got `{other}`"),
            ))
        }
    };
    if controls.dim() != m {
        return Err(Error::Dimension {
            what: "controls",
            expected: m,
            got: controls.dim(),
        });
    }

    let params = &config.cost.params;
    let rho_rule = match &params.rho {
        Some(s) => RhoRule::parse(s)?,
        None => RhoRule::Prop4,
    };
    let symmetric_bound = match &controls {
        ControlSet::Ball { radius, .. } => Some(*radius),
        ControlSet::Box { lower, upper }
            if m == 1 && lower[0] == -upper[0] =>
        {
            Some(upper[0])
        }
        _ => None,
    };
    let (a, b) = system.linear_parts().expect("file systems are linear");
    let ortho = match symmetric_bound {
        Some(u) if noise.is_zero_mean_gaussian() => {
            match OrthoStabilizer::new(a, b, &noise, u, rho_rule) {
                Ok(s) => Some(s),
                Err(e) if config.cost.kind == "exponential" && params.weight.is_none() => {
                    return Err(e)
                }
                Err(_) => None,
            }
        }
        _ => None,
    };

    let mut lq = None;
    let cost = match config.cost.kind.as_str() {
        "quadratic" => {
            let q = matrix_from_rows(
                params
                    .q
                    .as_ref()
                    .ok_or_else(|| Error::parse("cost.params.Q", "required for quadratic"))?,
                "cost.params.Q",
            )?;
            if q.nrows() != d || q.ncols() != d {
                return Err(Error::Dimension {
                    what: "cost.params.Q",
                    expected: d,
                    got: q.nrows(),
                });
            }
            let alpha = params.alpha.unwrap_or(0.5);
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::parse("cost.params.alpha", "must lie in [0, 1]"));
            }
            let syn = if min_sym_eigenvalue(&q) > 0.0 {
                Some(synthesize_lq(a, b, &q, &noise.covariance())?)
            } else {
                None
            };
            let from_syn = |field: &str| {
                Error::parse(field, "required when Q is not positive definite")
            };
            let r = match &params.r {
                Some(rows) => matrix_from_rows(rows, "cost.params.R")?,
                None => syn.as_ref().map(|s| s.r.clone()).ok_or_else(|| from_syn("cost.params.R"))?,
            };
            let p = match &params.p {
                Some(rows) => matrix_from_rows(rows, "cost.params.P")?,
                None => syn.as_ref().map(|s| s.p.clone()).ok_or_else(|| from_syn("cost.params.P"))?,
            };
            if r.nrows() != m || r.ncols() != m {
                return Err(Error::Dimension {
                    what: "cost.params.R",
                    expected: m,
                    got: r.nrows(),
                });
            }
            if p.nrows() != d || p.ncols() != d {
                return Err(Error::Dimension {
                    what: "cost.params.P",
                    expected: d,
                    got: p.nrows(),
                });
            }
            for (name, mat) in [("cost.params.Q", &q), ("cost.params.R", &r), ("cost.params.P", &p)] {
                if !crate::linalg::is_psd(mat, 1e-10) {
                    return Err(Error::Validation(format!("{name} must be symmetric PSD")));
                }
            }
            lq = syn;
            CostSpec::new(CostKind::Quadratic { q, r, p, alpha })
        }
        "indicator-outside" => CostSpec::new(CostKind::IndicatorOutside {
            half_width: params
                .half_width
                .ok_or_else(|| Error::parse("cost.params.half_width", "required"))?,
        }),
        "exponential" => {
            let weight = match params.weight {
                Some(w) => w,
                None => {
                    let s = ortho.as_ref().ok_or_else(|| {
                        Error::parse(
                            "cost.params.weight",
                            "required unless the system admits the orthogonal stabilizer",
                        )
                    })?;
                    1.0 - s.lambda_circ
                }
            };
            if weight < 0.0 {
                return Err(Error::parse("cost.params.weight", "must be nonnegative"));
            }
            CostSpec::new(CostKind::Exponential { weight })
        }
        other => {
            return Err(Error::parse(
                "cost.kind",
                format!("expected quadratic, indicator-outside or exponential, got `{other}`"),
            ))
        }
    };

    let sc = &config.solver;
    let mut hints = SolverHints::default_for(d, m);
    if let Some(v) = &sc.grid_min {
        hints.grid_min = v.clone();
    }
    if let Some(v) = &sc.grid_max {
        hints.grid_max = v.clone();
    }
    if let Some(v) = &sc.grid_points {
        hints.grid_points = v.clone();
    }
    if let Some(v) = &sc.control_points {
        hints.control_points = v.clone();
    }
    if let Some(v) = &sc.x0 {
        hints.x0 = v.clone();
    }
    hints.control_min = sc.control_min.clone();
    hints.control_max = sc.control_max.clone();
    hints.mc_samples = sc.mc_samples;
    hints.quadrature_order = sc.quadrature_order;
    hints.paths = sc.paths;
    hints.steps = sc.steps;
    hints.dynamic_programming = sc.dynamic_programming;

    let scenario = Scenario {
        name: config.name.clone(),
        horizon: config.horizon,
        system,
        noise,
        cost,
        controls,
        hints,
        expected_failures: config.expected_failures.clone(),
        lq,
        ortho,
        rho_rule,
        config: Some(config.clone()),
    };
    scenario.validate()?;
    Ok(scenario)
}

const LQ: &str = r#"
name = "lq"
horizon = 3

[system]
kind = "linear"
A = [[1.0]]
B = [[1.0]]

[noise]
law = "gaussian"
mean = [0.0]
covariance = [[1.0]]
seed = 7

[cost]
kind = "quadratic"
params = { Q = [[1.0]], alpha = 0.5 }

[controls]
kind = "unconstrained"

[solver]
grid_min = [-6.0]
grid_max = [6.0]
grid_points = [401]
control_points = [2001]
control_min = [-5.0]
control_max = [5.0]
x0 = [5.0]
"#;

const INTEGRATOR_INDICATOR: &str = r#"
name = "integrator-indicator"
horizon = 3
expected_failures = ["geometric_from_costs"]

[system]
kind = "linear"
A = [[1.0]]
B = [[1.0]]

[noise]
law = "triangular"
half_width = [1.0]
seed = 11

[cost]
kind = "indicator-outside"
params = { half_width = 2.0 }

[controls]
kind = "box"
params = { lower = [-1.0], upper = [1.0] }

[solver]
grid_min = [-10.0]
grid_max = [10.0]
grid_points = [401]
control_points = [41]
x0 = [10.0]
"#;

const INTEGRATOR_EXPONENTIAL: &str = r#"
name = "integrator-exponential"
horizon = 3

[system]
kind = "linear"
A = [[1.0]]
B = [[1.0]]

[noise]
law = "gaussian"
mean = [0.0]
covariance = [[1.0]]
seed = 13

[cost]
kind = "exponential"
params = { rho = "prop4" }

[controls]
kind = "box"
params = { u_max = 2.0 }

[solver]
grid_min = [-8.0]
grid_max = [8.0]
grid_points = [401]
control_points = [41]
quadrature_order = 16
x0 = [3.0]
"#;

const ORTHO_ROTATION: &str = r#"
name = "ortho-rotation"
horizon = 1

[system]
kind = "linear"
A = [[0.7071067811865476, -0.7071067811865476], [0.7071067811865476, 0.7071067811865476]]
B = [[1.0, 0.0], [0.0, 1.0]]

[noise]
law = "gaussian"
mean = [0.0, 0.0]
covariance = [[1.0, 0.0], [0.0, 1.0]]
seed = 17

[cost]
kind = "exponential"
params = { rho = "prop4" }

[controls]
kind = "ball"
params = { u_max = 2.5 }

[solver]
grid_min = [-8.0, -8.0]
grid_max = [8.0, 8.0]
grid_points = [41, 41]
control_points = [11, 11]
dynamic_programming = false
x0 = [4.0, 0.0]
"#;

/// Configuration of a builtin scenario.
pub fn builtin_config(name: &str) -> Result<ScenarioConfig> {
    let text = match name {
        "lq" => LQ,
        "integrator-indicator" => INTEGRATOR_INDICATOR,
        "integrator-exponential" => INTEGRATOR_EXPONENTIAL,
        "ortho-rotation" => ORTHO_ROTATION,
        other => {
            return Err(Error::NotFound {
                name: other.to_string(),
                valid: BUILTIN_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    ScenarioConfig::from_toml_str(text)
}

pub fn builtin_scenario(name: &str) -> Result<Scenario> {
    build_scenario(&builtin_config(name)?)
}

impl Scenario {
    /// The `(1 − α)` weight of a quadratic cost, if any.
    pub fn quadratic_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>, f64)> {
        match &self.cost.kind {
            CostKind::Quadratic { q, r, p, alpha } => Some((q, r, p, *alpha)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indicator_builtin_costs() {
        let s = builtin_scenario("integrator-indicator").unwrap();
        assert_eq!(eval_stage_cost(&s, &[3.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(eval_stage_cost(&s, &[1.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(eval_stage_cost(&s, &[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(eval_stage_cost(&s, &[5.0], &[0.0]).unwrap(), 1.0);
        assert!(eval_stage_cost(&s, &[5.0, 1.0], &[0.0]).is_err());
        assert_eq!(s.controls, ControlSet::boxed(vec![-1.0], vec![1.0]).unwrap());
        assert!(s.expects_failure("geometric_from_costs"));
    }

    #[test]
    fn exponential_builtin() {
        let s = builtin_scenario("integrator-exponential").unwrap();
        assert_eq!(s.cost.terminal(&[0.0]), 1.0);
        let o = s.ortho.as_ref().unwrap();
        let w = match s.cost.kind {
            CostKind::Exponential { weight } => weight,
            _ => unreachable!(),
        };
        assert!((w - (1.0 - o.lambda_circ)).abs() < 1e-15);
        assert_eq!(o.u_max, 2.0);
    }

    #[test]
    fn lq_alpha_zero_stage_cost() {
        let cfg = builtin_config("lq")
            .unwrap()
            .with_override("alpha", "0.0")
            .unwrap();
        let s = build_scenario(&cfg).unwrap();
        assert_eq!(eval_stage_cost(&s, &[2.0], &[7.0]).unwrap(), 4.0);
    }

    #[test]
    fn unknown_builtin_lists_names() {
        match builtin_scenario("nope") {
            Err(Error::NotFound { valid, .. }) => assert_eq!(valid.len(), 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn covariance_must_be_psd() {
        let mut cfg = builtin_config("ortho-rotation").unwrap();
        cfg.noise.covariance = Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(build_scenario(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_covariance_is_deterministic() {
        let mut cfg = builtin_config("lq").unwrap();
        cfg.noise.covariance = Some(vec![vec![0.0]]);
        let s = build_scenario(&cfg).unwrap();
        assert_eq!(s.lq.as_ref().unwrap().trace_p_sigma, 0.0);
    }

    #[test]
    fn builtins_round_trip_through_toml() {
        for name in BUILTIN_NAMES {
            let s = builtin_scenario(name).unwrap();
            let text = s.to_toml().unwrap();
            let again = build_scenario(&ScenarioConfig::from_toml_str(&text).unwrap()).unwrap();
            assert_eq!(s.config(), again.config());
            assert_eq!(s.hints, again.hints);
            assert_eq!(s.lq, again.lq);
            assert_eq!(s.ortho, again.ortho);
            assert_eq!(s.to_toml().unwrap(), again.to_toml().unwrap());
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut cfg = builtin_config("lq").unwrap();
        cfg.solver.grid_points = Some(vec![11, 11]);
        assert!(matches!(build_scenario(&cfg), Err(Error::Dimension { .. })));
        let mut cfg = builtin_config("lq").unwrap();
        cfg.system.b = vec![vec![1.0], vec![1.0]];
        assert!(build_scenario(&cfg).is_err());
    }
}
