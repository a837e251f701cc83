//! Gridded finite-horizon stochastic dynamic programming.
//!
//! Values are stored at the nodes of a rectilinear grid and interpolated
//! multilinearly (clamped outside the box). Controls are taken from a finite
//! discretization of `U` and expectations use the noise quadrature rule
//! (Gaussian/triangular) or the full sample table (empirical).

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::grid::Grid;
use crate::models::{Dynamics, NoiseLaw, Scenario};
use crate::policy::{PolicySequence, RecedingHorizonPolicy, StagePolicy};
use crate::quadrature::QuadratureRule;
use crate::{Error, Result};

/// Relative quadrature error (by order escalation) above which a warning is
/// recorded.
pub const QUADRATURE_WARN: f64 = 1e-4;

/// A scalar function of the state.
pub trait ValueFn: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> ValueFn for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

impl ValueFn for crate::riccati::QuadraticValue {
    fn value(&self, x: &[f64]) -> f64 {
        crate::riccati::QuadraticValue::value(self, x)
    }
}

/// Discretized controls and expectation rule for backups.
#[derive(Debug, Clone)]
pub struct BackupContext {
    pub controls: Vec<Vec<f64>>,
    pub rule: QuadratureRule,
}

impl BackupContext {
    pub fn for_scenario(s: &Scenario) -> Result<Self> {
        Self::with_order(s, s.hints.quadrature_order)
    }

    pub fn with_order(s: &Scenario, order: usize) -> Result<Self> {
        let h = &s.hints;
        let range = match (&h.control_min, &h.control_max) {
            (Some(lo), Some(hi)) => Some((lo.as_slice(), hi.as_slice())),
            _ => None,
        };
        let controls = s.controls.discretize(&h.control_points, range)?;
        Ok(Self {
            controls,
            rule: s.noise.quadrature(order),
        })
    }

    /// `E[next(f(x, u, w))]`.
    pub fn expectation<V: ValueFn + ?Sized>(&self, s: &Scenario, next: &V, x: &[f64], u: &[f64]) -> f64 {
        expectation_with(&self.rule, s, next, x, u)
    }

    /// `(min_u c(x,u) + E[next(f(x,u,w))], argmin)`, ties to the lowest index.
    pub fn backup<V: ValueFn + ?Sized>(&self, s: &Scenario, next: &V, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut best = f64::INFINITY;
        let mut arg: Option<usize> = None;
        for (i, u) in self.controls.iter().enumerate() {
            let q = s.cost.stage(x, u) + self.expectation(s, next, x, u);
            if q < best || (arg.is_none() && q.is_nan()) {
                best = q;
                arg = Some(i);
            }
        }
        let i = arg.ok_or(Error::EmptyControlSet)?;
        Ok((best, self.controls[i].clone()))
    }
}

fn expectation_with<V: ValueFn + ?Sized>(
    rule: &QuadratureRule,
    s: &Scenario,
    next: &V,
    x: &[f64],
    u: &[f64],
) -> f64 {
    match &s.system.dynamics {
        Dynamics::LinearAffine { .. } => {
            // f(x, u, w) = (Ax + Bu) + w
            let base = s.system.transition(x, u, &vec![0.0; s.system.noise_dim]);
            let mut y = base.clone();
            let mut acc = 0.0;
            for (w, wt) in rule.iter() {
                for ((yi, bi), wi) in y.iter_mut().zip(&base).zip(w) {
                    *yi = bi + wi;
                }
                acc += wt * next.value(&y);
            }
            acc
        }
        Dynamics::General(_) => rule
            .iter()
            .map(|(w, wt)| wt * next.value(&s.system.transition(x, u, w)))
            .sum(),
    }
}

/// One backward step at `x` using the scenario's control discretization and
/// noise rule.
pub fn bellman_backup<V: ValueFn + ?Sized>(s: &Scenario, next_value: &V, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    BackupContext::for_scenario(s)?.backup(s, next_value, x)
}

/// Values and argmin controls at every stage; `values[k]` is the cost-to-go
/// from stage `k` (`values[0] ≈ V_N*`, `values[N] = c_F`).
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub grid: Arc<Grid>,
    pub horizon: usize,
    pub values: Vec<Vec<f64>>,
    /// `argmin[k][node]` for `k < N`.
    pub argmin: Vec<Vec<Vec<f64>>>,
    pub control_dim: usize,
    pub control_set: crate::models::ControlSet,
    /// Largest relative change of the expectation when the quadrature order
    /// is raised by 4 (0 when not applicable).
    pub quadrature_error: f64,
    pub warnings: Vec<String>,
}

struct StageView<'a> {
    grid: &'a Grid,
    values: &'a [f64],
}

impl ValueFn for StageView<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(self.values, x)
    }
}

impl ValueTable {
    /// Interpolated cost-to-go from stage `k`.
    pub fn value_at(&self, k: usize, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values[k], x)
    }

    /// `V_N*` as a value function.
    pub fn v0(&self) -> StageValue {
        self.stage_value(0)
    }

    pub fn stage_value(&self, k: usize) -> StageValue {
        StageValue {
            grid: self.grid.clone(),
            values: Arc::new(self.values[k].clone()),
        }
    }

    pub fn stage_policy(&self, k: usize) -> StagePolicy {
        let per_coord: Vec<Vec<f64>> = (0..self.control_dim)
            .map(|j| self.argmin[k].iter().map(|u| u[j]).collect())
            .collect();
        StagePolicy::grid_table(self.grid.clone(), per_coord)
            .expect("argmin table matches grid")
            .with_control_set(self.control_set.clone())
    }

    /// `(π₀*, …, π_{N−1}*)`.
    pub fn optimal_sequence(&self) -> PolicySequence {
        PolicySequence {
            stages: (0..self.horizon).map(|k| self.stage_policy(k)).collect(),
        }
    }

    /// CSV rows `stage, x…, value, u…` (controls blank at stage `N`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.grid.dim();
        let mut header = vec!["stage".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.push("value".into());
        header.extend((0..self.control_dim).map(|j| format!("u{j}")));
        w.write_record(&header)?;
        for k in 0..=self.horizon {
            for (i, x) in self.grid.nodes().enumerate() {
                let mut row = vec![k.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                row.push(self.values[k][i].to_string());
                if k < self.horizon {
                    row.extend(self.argmin[k][i].iter().map(|v| v.to_string()));
                } else {
                    row.extend((0..self.control_dim).map(|_| String::new()));
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Interpolated node values of one stage, cheap to clone.
#[derive(Debug, Clone)]
pub struct StageValue {
    pub grid: Arc<Grid>,
    pub values: Arc<Vec<f64>>,
}

impl ValueFn for StageValue {
    fn value(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, x)
    }
}

/// Backward induction from `values[N] = c_F` to `values[0]`.
pub fn solve_horizon(s: &Scenario) -> Result<ValueTable> {
    let h = &s.hints;
    let grid = Arc::new(Grid::uniform(&h.grid_min, &h.grid_max, &h.grid_points)?);
    solve_on_grid(s, grid)
}

pub fn solve_on_grid(s: &Scenario, grid: Arc<Grid>) -> Result<ValueTable> {
    let n = s.horizon;
    let ctx = BackupContext::for_scenario(s)?;
    let check_order = !matches!(s.noise.law, NoiseLaw::Empirical { .. });
    let fine = if check_order {
        Some(s.noise.quadrature(s.hints.quadrature_order + 4))
    } else {
        None
    };
    let nodes: Vec<Vec<f64>> = grid.nodes().collect();
    let terminal: Vec<f64> = nodes.iter().map(|x| s.cost.terminal(x)).collect();
    if let Some(i) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: n,
            node: nodes[i].clone(),
        });
    }
    let mut values = vec![terminal];
    let mut argmin = Vec::with_capacity(n);
    let mut quad_err: f64 = 0.0;
    for k in (0..n).rev() {
        let next = StageView {
            grid: &grid,
            values: values.last().unwrap(),
        };
        let out: Vec<(f64, Vec<f64>, f64)> = nodes
            .par_iter()
            .map(|x| {
                let (v, u) = ctx.backup(s, &next, x)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        stage: k,
                        node: x.clone(),
                    });
                }
                let rel = match &fine {
                    Some(rule) => {
                        let lo = ctx.expectation(s, &next, x, &u);
                        let hi = expectation_with(rule, s, &next, x, &u);
                        (hi - lo).abs() / hi.abs().max(1e-12)
                    }
                    None => 0.0,
                };
                Ok((v, u, rel))
            })
            .collect::<Result<_>>()?;
        let mut vals = Vec::with_capacity(out.len());
        let mut args = Vec::with_capacity(out.len());
        for (v, u, rel) in out {
            vals.push(v);
            args.push(u);
            quad_err = quad_err.max(rel);
        }
        values.push(vals);
        argmin.push(args);
    }
    values.reverse();
    argmin.reverse();
    let mut warnings = Vec::new();
    if quad_err > QUADRATURE_WARN {
        warnings.push(format!(
            "relative quadrature error {quad_err:.2e} exceeds {QUADRATURE_WARN:.0e}; raise solver.quadrature_order"
        ));
    }
    Ok(ValueTable {
        grid,
        horizon: n,
        values,
        argmin,
        control_dim: s.control_dim(),
        control_set: s.controls.clone(),
        quadrature_error: quad_err,
        warnings,
    })
}

/// `π̂` interpolating the stage-0 argmin table, carrying the full optimal
/// sequence for lookahead simulations.
pub fn extract_rh_policy(v: &ValueTable) -> RecedingHorizonPolicy {
    RecedingHorizonPolicy::from_sequence(v.optimal_sequence(), "dynamic programming")
        .expect("horizon is at least 1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        builtin_scenario, ControlSet, CostSpec, NoiseModel, SolverHints, SystemModel,
    };
    use proptest::prelude::*;
    use std::sync::Arc as StdArc;

    /// Five nodes, three controls, horizon 2, noise ±1 with probability ½,
    /// dynamics clamped to the node set so every path stays on the grid.
    fn toy() -> Scenario {
        let f = |x: &[f64], u: &[f64], w: &[f64]| vec![(x[0] + u[0] + w[0]).clamp(-2.0, 2.0)];
        let system = SystemModel::general(1, 1, 1, StdArc::new(f));
        let noise = NoiseModel::empirical(vec![vec![-1.0], vec![1.0]], 0).unwrap();
        let cost = CostSpec::custom("toy", |x, u| x[0] * x[0] + u[0] * u[0], |x| 2.0 * x[0] * x[0]);
        let mut hints = SolverHints::default_for(1, 1);
        hints.grid_min = vec![-2.0];
        hints.grid_max = vec![2.0];
        hints.grid_points = vec![5];
        hints.control_points = vec![3];
        let controls = ControlSet::boxed(vec![-1.0], vec![1.0]).unwrap();
        Scenario::from_parts("toy", 2, system, noise, cost, controls, hints).unwrap()
    }

    /// Exhaustive search over all `3^(5·2)` node policies.
    fn brute_force(s: &Scenario) -> Vec<f64> {
        let nodes = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let us = [-1.0, 0.0, 1.0];
        let idx = |x: f64| nodes.iter().position(|n| *n == x).unwrap();
        let mut best = vec![f64::INFINITY; 5];
        let total = 3usize.pow(10);
        for code in 0..total {
            let mut c = code;
            let mut pol = [[0.0; 5]; 2];
            for stage in pol.iter_mut() {
                for slot in stage.iter_mut() {
                    *slot = us[c % 3];
                    c /= 3;
                }
            }
            for (i, x0) in nodes.iter().enumerate() {
                let mut acc = 0.0;
                for w0 in [-1.0, 1.0] {
                    for w1 in [-1.0, 1.0] {
                        let u0 = pol[0][i];
                        let x1 = s.system.transition(&[*x0], &[u0], &[w0])[0];
                        let u1 = pol[1][idx(x1)];
                        let x2 = s.system.transition(&[x1], &[u1], &[w1])[0];
                        acc += s.cost.stage(&[*x0], &[u0])
                            + s.cost.stage(&[x1], &[u1])
                            + s.cost.terminal(&[x2]);
                    }
                }
                best[i] = best[i].min(acc / 4.0);
            }
        }
        best
    }

    #[test]
    fn toy_matches_enumeration_exactly() {
        let s = toy();
        let table = solve_horizon(&s).unwrap();
        assert_eq!(table.values[0], brute_force(&s));
    }

    #[test]
    fn terminal_stage_is_exact() {
        let s = toy();
        let table = solve_horizon(&s).unwrap();
        for (i, x) in table.grid.nodes().enumerate() {
            assert_eq!(table.values[2][i], s.cost.terminal(&x));
        }
    }

    #[test]
    fn zero_cost_backup_chooses_zero() {
        let one = nalgebra::DMatrix::from_element(1, 1, 1.0);
        let system = SystemModel::linear(one.clone(), one).unwrap();
        let noise = NoiseModel::gaussian(vec![0.0], nalgebra::DMatrix::zeros(1, 1), 0).unwrap();
        let cost = CostSpec::custom("u2", |_, u| u[0] * u[0], |_| 0.0);
        let controls = ControlSet::boxed(vec![-1.0], vec![1.0]).unwrap();
        let s = Scenario::from_parts("z", 1, system, noise, cost, controls, SolverHints::default_for(1, 1))
            .unwrap();
        let (v, u) = bellman_backup(&s, &|_: &[f64]| 0.0, &[0.3]).unwrap();
        assert_eq!((v, u), (0.0, vec![0.0]));
    }

    #[test]
    fn indicator_backup_at_origin() {
        let s = builtin_scenario("integrator-indicator").unwrap();
        let (v, _) = bellman_backup(&s, &|_: &[f64]| 0.0, &[0.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn indicator_policy_respects_box() {
        let mut cfg = crate::models::builtin_config("integrator-indicator").unwrap();
        cfg.solver.grid_points = Some(vec![101]);
        let s = crate::models::build_scenario(&cfg).unwrap();
        let table = solve_horizon(&s).unwrap();
        let rh = extract_rh_policy(&table);
        for i in 0..400 {
            let x = -12.0 + 0.06 * i as f64;
            let u = rh.apply(&[x])[0];
            assert!((-1.0..=1.0).contains(&u));
        }
    }

    #[test]
    fn symmetric_problem_gives_odd_policy() {
        let mut cfg = crate::models::builtin_config("lq").unwrap();
        cfg.solver.grid_points = Some(vec![61]);
        cfg.solver.control_points = Some(vec![201]);
        let s = crate::models::build_scenario(&cfg).unwrap();
        let table = solve_horizon(&s).unwrap();
        let n = table.grid.len();
        for i in 0..n {
            let (a, b) = (table.argmin[0][i][0], table.argmin[0][n - 1 - i][0]);
            assert!((a + b).abs() <= 0.05 + 1e-12, "node {i}: {a} vs {b}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn backup_is_monotone(shift in 0.0f64..3.0, slope in 0.0f64..2.0, x in -4.0f64..4.0) {
            let s = builtin_scenario("integrator-exponential").unwrap();
            let ctx = BackupContext::for_scenario(&s).unwrap();
            let low = |y: &[f64]| slope * y[0].abs();
            let high = move |y: &[f64]| slope * y[0].abs() + shift + 0.1 * y[0] * y[0];
            let (vl, _) = ctx.backup(&s, &low, &[x]).unwrap();
            let (vh, _) = ctx.backup(&s, &high, &[x]).unwrap();
            prop_assert!(vl <= vh);
        }
    }
}
