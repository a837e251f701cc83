//! Scenario-specific choices of Lyapunov functions, exclusion sets and
//! policies for the certify and simulate stages.

use std::sync::Arc;

use rhc_core::certify::{default_mode, ExclusionSet, KernelMode};
use rhc_core::dpsolve::{solve_horizon, ValueFn, ValueTable};
use rhc_core::linalg::{min_sym_eigenvalue, sym_eigenvalues};
use rhc_core::models::{ControlSet, CostKind, NoiseLaw, Scenario};
use rhc_core::policy::{Controller, PolicySequence, StagePolicy};
use rhc_core::riccati::{finite_horizon_lq_value, QuadraticValue};
use rhc_core::Result;

pub type Lyapunov = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `E V(x₁) ≤ λ° V(x)` outside `set`, under `controller`.
pub struct GeometricPlan {
    pub label: &'static str,
    pub v: Lyapunov,
    pub lambda_circ: f64,
    pub beta: Option<f64>,
    pub set: ExclusionSet,
    pub controller: Arc<dyn Controller>,
    pub outer_factor: f64,
}

/// `E V(x₁) − V(x) ≤ −β` outside `set` with `V = ‖x‖`.
pub struct ConstantPlan {
    pub beta: f64,
    pub epsilon: f64,
    pub set: ExclusionSet,
    pub controller: StagePolicy,
    pub outer_factor: f64,
}

pub struct Analysis {
    pub synthesis: Vec<(String, String)>,
    pub a3_policy: Option<StagePolicy>,
    pub a3_set: Option<ExclusionSet>,
    pub geometric: Option<GeometricPlan>,
    pub constant: Option<ConstantPlan>,
    pub mode: KernelMode,
    /// Number of drift test states outside `K`.
    pub drift_points: usize,
    /// `α` with `c_s ≥ α c_F`, when known in closed form.
    pub cost_alpha: Option<f64>,
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Largest absolute noise coordinate, for bounded laws.
fn noise_bound(s: &Scenario) -> Option<f64> {
    match &s.noise.law {
        NoiseLaw::Triangular { half_width } => half_width.iter().copied().reduce(f64::max),
        NoiseLaw::Empirical { samples } => samples.iter().flatten().map(|v| v.abs()).reduce(f64::max),
        NoiseLaw::Gaussian { covariance, .. } => (covariance.amax() == 0.0).then_some(0.0),
    }
}

pub fn analyse(s: &Scenario) -> Analysis {
    let d = s.state_dim();
    let mut synthesis = vec![
        ("scenario".to_string(), s.name.clone()),
        ("horizon".to_string(), s.horizon.to_string()),
        ("state_dim".to_string(), d.to_string()),
        ("control_dim".to_string(), s.control_dim().to_string()),
        ("noise_seed".to_string(), s.noise.seed.to_string()),
    ];
    let mut a = Analysis {
        synthesis: Vec::new(),
        a3_policy: None,
        a3_set: None,
        geometric: None,
        constant: None,
        mode: default_mode(s),
        drift_points: 1000,
        cost_alpha: None,
    };

    if let Some(lq) = &s.lq {
        for (k, v) in lq.report_fields() {
            let text = if k.ends_with("iterations") { format!("{v:.0}") } else { num(v) };
            synthesis.push((k.to_string(), text));
        }
        for (i, v) in lq.k_gain.iter().enumerate() {
            synthesis.push((format!("K[{i}]"), num(*v)));
        }
        for (i, v) in lq.p.iter().enumerate() {
            synthesis.push((format!("P[{i}]"), num(*v)));
        }
        let g = StagePolicy::linear(lq.k_gain.clone());
        let p = lq.p.clone();
        let v: Lyapunov = Arc::new(move |x: &[f64]| rhc_core::linalg::quad_form(&p, x));
        a.geometric = Some(GeometricPlan {
            label: "x'Px",
            v,
            lambda_circ: lq.lambda_circ,
            beta: Some(lq.beta),
            set: ExclusionSet::Ellipsoid {
                p: lq.p.clone(),
                level: lq.k_set_level,
            },
            controller: Arc::new(g.clone()),
            outer_factor: 10.0,
        });
        if let Some((q, _, p, alpha)) = s.quadratic_parts() {
            synthesis.push(("a3_b".into(), num(lq.a3_bound())));
            if let Some(level) = lq.a3_level(alpha) {
                synthesis.push(("a3_level".into(), num(level)));
                a.a3_set = Some(ExclusionSet::Ellipsoid { p: lq.p.clone(), level });
            }
            let pmax = sym_eigenvalues(p).into_iter().fold(0.0, f64::max);
            a.cost_alpha = Some((1.0 - alpha) * min_sym_eigenvalue(q) / pmax);
        }
        a.a3_policy = Some(g);
    }

    if let Some(o) = &s.ortho {
        synthesis.extend([
            ("kappa".to_string(), o.kappa.to_string()),
            ("u_max".to_string(), num(o.u_max)),
            ("rho_prop4".to_string(), num(o.rho_prop4.value)),
            ("rho_prop4_ci".to_string(), num(o.rho_prop4.ci_halfwidth)),
            ("rho_example3".to_string(), num(o.rho_example3.value)),
            ("rho_rule".to_string(), o.rule.as_str().to_string()),
            ("rho_used".to_string(), num(o.rho)),
            ("lambda_circ".to_string(), num(o.lambda_circ)),
            (
                "lambda_circ_example3".to_string(),
                num(o.lambda_circ_for(rhc_core::models::RhoRule::Example3)),
            ),
            ("k_radius".to_string(), num(o.k_radius)),
            ("drift_radius".to_string(), num(o.drift_radius)),
        ]);
        let ball = ExclusionSet::NormBall { radius: o.drift_radius };
        if d > 1 {
            a.mode = KernelMode::MonteCarlo {
                samples: s.hints.mc_samples,
                seed: s.noise.seed,
            };
            a.drift_points = 200;
        }
        a.geometric = Some(GeometricPlan {
            label: "exp(|x|)",
            v: Arc::new(|x: &[f64]| rhc_core::linalg::norm(x).exp()),
            lambda_circ: o.lambda_circ,
            beta: None,
            set: ball.clone(),
            controller: Arc::new(o.clone()),
            outer_factor: 5.0,
        });
        if a.a3_policy.is_none() {
            if let Some(g) = o.as_stage_policy() {
                a.a3_policy = Some(g);
                a.a3_set = Some(ball);
            }
        }
        if let CostKind::Exponential { weight } = s.cost.kind {
            a.cost_alpha = Some(weight);
        }
    }

    if let (CostKind::IndicatorOutside { half_width }, ControlSet::Box { lower, upper }) = (&s.cost.kind, &s.controls) {
        let symmetric = d == 1 && lower.len() == 1 && lower[0] == -upper[0] && upper[0] > 0.0;
        if symmetric {
            let u = upper[0];
            let g = StagePolicy::analytic("-sat", 1, 1, move |x| vec![-x[0].clamp(-u, u)])
                .with_control_set(s.controls.clone());
            let reach = noise_bound(s).map(|w| (u + w).max(*half_width));
            synthesis.push(("u_max".into(), num(u)));
            if let Some(k) = reach {
                synthesis.push(("K_half_width".into(), num(k)));
                let set = ExclusionSet::Interval { lo: -k, hi: k };
                a.constant = Some(ConstantPlan {
                    beta: u,
                    epsilon: 2.0,
                    set: set.clone(),
                    controller: g.clone(),
                    outer_factor: 5.0,
                });
                a.a3_set = Some(set);
            }
            a.a3_policy = Some(g);
        }
    }

    a.synthesis = synthesis;
    a
}

/// Value function and policies used downstream of the solve stage.
pub struct Solution {
    pub source: &'static str,
    pub v0: Arc<dyn ValueFn>,
    pub pi0: StagePolicy,
    pub optimal: PolicySequence,
    pub table: Option<ValueTable>,
    /// Closed-form stage-0 value for linear-quadratic problems.
    pub closed_form: Option<QuadraticValue>,
}

/// Runs dynamic programming when enabled; unconstrained linear-quadratic
/// problems also get the closed-form value, which then drives the
/// certificates.
pub fn solve(s: &Scenario) -> Result<Option<Solution>> {
    let table = if s.hints.dynamic_programming {
        Some(solve_horizon(s)?)
    } else {
        None
    };
    let closed = match (&s.lq, s.quadratic_parts(), s.system.linear_parts(), &s.controls) {
        (Some(lq), Some((q, r, p, alpha)), Some((a, b)), ControlSet::Unconstrained { .. }) => Some(
            finite_horizon_lq_value(a, b, &(q * (1.0 - alpha)), &(r * alpha), p, &lq.sigma, s.horizon)?,
        ),
        _ => None,
    };
    Ok(match (closed, table) {
        (Some((values, gains)), table) => {
            let stages: Vec<StagePolicy> = gains.into_iter().map(StagePolicy::linear).collect();
            Some(Solution {
                source: "riccati",
                v0: Arc::new(values[0].clone()),
                pi0: stages[0].clone(),
                optimal: PolicySequence { stages },
                table,
                closed_form: Some(values[0].clone()),
            })
        }
        (None, Some(t)) => Some(Solution {
            source: "dynamic-programming",
            v0: Arc::new(t.v0()),
            pi0: t.stage_policy(0),
            optimal: t.optimal_sequence(),
            table: Some(t),
            closed_form: None,
        }),
        (None, None) => None,
    })
}
