//! Numerical drift certificates.
//!
//! Every check evaluates an inequality of the form `lhs(x) ≤ rhs(x)` on a
//! finite set of test states and aggregates the margins `lhs − rhs`
//! (negative is good). Quadrature-based checks subtract an absolute
//! tolerance from the margin; Monte Carlo checks add `3σ̂` as the CI half
//! width. A certificate passes iff `worst_margin + ci_halfwidth ≤ 0`.
//! Results hold on the listed points only.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dpsolve::ValueFn;
use crate::linalg::norm;
use crate::models::{NoiseLaw, Scenario};
use crate::policy::{Controller, StagePolicy};
use crate::quadrature::QuadratureRule;
use crate::sampling::{ellipsoid_shell_points, shell_points, stream_rng};
use crate::{Error, Result};

/// Absolute tolerance for quadrature-based margins.
pub const QUAD_TOL: f64 = 1e-6;
/// Standard errors added to Monte Carlo margins.
pub const MC_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Quadrature { nodes: usize },
    MonteCarlo { samples: usize, seed: u64 },
    Exact,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Quadrature { nodes } => write!(f, "quadrature({nodes} nodes)"),
            Method::MonteCarlo { samples, seed } => {
                write!(f, "monte-carlo({samples} samples, seed {seed})")
            }
            Method::Exact => write!(f, "exact"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertificateKind {
    Geometric,
    Constant,
    Theorem1,
    Sandwich,
    A3,
    GeometricFromCosts,
    Envelope,
    Boundedness,
    TailSlope,
    AverageCost,
    Cesaro,
    Theorem2,
    Comparison,
}

impl CertificateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CertificateKind::Geometric => "geometric",
            CertificateKind::Constant => "constant",
            CertificateKind::Theorem1 => "theorem1",
            CertificateKind::Sandwich => "sandwich",
            CertificateKind::A3 => "a3",
            CertificateKind::GeometricFromCosts => "geometric_from_costs",
            CertificateKind::Envelope => "envelope",
            CertificateKind::Boundedness => "boundedness",
            CertificateKind::TailSlope => "tail_slope",
            CertificateKind::AverageCost => "average_cost",
            CertificateKind::Cesaro => "cesaro",
            CertificateKind::Theorem2 => "theorem2",
            CertificateKind::Comparison => "comparison",
        }
    }
}

/// Statistical verdict for one drift inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftCertificate {
    pub kind: CertificateKind,
    /// Identifier used in reports and expected-failure lists.
    pub name: String,
    pub constants: Vec<(String, f64)>,
    pub test_points: usize,
    /// Test states discarded because they were inside `K`.
    pub skipped: usize,
    /// Worst margin, tolerance already subtracted.
    pub worst_margin: f64,
    pub ci_halfwidth: f64,
    pub tolerance: f64,
    pub worst_state: Vec<f64>,
    pub method: Method,
    pub passed: bool,
    pub reason: Option<String>,
}

impl DriftCertificate {
    /// Certificate for one aggregated inequality `margin ≤ 0`.
    pub fn scalar(
        kind: CertificateKind,
        margin: f64,
        ci_halfwidth: f64,
        test_points: usize,
        method: Method,
        constants: Vec<(String, f64)>,
    ) -> Self {
        let mut c = Self::from_margins(kind, &[(Vec::new(), margin, ci_halfwidth)], 0.0, method, constants);
        c.test_points = test_points;
        c
    }

    pub fn from_margins(
        kind: CertificateKind,
        margins: &[(Vec<f64>, f64, f64)],
        tolerance: f64,
        method: Method,
        constants: Vec<(String, f64)>,
    ) -> Self {
        let mut worst: Option<&(Vec<f64>, f64, f64)> = None;
        for m in margins {
            let score = |t: &(Vec<f64>, f64, f64)| {
                let s = t.1 + t.2;
                if s.is_nan() { f64::INFINITY } else { s }
            };
            if worst.is_none_or(|w| score(m) > score(w)) {
                worst = Some(m);
            }
        }
        let (state, margin, ci) = match worst {
            Some((x, m, c)) => (x.clone(), m - tolerance, *c),
            None => (Vec::new(), f64::INFINITY, 0.0),
        };
        let passed = margin + ci <= 0.0;
        let reason = if margins.is_empty() {
            Some("no test states".to_string())
        } else if !passed {
            Some(format!("margin {:.3e} + ci {:.3e} > 0", margin, ci))
        } else {
            None
        };
        Self {
            kind,
            name: kind.as_str().to_string(),
            constants,
            test_points: margins.len(),
            skipped: 0,
            worst_margin: margin,
            ci_halfwidth: ci,
            tolerance,
            worst_state: state,
            method,
            passed,
            reason,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn constant(&self, key: &str) -> Option<f64> {
        self.constants.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn fail(mut self, reason: impl Into<String>) -> Self {
        self.passed = false;
        self.reason = Some(reason.into());
        self
    }

    pub fn csv_header() -> [&'static str; 11] {
        [
            "name",
            "kind",
            "constants",
            "test_points",
            "skipped",
            "worst_margin",
            "ci_halfwidth",
            "tolerance",
            "method",
            "verdict",
            "reason",
        ]
    }

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.kind.as_str().to_string(),
            self.constants
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";"),
            self.test_points.to_string(),
            self.skipped.to_string(),
            format!("{:e}", self.worst_margin),
            format!("{:e}", self.ci_halfwidth),
            format!("{:e}", self.tolerance),
            self.method.to_string(),
            if self.passed { "pass" } else { "fail" }.to_string(),
            self.reason.clone().unwrap_or_default(),
        ]
    }
}

impl fmt::Display for DriftCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}] {} ({})", if self.passed { "PASS" } else { "FAIL" }, self.name, self.kind.as_str())?;
        for (k, v) in &self.constants {
            writeln!(f, "  {k} = {v}")?;
        }
        writeln!(
            f,
            "  certified on {} points ({} skipped), worst margin {:.3e}, ci {:.3e}, tolerance {:.1e}, {}",
            self.test_points, self.skipped, self.worst_margin, self.ci_halfwidth, self.tolerance, self.method
        )?;
        if let Some(r) = &self.reason {
            writeln!(f, "  reason: {r}")?;
        }
        Ok(())
    }
}

/// Writes certificates as CSV.
pub fn write_certificates_csv<W: Write>(certs: &[DriftCertificate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DriftCertificate::csv_header())?;
    for c in certs {
        w.write_record(c.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// The bounded set `K` outside of which a drift inequality is required.
#[derive(Debug, Clone, PartialEq)]
pub enum ExclusionSet {
    NormBall { radius: f64 },
    Ellipsoid { p: DMatrix<f64>, level: f64 },
    /// `[lo, hi]` on the first coordinate (scalar states).
    Interval { lo: f64, hi: f64 },
}

impl ExclusionSet {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            ExclusionSet::NormBall { radius } => norm(x) <= *radius,
            ExclusionSet::Ellipsoid { p, level } => crate::linalg::quad_form(p, x) <= *level,
            ExclusionSet::Interval { lo, hi } => *lo <= x[0] && x[0] <= *hi,
        }
    }

    /// `n` quasi-random points of `K` (the origin and the boundary included).
    pub fn inside_points(&self, dim: usize, n: usize) -> Result<Vec<Vec<f64>>> {
        let mut pts = match self {
            ExclusionSet::NormBall { radius } => shell_points(dim, 0.0, *radius, n),
            ExclusionSet::Ellipsoid { p, level } => ellipsoid_shell_points(p, 0.0, *level, n)?,
            ExclusionSet::Interval { lo, hi } => (0..n)
                .map(|i| vec![lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64])
                .collect(),
        };
        pts.push(vec![0.0; dim]);
        pts.retain(|x| self.contains(x));
        Ok(pts)
    }

    /// `n` quasi-random points outside `K` on a shell whose outer boundary is
    /// `factor` times the size of `K`.
    pub fn outside_points(&self, dim: usize, n: usize, factor: f64) -> Result<Vec<Vec<f64>>> {
        let mut pts = match self {
            ExclusionSet::NormBall { radius } => {
                let r = radius.max(1e-3);
                shell_points(dim, r, r * factor, n)
            }
            ExclusionSet::Ellipsoid { p, level } => {
                let l = level.max(1e-6);
                ellipsoid_shell_points(p, l, l * factor * factor, n)?
            }
            ExclusionSet::Interval { lo, hi } => {
                let w = 0.5 * (hi - lo);
                let reach = w.max(1e-3) * (factor - 1.0);
                (1..=n)
                    .map(|i| {
                        let t = crate::sampling::radical_inverse(i as u64, 2);
                        let off = reach * (1.0 - t); // in (0, reach]
                        if i % 2 == 0 {
                            vec![hi + off]
                        } else {
                            vec![lo - off]
                        }
                    })
                    .collect()
            }
        };
        pts.retain(|x| !self.contains(x));
        Ok(pts)
    }

    pub fn describe(&self) -> Vec<(String, f64)> {
        match self {
            ExclusionSet::NormBall { radius } => vec![("K_radius".into(), *radius)],
            ExclusionSet::Ellipsoid { level, .. } => vec![("K_level".into(), *level)],
            ExclusionSet::Interval { lo, hi } => {
                vec![("K_lo".into(), *lo), ("K_hi".into(), *hi)]
            }
        }
    }
}

/// How expectations over the next (block) state are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelMode {
    Quadrature { order: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

type StepFn<'a> = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'a>;

/// One transition `x ↦ step(x, w̄)` with `w̄` drawn from a node set:
/// quadrature nodes, or a fixed table of Monte Carlo draws shared by all
/// states (common random numbers).
pub struct Kernel<'a> {
    step: StepFn<'a>,
    rule: QuadratureRule,
    method: Method,
}

impl<'a> Kernel<'a> {
    pub fn new(
        step: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'a,
        rule: QuadratureRule,
        method: Method,
    ) -> Self {
        Self {
            step: Box::new(step),
            rule,
            method,
        }
    }

    /// Closed loop of `s` under `controller`, one block of `period()` steps.
    pub fn closed_loop(s: &'a Scenario, controller: &'a dyn Controller, mode: KernelMode) -> Self {
        let kappa = controller.period();
        let p = s.noise.dim;
        let (rule, method) = match mode {
            KernelMode::Quadrature { order } => {
                let r = s.noise.quadrature(order).power(kappa);
                let n = r.len();
                (r, Method::Quadrature { nodes: n })
            }
            KernelMode::MonteCarlo { samples, seed } => {
                let mut rng = stream_rng(seed, 0xC0FFEE);
                let draws: Vec<Vec<f64>> = (0..samples)
                    .map(|_| {
                        let mut w = Vec::with_capacity(kappa * p);
                        for _ in 0..kappa {
                            w.extend(s.noise.sample(&mut rng));
                        }
                        w
                    })
                    .collect();
                (
                    QuadratureRule::equal_weights(&draws),
                    Method::MonteCarlo { samples, seed },
                )
            }
        };
        let step = move |x: &[f64], w: &[f64]| {
            let controls = controller.block(x);
            let mut y = x.to_vec();
            for (j, u) in controls.iter().enumerate() {
                y = s.system.transition(&y, u, &w[j * p..(j + 1) * p]);
            }
            y
        };
        Self::new(step, rule, method)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn is_monte_carlo(&self) -> bool {
        matches!(self.method, Method::MonteCarlo { .. })
    }

    /// `(E_x[h(x₁)], standard error)`; the error is 0 for quadrature.
    pub fn expect(&self, x: &[f64], h: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync)) -> (f64, f64) {
        let mut mean = 0.0;
        let mut sq = 0.0;
        for (w, wt) in self.rule.iter() {
            let y = (self.step)(x, w);
            let v = h(x, &y);
            mean += wt * v;
            sq += wt * v * v;
        }
        if self.is_monte_carlo() {
            let n = self.rule.len() as f64;
            let var = (sq - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            (mean, (var / n).sqrt())
        } else {
            (mean, 0.0)
        }
    }

    fn tolerance(&self) -> f64 {
        if self.is_monte_carlo() {
            0.0
        } else {
            QUAD_TOL
        }
    }

    fn ci(&self, se: f64) -> f64 {
        MC_SIGMAS * se
    }
}

/// Noise expectation rule for single-step scenario checks.
fn scenario_rule(s: &Scenario, mode: KernelMode) -> (QuadratureRule, Method) {
    match mode {
        KernelMode::Quadrature { order } => {
            let r = s.noise.quadrature(order);
            let n = r.len();
            (r, Method::Quadrature { nodes: n })
        }
        KernelMode::MonteCarlo { samples, seed } => {
            let mut rng = stream_rng(seed, 0xA3);
            let draws: Vec<Vec<f64>> = (0..samples).map(|_| s.noise.sample(&mut rng)).collect();
            (
                QuadratureRule::equal_weights(&draws),
                Method::MonteCarlo { samples, seed },
            )
        }
    }
}

/// Default expectation mode for a scenario: quadrature unless the noise is
/// an empirical table (which is then used in full).
pub fn default_mode(s: &Scenario) -> KernelMode {
    match s.noise.law {
        NoiseLaw::Empirical { .. } => KernelMode::Quadrature { order: 1 },
        _ => KernelMode::Quadrature {
            order: s.hints.quadrature_order,
        },
    }
}

fn expect_with(rule: &QuadratureRule, mc: bool, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let mut mean = 0.0;
    let mut sq = 0.0;
    for (w, wt) in rule.iter() {
        let v = f(w);
        mean += wt * v;
        sq += wt * v * v;
    }
    if mc {
        let n = rule.len() as f64;
        let var = (sq - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
        (mean, (var / n).sqrt())
    } else {
        (mean, 0.0)
    }
}

/// `T_g(z) = c(z, g(z)) − c_F(z) + E[c_F(f(z, g(z), w))]` with its standard error.
pub fn t_g(s: &Scenario, g: &StagePolicy, z: &[f64], rule: &QuadratureRule, mc: bool) -> (f64, f64) {
    let u = g.apply(z);
    let (e, se) = expect_with(rule, mc, |w| s.cost.terminal(&s.system.transition(z, &u, w)));
    (s.cost.stage(z, &u) - s.cost.terminal(z) + e, se)
}

/// Options for [`check_a3`].
#[derive(Debug, Clone)]
pub struct A3Options {
    pub mode: KernelMode,
    pub inside_points: usize,
    pub outside_points: usize,
    /// Outer shell size relative to `K`.
    pub outer_factor: f64,
    /// Declared bound for the first condition; `None` reports the estimate.
    pub declared_b: Option<f64>,
}

impl A3Options {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self {
            mode: default_mode(s),
            inside_points: 401,
            outside_points: 1000,
            outer_factor: 5.0,
            declared_b: None,
        }
    }
}

/// Output of [`check_a3`].
#[derive(Debug, Clone)]
pub struct A3Result {
    pub certificate: DriftCertificate,
    /// Estimated `sup_{z∈K} T_g(z)` (plus CI when sampled).
    pub b: f64,
}

/// Checks `sup_K T_g ≤ b` and `T_g ≤ 0` outside `K`.
pub fn check_a3(s: &Scenario, g: &StagePolicy, k: &ExclusionSet, opts: &A3Options) -> Result<A3Result> {
    let d = s.state_dim();
    let (rule, method) = scenario_rule(s, opts.mode);
    let mc = matches!(method, Method::MonteCarlo { .. });
    let inside = k.inside_points(d, opts.inside_points)?;
    let vals: Vec<(f64, f64)> = inside.par_iter().map(|z| t_g(s, g, z, &rule, mc)).collect();
    let mut b_hat = f64::NEG_INFINITY;
    for (v, se) in &vals {
        b_hat = b_hat.max(v + MC_SIGMAS * se);
    }
    if !b_hat.is_finite() {
        return Err(Error::Evaluation("sup of T_g over K is not finite".into()));
    }
    let outside = k.outside_points(d, opts.outside_points, opts.outer_factor)?;
    let margins: Vec<(Vec<f64>, f64, f64)> = outside
        .par_iter()
        .map(|z| {
            let (v, se) = t_g(s, g, z, &rule, mc);
            (z.clone(), v, MC_SIGMAS * se)
        })
        .collect();
    let tol = if mc { 0.0 } else { QUAD_TOL };
    let mut constants = vec![("b".to_string(), b_hat)];
    constants.extend(k.describe());
    let mut cert = DriftCertificate::from_margins(CertificateKind::A3, &margins, tol, method, constants);
    if let Some(b) = opts.declared_b {
        cert.constants.push(("b_declared".into(), b));
        if b_hat > b + tol {
            cert = cert.fail(format!("sup over K of T_g = {b_hat} exceeds declared b = {b}"));
        }
    }
    Ok(A3Result {
        certificate: cert,
        b: b_hat,
    })
}

/// `E_x[V(x₁)] ≤ λ° V(x)` outside `K`. Margins are `E_x[V(x₁)]/V(x) − λ°`.
/// Also reports `β̂ = sup_{x ∈ inside} E_x[V(x₁)]`.
pub fn check_geometric_drift(
    kernel: &Kernel<'_>,
    v: &(dyn Fn(&[f64]) -> f64 + Sync),
    lambda_circ: f64,
    k: &ExclusionSet,
    test_states: &[Vec<f64>],
    inside_states: &[Vec<f64>],
) -> DriftCertificate {
    let (outside, skipped): (Vec<&Vec<f64>>, usize) = {
        let o: Vec<&Vec<f64>> = test_states.iter().filter(|x| !k.contains(x)).collect();
        let sk = test_states.len() - o.len();
        (o, sk)
    };
    let h = |_: &[f64], y: &[f64]| v(y);
    let margins: Vec<(Vec<f64>, f64, f64)> = outside
        .par_iter()
        .map(|x| {
            let vx = v(x);
            let (e, se) = kernel.expect(x, &h);
            ((*x).clone(), e / vx - lambda_circ, kernel.ci(se) / vx)
        })
        .collect();
    let beta_hat = inside_states
        .par_iter()
        .map(|x| {
            let (e, se) = kernel.expect(x, &h);
            e + kernel.ci(se)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let mut constants = vec![
        ("lambda_circ".to_string(), lambda_circ),
        ("beta_hat".to_string(), beta_hat),
    ];
    constants.extend(k.describe());
    let mut cert = DriftCertificate::from_margins(
        CertificateKind::Geometric,
        &margins,
        kernel.tolerance(),
        kernel.method(),
        constants,
    );
    cert.skipped = skipped;
    if !(0.0..1.0).contains(&lambda_circ) {
        cert = cert.fail(format!("lambda_circ = {lambda_circ} is not in [0, 1)"));
    }
    cert
}

/// `E_x[V(x₁)] − V(x) ≤ −β` outside `K`, plus the conditional jump moment
/// `E_x|V(x₁) − V(x)|^{2+ε} ≤ M` on `jump_states`. With `m = None` the
/// largest estimated moment is used as `M`.
#[allow(clippy::too_many_arguments)]
pub fn check_constant_drift(
    kernel: &Kernel<'_>,
    v: &(dyn Fn(&[f64]) -> f64 + Sync),
    beta: f64,
    k: &ExclusionSet,
    epsilon: f64,
    m: Option<f64>,
    test_states: &[Vec<f64>],
    jump_states: &[Vec<f64>],
) -> DriftCertificate {
    let outside: Vec<&Vec<f64>> = test_states.iter().filter(|x| !k.contains(x)).collect();
    let skipped = test_states.len() - outside.len();
    let h = |_: &[f64], y: &[f64]| v(y);
    let margins: Vec<(Vec<f64>, f64, f64)> = outside
        .par_iter()
        .map(|x| {
            let (e, se) = kernel.expect(x, &h);
            ((*x).clone(), e - v(x) + beta, kernel.ci(se))
        })
        .collect();
    let p = 2.0 + epsilon;
    let jump = |x: &[f64], y: &[f64]| (v(y) - v(x)).abs().powf(p);
    let moments: Vec<(f64, f64)> = jump_states.par_iter().map(|x| kernel.expect(x, &jump)).collect();
    let m_hat = moments
        .iter()
        .map(|(e, se)| e + kernel.ci(*se))
        .fold(f64::NEG_INFINITY, f64::max);
    let m_used = m.unwrap_or(m_hat);
    let mut constants = vec![
        ("beta".to_string(), beta),
        ("epsilon".to_string(), epsilon),
        ("M".to_string(), m_used),
        ("M_hat".to_string(), m_hat),
    ];
    constants.extend(k.describe());
    let mut cert = DriftCertificate::from_margins(
        CertificateKind::Constant,
        &margins,
        kernel.tolerance(),
        kernel.method(),
        constants,
    );
    cert.skipped = skipped;
    if !(beta > 0.0 && epsilon > 0.0) {
        cert = cert.fail("beta and epsilon must be positive");
    } else if !m_hat.is_finite() {
        cert = cert.fail("jump moment is not finite");
    } else if m_hat > m_used {
        cert = cert.fail(format!("jump moment {m_hat} exceeds M = {m_used}"));
    }
    cert
}

/// `E_x[V(x₁)] − V(x) ≤ −c(x, π₀*(x)) + b` under `π̂`, with an extra
/// absolute tolerance for value-function approximation error.
pub fn check_theorem1(
    s: &Scenario,
    v: &dyn ValueFn,
    first_stage: &StagePolicy,
    b: f64,
    test_states: &[Vec<f64>],
    mode: KernelMode,
    extra_tolerance: f64,
) -> DriftCertificate {
    let kernel = Kernel::closed_loop(s, first_stage, mode);
    let h = |_: &[f64], y: &[f64]| v.value(y);
    let margins: Vec<(Vec<f64>, f64, f64)> = test_states
        .par_iter()
        .map(|x| {
            let u = first_stage.apply(x);
            let (e, se) = kernel.expect(x, &h);
            (x.clone(), e - v.value(x) + s.cost.stage(x, &u) - b, kernel.ci(se))
        })
        .collect();
    DriftCertificate::from_margins(
        CertificateKind::Theorem1,
        &margins,
        kernel.tolerance() + extra_tolerance,
        kernel.method(),
        vec![("b".into(), b), ("extra_tolerance".into(), extra_tolerance)],
    )
}

/// `inf c` and `inf E[c_F ∘ f]` over the grid nodes and control
/// discretization of the scenario.
pub fn cost_infima(s: &Scenario, mode: KernelMode) -> Result<(f64, f64)> {
    let ctx = crate::dpsolve::BackupContext::for_scenario(s)?;
    let grid = crate::grid::Grid::uniform(&s.hints.grid_min, &s.hints.grid_max, &s.hints.grid_points)?;
    let (rule, method) = scenario_rule(s, mode);
    let mc = matches!(method, Method::MonteCarlo { .. });
    let nodes: Vec<Vec<f64>> = grid.nodes().collect();
    let (inf_c, inf_e) = nodes
        .par_iter()
        .map(|z| {
            let mut ic = f64::INFINITY;
            let mut ie = f64::INFINITY;
            for u in &ctx.controls {
                ic = ic.min(s.cost.stage(z, u));
                let (e, _) = expect_with(&rule, mc, |w| s.cost.terminal(&s.system.transition(z, u, w)));
                ie = ie.min(e);
            }
            (ic, ie)
        })
        .reduce(
            || (f64::INFINITY, f64::INFINITY),
            |a, b| (a.0.min(b.0), a.1.min(b.1)),
        );
    Ok((inf_c, inf_e))
}

/// `c(x,π₀*(x)) + (N−1)·inf c + inf E[c_F∘f] ≤ V(x) ≤ c_F(x) + N·b`.
pub fn check_sandwich(
    s: &Scenario,
    v: &dyn ValueFn,
    first_stage: &StagePolicy,
    b: f64,
    infima: (f64, f64),
    test_states: &[Vec<f64>],
    extra_tolerance: f64,
) -> DriftCertificate {
    let n = s.horizon as f64;
    let (inf_c, inf_e) = infima;
    let margins: Vec<(Vec<f64>, f64, f64)> = test_states
        .par_iter()
        .map(|x| {
            let u = first_stage.apply(x);
            let val = v.value(x);
            let lower = s.cost.stage(x, &u) + (n - 1.0) * inf_c + inf_e;
            let upper = s.cost.terminal(x) + n * b;
            (x.clone(), (lower - val).max(val - upper), 0.0)
        })
        .collect();
    DriftCertificate::from_margins(
        CertificateKind::Sandwich,
        &margins,
        QUAD_TOL + extra_tolerance,
        Method::Exact,
        vec![
            ("b".into(), b),
            ("inf_c".into(), inf_c),
            ("inf_E_cF".into(), inf_e),
            ("N".into(), n),
        ],
    )
}

/// Radii used for the empirical radial-growth test.
pub const GROWTH_RADII: [f64; 5] = [4.0, 8.0, 16.0, 32.0, 64.0];

/// Whether `h` grows along rays: non-decreasing over [`GROWTH_RADII`] and at
/// least doubling between the first and the last radius, on every ray.
pub fn radially_unbounded(dim: usize, h: &dyn Fn(&[f64]) -> f64) -> bool {
    let dirs = shell_points(dim, 1.0, 1.0, 16);
    dirs.iter().all(|u| {
        let vals: Vec<f64> = GROWTH_RADII
            .iter()
            .map(|r| h(&u.iter().map(|c| c * r).collect::<Vec<_>>()))
            .collect();
        vals.windows(2).all(|w| w[1] >= w[0])
            && vals[vals.len() - 1] >= 2.0 * vals[0]
            && vals[vals.len() - 1] > 0.0
    })
}

/// Hypotheses and conclusion of the cost-selection route to geometric
/// drift: `c = c_s + c_c`, `c_F` and `c_s` radially unbounded,
/// `c_s ≥ α c_F` outside `K`; then `E V(x₁) − V(x) ≤ −(α/2)V(x)` for
/// `V = V_N*` outside `K′ = {V < 2(α⁻¹ + N)b}`. Margins of the last part are
/// relative to `V(x)`.
#[allow(clippy::too_many_arguments)]
pub fn check_geometric_from_costs(
    s: &Scenario,
    alpha: f64,
    k: &ExclusionSet,
    v: &dyn ValueFn,
    first_stage: &StagePolicy,
    b: f64,
    candidate_states: &[Vec<f64>],
    mode: KernelMode,
    extra_tolerance: f64,
) -> Result<DriftCertificate> {
    if !s.cost.has_separable() {
        return Err(Error::Validation("cost has no separable decomposition".into()));
    }
    let d = s.state_dim();
    let threshold = 2.0 * (1.0 / alpha + s.horizon as f64) * b;
    let constants = vec![
        ("alpha".to_string(), alpha),
        ("b".to_string(), b),
        ("K_prime_level".to_string(), threshold),
    ];
    let blank = |reason: &str| {
        let mut c = DriftCertificate::from_margins(
            CertificateKind::GeometricFromCosts,
            &[],
            0.0,
            Method::Exact,
            constants.clone(),
        );
        c.reason = Some(reason.to_string());
        c
    };
    let cf = |z: &[f64]| s.cost.terminal(z);
    let cs = |z: &[f64]| s.cost.state_part(z).unwrap_or(0.0);
    if !radially_unbounded(d, &cf) {
        return Ok(blank("c_F not radially unbounded"));
    }
    if !radially_unbounded(d, &cs) {
        return Ok(blank("c_s not radially unbounded"));
    }
    if !(alpha > 0.0) {
        return Ok(blank("alpha must be positive"));
    }
    // c_s ≥ α c_F outside K
    let ratio_points = k.outside_points(d, 400, 16.0)?;
    for z in &ratio_points {
        let (a, c) = (cs(z), alpha * cf(z));
        if a < c - QUAD_TOL * c.abs().max(1.0) {
            let mut cert = blank("c_s < alpha c_F outside K");
            cert.worst_state = z.clone();
            cert.worst_margin = (c - a) / c.abs().max(1e-300);
            return Ok(cert);
        }
    }
    let states: Vec<Vec<f64>> = candidate_states
        .iter()
        .filter(|x| v.value(x) >= threshold)
        .cloned()
        .collect();
    let skipped = candidate_states.len() - states.len();
    let kernel = Kernel::closed_loop(s, first_stage, mode);
    let h = |_: &[f64], y: &[f64]| v.value(y);
    let margins: Vec<(Vec<f64>, f64, f64)> = states
        .par_iter()
        .map(|x| {
            let vx = v.value(x);
            let (e, se) = kernel.expect(x, &h);
            (x.clone(), (e - vx) / vx + 0.5 * alpha, kernel.ci(se) / vx)
        })
        .collect();
    let mut cert = DriftCertificate::from_margins(
        CertificateKind::GeometricFromCosts,
        &margins,
        kernel.tolerance() + extra_tolerance,
        kernel.method(),
        constants,
    );
    cert.skipped = skipped;
    if margins.is_empty() {
        cert.reason = Some("no candidate states outside K'".into());
    }
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{builtin_scenario, ControlSet, CostSpec, NoiseModel, SolverHints, SystemModel};
    use crate::quadrature::gaussian_rule;

    fn scalar_chain(gain: f64, sigma: f64) -> Kernel<'static> {
        let rule = gaussian_rule(&[0.0], &DMatrix::from_element(1, 1, sigma * sigma), 40);
        let n = rule.len();
        Kernel::new(
            move |x, w| vec![gain * x[0] + w[0]],
            rule,
            Method::Quadrature { nodes: n },
        )
    }

    #[test]
    fn contraction_passes_with_zero_margin() {
        let k = scalar_chain(0.5, 0.0);
        let pts: Vec<Vec<f64>> = (1..50).map(|i| vec![i as f64 * 0.3]).collect();
        let cert = check_geometric_drift(
            &k,
            &|x: &[f64]| x[0].abs(),
            0.5,
            &ExclusionSet::NormBall { radius: 0.1 },
            &pts,
            &[],
        );
        assert!(cert.passed);
        assert!((cert.worst_margin + QUAD_TOL).abs() < 1e-12);
    }

    #[test]
    fn triangle_inequality_bound() {
        // E|0.5x + w| ≤ 0.5|x| + μ ≤ 0.75|x| once |x| ≥ 4μ
        let sigma = 1.0;
        let mu = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let k = scalar_chain(0.5, sigma);
        let ball = ExclusionSet::NormBall { radius: 4.0 * mu };
        let pts = ball.outside_points(1, 300, 10.0).unwrap();
        let cert = check_geometric_drift(&k, &|x: &[f64]| x[0].abs(), 0.75, &ball, &pts, &[]);
        assert!(cert.passed, "{cert}");
        assert_eq!(cert.skipped, 0);
    }

    #[test]
    fn a3_trivial_identity() {
        let system = SystemModel::general(1, 1, 1, std::sync::Arc::new(|x: &[f64], _: &[f64], _: &[f64]| x.to_vec()));
        let noise = NoiseModel::gaussian(vec![0.0], DMatrix::zeros(1, 1), 0).unwrap();
        let cost = CostSpec::custom("flat", |_, _| 0.0, |_| 1.0);
        let s = Scenario::from_parts(
            "id",
            1,
            system,
            noise,
            cost,
            ControlSet::Unconstrained { dim: 1 },
            SolverHints::default_for(1, 1),
        )
        .unwrap();
        let g = StagePolicy::analytic("zero", 1, 1, |_| vec![0.0]);
        let r = check_a3(
            &s,
            &g,
            &ExclusionSet::NormBall { radius: 1.0 },
            &A3Options::for_scenario(&s),
        )
        .unwrap();
        assert_eq!(r.b, 0.0);
        assert!(r.certificate.passed);
    }

    #[test]
    fn indicator_a3_and_constant_drift() {
        let s = builtin_scenario("integrator-indicator").unwrap();
        let g = StagePolicy::neg_sat();
        let k = ExclusionSet::Interval { lo: -2.0, hi: 2.0 };
        let r = check_a3(&s, &g, &k, &A3Options::for_scenario(&s)).unwrap();
        assert!(r.certificate.passed, "{}", r.certificate);
        assert!((r.b - 1.0 / 3.0).abs() < 1e-9, "b = {}", r.b);
        let kernel = Kernel::closed_loop(&s, &g, default_mode(&s));
        let pts = k.outside_points(1, 500, 5.0).unwrap();
        let jump_pts: Vec<Vec<f64>> = (0..=100).map(|i| vec![-10.0 + 0.2 * i as f64]).collect();
        let cert = check_constant_drift(
            &kernel,
            &|x: &[f64]| x[0].abs(),
            1.0,
            &k,
            2.0,
            None,
            &pts,
            &jump_pts,
        );
        assert!(cert.passed, "{cert}");
        assert!(pts.iter().all(|x| x[0].abs() > 2.0 && x[0].abs() <= 10.0));
    }

    #[test]
    fn deterministic_constant_drift() {
        let rule = QuadratureRule::point(&[0.0]);
        let k = Kernel::new(|x, _| vec![x[0] - 1.0], rule, Method::Exact);
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![2.5 + i as f64]).collect();
        let cert = check_constant_drift(
            &k,
            &|x: &[f64]| x[0].abs(),
            1.0,
            &ExclusionSet::Interval { lo: -2.0, hi: 2.0 },
            2.0,
            None,
            &pts,
            &pts,
        );
        assert!(cert.passed);
        assert_eq!(cert.constant("M_hat"), Some(1.0));
    }

    #[test]
    fn indicator_fails_cost_selection_route() {
        let s = builtin_scenario("integrator-indicator").unwrap();
        let g = StagePolicy::neg_sat();
        let v = |x: &[f64]| x[0].abs();
        let cert = check_geometric_from_costs(
            &s,
            0.5,
            &ExclusionSet::Interval { lo: -2.0, hi: 2.0 },
            &v,
            &g,
            1.0 / 3.0,
            &[vec![5.0]],
            default_mode(&s),
            0.0,
        )
        .unwrap();
        assert!(!cert.passed);
        assert_eq!(cert.reason.as_deref(), Some("c_s not radially unbounded"));
    }

    #[test]
    fn verdict_is_margin_plus_ci() {
        let m = vec![(vec![0.0], -0.5, 0.2), (vec![1.0], -0.1, 0.05)];
        let c = DriftCertificate::from_margins(CertificateKind::Geometric, &m, 0.0, Method::Exact, vec![]);
        assert!(c.passed);
        assert_eq!(c.worst_state, vec![1.0]);
        let m = vec![(vec![0.0], -0.1, 0.2)];
        let c = DriftCertificate::from_margins(CertificateKind::Geometric, &m, 0.0, Method::Exact, vec![]);
        assert!(!c.passed);
    }
}
