//! Closed-loop simulation and estimators over trajectory ensembles.
//!
//! Path `i` draws its noise from `stream_rng(seed, i)`, so ensembles do not
//! depend on the number of worker threads.

use std::io::Write;

use rayon::prelude::*;

use crate::certify::t_g;
use crate::dpsolve::ValueFn;
use crate::linalg::norm;
use crate::models::Scenario;
use crate::policy::{Controller, PolicySequence, StagePolicy};
use crate::sampling::stream_rng;
use crate::{Error, Result};

/// What each path stores besides states and stage costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// States, controls, noise and costs.
    Full,
    /// States and costs only.
    Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    /// `(T+1)·d` values, row-major in time; shorter if flagged.
    pub states: Vec<f64>,
    pub controls: Option<Vec<f64>>,
    pub noise: Option<Vec<f64>>,
    /// `c(x_t, u_t)` for `t < T`.
    pub costs: Vec<f64>,
    /// First time index with a non-finite state.
    pub flagged_at: Option<usize>,
}

impl PathRecord {
    pub fn state(&self, t: usize, d: usize) -> &[f64] {
        &self.states[t * d..(t + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub scenario: String,
    pub policy: String,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    pub paths: Vec<PathRecord>,
}

impl TrajectoryEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn flagged(&self) -> usize {
        self.paths.iter().filter(|p| p.flagged_at.is_some()).count()
    }

    fn valid(&self) -> impl Iterator<Item = &PathRecord> {
        self.paths.iter().filter(|p| p.flagged_at.is_none())
    }
}

/// Simulates `paths` independent closed-loop trajectories of length `steps`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    s: &Scenario,
    policy: &dyn Controller,
    policy_label: &str,
    x0: &[f64],
    steps: usize,
    paths: usize,
    seed: u64,
    record: Record,
) -> Result<TrajectoryEnsemble> {
    let d = s.state_dim();
    let m = s.control_dim();
    let p = s.noise.dim;
    if policy.state_dim() != d || policy.control_dim() != m {
        return Err(Error::Dimension {
            what: "policy",
            expected: d,
            got: policy.state_dim(),
        });
    }
    if x0.len() != d {
        return Err(Error::Dimension {
            what: "initial state",
            expected: d,
            got: x0.len(),
        });
    }
    if steps == 0 || paths == 0 {
        return Err(Error::Validation("steps and paths must be at least 1".into()));
    }
    let kappa = policy.period();
    let records: Vec<PathRecord> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let full = record == Record::Full;
            let mut states = Vec::with_capacity((steps + 1) * d);
            let mut controls = full.then(|| Vec::with_capacity(steps * m));
            let mut noise = full.then(|| Vec::with_capacity(steps * p));
            let mut costs = Vec::with_capacity(steps);
            let mut flagged_at = None;
            let mut x = x0.to_vec();
            let mut w = vec![0.0; p];
            let mut block = Vec::new();
            states.extend_from_slice(&x);
            for t in 0..steps {
                if t % kappa == 0 {
                    block = policy.block(&x);
                }
                let u = &block[t % kappa];
                s.noise.sample_into(&mut rng, &mut w);
                costs.push(s.cost.stage(&x, u));
                if let Some(c) = controls.as_mut() {
                    c.extend_from_slice(u);
                }
                if let Some(n) = noise.as_mut() {
                    n.extend_from_slice(&w);
                }
                x = s.system.transition(&x, u, &w);
                if x.iter().any(|v| !v.is_finite()) {
                    flagged_at = Some(t + 1);
                    break;
                }
                states.extend_from_slice(&x);
            }
            PathRecord {
                states,
                controls,
                noise,
                costs,
                flagged_at,
            }
        })
        .collect();
    Ok(TrajectoryEnsemble {
        scenario: s.name.clone(),
        policy: policy_label.to_string(),
        x0: x0.to_vec(),
        steps,
        seed,
        state_dim: d,
        control_dim: m,
        noise_dim: p,
        paths: records,
    })
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqRow {
    pub t: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSequence {
    pub rows: Vec<SeqRow>,
    pub used_paths: usize,
    pub excluded_paths: usize,
    pub warning: Option<String>,
}

impl LyapunovSequence {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }
}

/// Per-step sample mean and standard error of `V(x_t)`. Paths that were
/// flagged, or on which `V` overflows, are excluded.
pub fn expected_lyapunov_sequence(e: &TrajectoryEnsemble, v: &dyn ValueFn) -> LyapunovSequence {
    let d = e.state_dim;
    let per_path: Vec<Option<Vec<f64>>> = e
        .paths
        .par_iter()
        .map(|p| {
            if p.flagged_at.is_some() {
                return None;
            }
            let vals: Vec<f64> = p.states.chunks(d).map(|x| v.value(x)).collect();
            vals.iter().all(|x| x.is_finite()).then_some(vals)
        })
        .collect();
    let used: Vec<&Vec<f64>> = per_path.iter().flatten().collect();
    let excluded = e.n_paths() - used.len();
    let n = used.len() as f64;
    let rows = (0..=e.steps)
        .map(|t| {
            let (mut s1, mut s2) = (0.0, 0.0);
            for vals in &used {
                s1 += vals[t];
            }
            let mean = s1 / n;
            for vals in &used {
                s2 += (vals[t] - mean).powi(2);
            }
            let se = if used.len() > 1 {
                (s2 / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            SeqRow { t, mean, stderr: se }
        })
        .collect();
    let warning = (excluded as f64 > 0.01 * e.n_paths() as f64).then(|| {
        format!("{excluded} of {} paths excluded (non-finite)", e.n_paths())
    });
    LyapunovSequence {
        rows,
        used_paths: used.len(),
        excluded_paths: excluded,
        warning,
    }
}

/// Largest `mean_t − (λ°ᵗV(x₀) + β/(1−λ°) + 3·se_t)` over `t ≤ t_max`.
pub fn envelope_margin(seq: &LyapunovSequence, v_x0: f64, lambda_circ: f64, beta: f64, t_max: usize) -> f64 {
    seq.rows
        .iter()
        .take(t_max + 1)
        .map(|r| {
            let bound = lambda_circ.powi(r.t as i32) * v_x0 + beta / (1.0 - lambda_circ);
            r.mean - bound - 3.0 * r.stderr
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailRow {
    pub t_start: usize,
    pub t_end: usize,
    pub r: f64,
    pub exceed: usize,
    pub total: usize,
    pub p_hat: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

/// 95% Wilson score interval.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = k as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Exceedance frequencies `P̂(‖x_t‖ > r)` pooled over `t ∈ [t_start, t_end]`
/// and all unflagged paths. Use `t_start == t_end` for a single time.
pub fn tail_estimate(e: &TrajectoryEnsemble, radii: &[f64], t_start: usize, t_end: usize) -> Result<Vec<TailRow>> {
    if radii.iter().any(|r| !(*r > 0.0)) || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("radii must be positive and increasing".into()));
    }
    if t_start > t_end || t_end > e.steps {
        return Err(Error::Validation(format!("time window [{t_start}, {t_end}] outside 0..={}", e.steps)));
    }
    let d = e.state_dim;
    let mut norms: Vec<f64> = e
        .valid()
        .flat_map(|p| (t_start..=t_end).map(move |t| norm(p.state(t, d))))
        .collect();
    norms.sort_by(f64::total_cmp);
    let total = norms.len();
    Ok(radii
        .iter()
        .map(|&r| {
            let below = norms.partition_point(|&x| x <= r);
            let exceed = total - below;
            let (lo, hi) = wilson_interval(exceed, total);
            TailRow {
                t_start,
                t_end,
                r,
                exceed,
                total,
                p_hat: if total > 0 { exceed as f64 / total as f64 } else { 0.0 },
                wilson_lo: lo,
                wilson_hi: hi,
            }
        })
        .collect())
}

/// Least-squares slope of `ln P̂` against `r` over rows with at least
/// `min_count` exceedances. `None` if fewer than three rows qualify.
pub fn tail_log_slope(rows: &[TailRow], min_count: usize) -> Option<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.exceed >= min_count)
        .map(|r| (r.r, r.p_hat.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let slope = ols_slope(&pts).0;
    Some((slope, pts[0].0, pts[pts.len() - 1].0))
}

/// `(slope, standard error)` of an ordinary least-squares line fit.
fn ols_slope(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum();
    let se = if pts.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, se)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageCostEstimate {
    /// `A_k` for `k = 0..T−1`.
    pub running: Vec<f64>,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub passed: bool,
    /// Mean change of `A_k` over the last quartile and its standard error.
    pub quartile_drift: f64,
    pub quartile_drift_se: f64,
    pub non_stationary: bool,
    pub used_paths: usize,
    pub excluded_paths: usize,
}

/// Running Cesàro means of the stage cost and the one-sided check
/// `A_T − 3·se ≤ b`.
pub fn average_cost(e: &TrajectoryEnsemble, b: f64) -> Result<AverageCostEstimate> {
    let valid: Vec<&PathRecord> = e.valid().filter(|p| p.costs.iter().all(|c| c.is_finite())).collect();
    if valid.is_empty() {
        return Err(Error::Evaluation("no finite paths".into()));
    }
    let t = e.steps;
    let n = valid.len() as f64;
    let mut sums = vec![0.0; t];
    for p in &valid {
        let mut acc = 0.0;
        for (k, c) in p.costs.iter().enumerate() {
            acc += c;
            sums[k] += acc;
        }
    }
    let running: Vec<f64> = sums.iter().enumerate().map(|(k, s)| s / n / (k + 1) as f64).collect();
    let finals: Vec<f64> = valid.iter().map(|p| p.costs.iter().sum::<f64>() / t as f64).collect();
    let (estimate, stderr) = mean_se(&finals);
    let q = (3 * t / 4).max(1);
    let drifts: Vec<f64> = valid
        .iter()
        .map(|p| {
            let early = p.costs[..q].iter().sum::<f64>() / q as f64;
            p.costs.iter().sum::<f64>() / t as f64 - early
        })
        .collect();
    let (drift, drift_se) = mean_se(&drifts);
    Ok(AverageCostEstimate {
        running,
        estimate,
        stderr,
        bound: b,
        passed: estimate - 3.0 * stderr <= b,
        quartile_drift: drift,
        quartile_drift_se: drift_se,
        non_stationary: drift.abs() > 3.0 * drift_se,
        used_paths: valid.len(),
        excluded_paths: e.n_paths() - valid.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CesaroCheck {
    pub slope: f64,
    pub slope_se: f64,
    pub max_mean: f64,
    pub cap: Option<f64>,
    pub bounded: bool,
    pub passed: bool,
}

/// Number of batches used for the slope test.
pub const CESARO_BATCHES: usize = 20;

/// Slope of the mean of `V(x_n)` against `n` over the last half, fitted to
/// batch means. Passes if the slope is not significantly positive
/// (`slope ≤ 3·se`) or if the whole sequence stays below `cap`.
pub fn check_cesaro_condition(seq: &LyapunovSequence, cap: Option<f64>) -> Result<CesaroCheck> {
    if seq.rows.len() < 100 {
        return Err(Error::Validation(format!(
            "sequence has {} points, need at least 100",
            seq.rows.len()
        )));
    }
    let half = &seq.rows[seq.rows.len() / 2..];
    let size = half.len() / CESARO_BATCHES;
    let pts: Vec<(f64, f64)> = half
        .chunks(size)
        .filter(|c| c.len() == size)
        .map(|c| {
            let t = c.iter().map(|r| r.t as f64).sum::<f64>() / size as f64;
            let m = c.iter().map(|r| r.mean).sum::<f64>() / size as f64;
            (t, m)
        })
        .collect();
    let (slope, slope_se) = ols_slope(&pts);
    let max_mean = seq.rows.iter().map(|r| r.mean).fold(f64::NEG_INFINITY, f64::max);
    let bounded = cap.is_some_and(|c| max_mean <= c);
    Ok(CesaroCheck {
        slope,
        slope_se,
        max_mean,
        cap,
        bounded,
        passed: slope <= 3.0 * slope_se || bounded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem2Row {
    pub k: usize,
    /// `E Σ_{ℓ≤k} c(x_ℓ, u_ℓ)` under `π̂`.
    pub lhs: f64,
    /// `V(x₀) − E V(x_{k+1}) + Σ_{ℓ≤k} E[E^{π*}[T_g̃(x_{ℓ+N}) | x_ℓ]]`.
    pub rhs: f64,
    /// Standard error of the paired difference `lhs − rhs`.
    pub stderr: f64,
    /// `Σ_{ℓ≤k}` of the inner `T_g̃` means.
    pub t_sum: f64,
    pub t_sum_se: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Table {
    pub rows: Vec<Theorem2Row>,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub excluded_paths: usize,
}

impl Theorem2Table {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.passed)
    }
}

/// Settings for [`check_theorem2_inequality`].
#[derive(Debug, Clone, Copy)]
pub struct Theorem2Options {
    pub k_max: usize,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub seed: u64,
    /// Quadrature order for the expectation inside `T_g̃`.
    pub order: usize,
}

/// Nested Monte Carlo check of the telescoping inequality for
/// `k = 0..=k_max`. Outer paths follow `π̂`; from every outer state `x_ℓ`
/// `inner_paths` rollouts of length `N` follow `π₀*, …, π_{N−1}*` and
/// evaluate `T_g̃` at the end. Inner noise for `(path, ℓ)` is shared by all
/// `k`.
#[allow(clippy::too_many_arguments)]
pub fn check_theorem2_inequality(
    s: &Scenario,
    v: &dyn ValueFn,
    pi_hat: &dyn Controller,
    optimal: &PolicySequence,
    g_tilde: &StagePolicy,
    x0: &[f64],
    opts: &Theorem2Options,
) -> Result<Theorem2Table> {
    if optimal.len() != s.horizon {
        return Err(Error::MissingStagePolicies(format!(
            "have {} of {} stages",
            optimal.len(),
            s.horizon
        )));
    }
    let steps = opts.k_max + 1;
    let outer = simulate(s, pi_hat, "pi_hat", x0, steps, opts.outer_paths, opts.seed, Record::Summary)?;
    let d = s.state_dim();
    let p = s.noise.dim;
    let rule = s.noise.quadrature(opts.order);
    let inner_seed = opts.seed ^ 0x5EED_1EAF_0000_0000;
    let v0 = v.value(x0);
    // Per outer path: (cumulative costs, V(x_{k+1}), cumulative inner T means)
    let per_path: Vec<Option<(Vec<f64>, Vec<f64>, Vec<f64>)>> = outer
        .paths
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            if path.flagged_at.is_some() {
                return None;
            }
            let mut cum_c = Vec::with_capacity(steps);
            let mut v_next = Vec::with_capacity(steps);
            let mut cum_t = Vec::with_capacity(steps);
            let (mut ac, mut at) = (0.0, 0.0);
            let mut w = vec![0.0; p];
            for l in 0..steps {
                ac += path.costs[l];
                let xl = path.state(l, d);
                let mut rng = stream_rng(inner_seed, (i * steps + l) as u64);
                let mut t_mean = 0.0;
                for _ in 0..opts.inner_paths {
                    let mut y = xl.to_vec();
                    for stage in &optimal.stages {
                        let u = stage.apply(&y);
                        s.noise.sample_into(&mut rng, &mut w);
                        y = s.system.transition(&y, &u, &w);
                    }
                    t_mean += t_g(s, g_tilde, &y, &rule, false).0;
                }
                at += t_mean / opts.inner_paths as f64;
                cum_c.push(ac);
                v_next.push(v.value(path.state(l + 1, d)));
                cum_t.push(at);
            }
            let ok = cum_c.iter().chain(&v_next).chain(&cum_t).all(|x| x.is_finite());
            ok.then_some((cum_c, v_next, cum_t))
        })
        .collect();
    let used: Vec<&(Vec<f64>, Vec<f64>, Vec<f64>)> = per_path.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Evaluation("no finite outer paths".into()));
    }
    let rows = (0..steps)
        .map(|k| {
            let diffs: Vec<f64> = used.iter().map(|(c, vn, t)| c[k] - (v0 - vn[k] + t[k])).collect();
            let lhs = mean_se(&used.iter().map(|(c, _, _)| c[k]).collect::<Vec<_>>()).0;
            let (t_sum, t_sum_se) = mean_se(&used.iter().map(|(_, _, t)| t[k]).collect::<Vec<_>>());
            let (diff, se) = mean_se(&diffs);
            Theorem2Row {
                k,
                lhs,
                rhs: lhs - diff,
                stderr: se,
                t_sum,
                t_sum_se,
                passed: diff <= 3.0 * se,
            }
        })
        .collect();
    Ok(Theorem2Table {
        rows,
        outer_paths: opts.outer_paths,
        inner_paths: opts.inner_paths,
        excluded_paths: opts.outer_paths - used.len(),
    })
}

/// `t,mean,stderr` rows.
pub fn write_sequence_csv<W: Write>(seq: &LyapunovSequence, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "mean", "stderr"])?;
    for r in &seq.rows {
        w.write_record([r.t.to_string(), format!("{:e}", r.mean), format!("{:e}", r.stderr)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tail_csv<W: Write>(rows: &[TailRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_start", "t_end", "r", "exceed", "total", "p_hat", "wilson_lo", "wilson_hi"])?;
    for r in rows {
        w.write_record([
            r.t_start.to_string(),
            r.t_end.to_string(),
            format!("{}", r.r),
            r.exceed.to_string(),
            r.total.to_string(),
            format!("{:e}", r.p_hat),
            format!("{:e}", r.wilson_lo),
            format!("{:e}", r.wilson_hi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_theorem2_csv<W: Write>(table: &Theorem2Table, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "lhs", "rhs", "stderr", "t_sum", "t_sum_se", "verdict"])?;
    for r in &table.rows {
        w.write_record([
            r.k.to_string(),
            format!("{:e}", r.lhs),
            format!("{:e}", r.rhs),
            format!("{:e}", r.stderr),
            format!("{:e}", r.t_sum),
            format!("{:e}", r.t_sum_se),
            if r.passed { "pass" } else { "fail" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{builtin_scenario, ControlSet, CostSpec, NoiseModel, SolverHints, SystemModel};
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn identity_scenario() -> Scenario {
        let system = SystemModel::general(1, 1, 1, Arc::new(|x: &[f64], _: &[f64], _: &[f64]| x.to_vec()));
        let noise = NoiseModel::gaussian(vec![0.0], DMatrix::from_element(1, 1, 1.0), 0).unwrap();
        Scenario::from_parts(
            "identity",
            1,
            system,
            noise,
            CostSpec::custom("zero", |_, _| 0.0, |_| 0.0),
            ControlSet::Unconstrained { dim: 1 },
            SolverHints::default_for(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn identity_paths_are_constant() {
        let s = identity_scenario();
        let g = StagePolicy::analytic("zero", 1, 1, |_| vec![0.0]);
        let e = simulate(&s, &g, "zero", &[2.5], 20, 4, 1, Record::Full).unwrap();
        for p in &e.paths {
            assert!(p.states.iter().all(|&x| x == 2.5));
        }
        let seq = expected_lyapunov_sequence(&e, &|_: &[f64]| 1.0);
        assert!(seq.rows.iter().all(|r| r.mean == 1.0 && r.stderr == 0.0));
        let ac = average_cost(&e, 0.0).unwrap();
        assert_eq!(ac.estimate, 0.0);
        assert!(ac.passed);
    }

    #[test]
    fn deterministic_descent_enters_k_at_eight() {
        let mut s = builtin_scenario("integrator-indicator").unwrap();
        s.noise = NoiseModel::gaussian(vec![0.0], DMatrix::zeros(1, 1), 0).unwrap();
        let e = simulate(&s, &StagePolicy::neg_sat(), "-sat", &[10.0], 12, 1, 3, Record::Summary).unwrap();
        let xs = &e.paths[0].states;
        for t in 0..=8 {
            assert_eq!(xs[t], 10.0 - t as f64);
        }
        let first_in = xs.iter().position(|x| x.abs() <= 2.0).unwrap();
        assert_eq!(first_in, 8);
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(3, 100);
        assert!(lo < 0.03 && 0.03 < hi);
        assert_eq!(wilson_interval(0, 10).0, 0.0);
    }

    #[test]
    fn tail_beyond_max_is_zero() {
        let s = builtin_scenario("lq").unwrap();
        let g = StagePolicy::linear(DMatrix::from_element(1, 1, -0.5));
        let e = simulate(&s, &g, "lin", &[0.0], 50, 20, 9, Record::Summary).unwrap();
        let rows = tail_estimate(&e, &[1.0, 1e3], 0, 50).unwrap();
        assert_eq!(rows[1].exceed, 0);
        assert!(tail_estimate(&e, &[2.0, 1.0], 0, 1).is_err());
    }

    #[test]
    fn linear_growth_fails_cesaro() {
        let rows: Vec<SeqRow> = (0..400).map(|t| SeqRow { t, mean: t as f64, stderr: 0.0 }).collect();
        let seq = LyapunovSequence { rows, used_paths: 1, excluded_paths: 0, warning: None };
        let c = check_cesaro_condition(&seq, None).unwrap();
        assert!(!c.passed);
        assert!((c.slope - 1.0).abs() < 1e-12);
        let rows: Vec<SeqRow> = (0..400).map(|t| SeqRow { t, mean: 3.0, stderr: 0.0 }).collect();
        let seq = LyapunovSequence { rows, used_paths: 1, excluded_paths: 0, warning: None };
        assert!(check_cesaro_condition(&seq, None).unwrap().passed);
    }

    #[test]
    fn overflow_is_flagged() {
        let system = SystemModel::general(1, 1, 1, Arc::new(|x: &[f64], _: &[f64], _: &[f64]| vec![x[0] * 1e200]));
        let mut s = identity_scenario();
        s.system = system;
        let g = StagePolicy::analytic("zero", 1, 1, |_| vec![0.0]);
        let e = simulate(&s, &g, "zero", &[1.0], 5, 3, 0, Record::Summary).unwrap();
        assert_eq!(e.flagged(), 3);
        let seq = expected_lyapunov_sequence(&e, &|x: &[f64]| x[0]);
        assert_eq!(seq.excluded_paths, 3);
        assert!(seq.warning.is_some());
    }
}
