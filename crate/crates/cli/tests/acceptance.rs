//! Acceptance gate: one pass/fail line per criterion, with runtime limits.
//! Reference values come from small oracles defined in this file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rhc_cli::{run, RunManifest, Stage};
use rhc_core::certify::{
    check_a3, check_geometric_drift, check_theorem1, default_mode, A3Options, ExclusionSet, Kernel, KernelMode,
};
use rhc_core::dpsolve::{solve_horizon, ValueFn};
use rhc_core::linalg::norm;
use rhc_core::models::{
    builtin_scenario, ControlSet, CostSpec, NoiseModel, Scenario, SolverHints, SystemModel,
};
use rhc_core::montecarlo::{
    average_cost, check_cesaro_condition, check_theorem2_inequality, envelope_margin, expected_lyapunov_sequence,
    simulate, tail_estimate, tail_log_slope, Record, Theorem2Options,
};
use rhc_core::policy::{PolicySequence, StagePolicy};
use rhc_core::riccati::finite_horizon_lq_value;
use rhc_core::sampling::shell_points;

type Check = Result<(bool, String), String>;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Scalar LQ constants for `A = B = Q = Σ = 1`, from the quadratic formula.
struct ScalarLq {
    k: f64,
    p: f64,
    lambda_circ: f64,
    k_level: f64,
    beta: f64,
    r_max: f64,
}

fn scalar_lq_oracle() -> ScalarLq {
    // Riccati with unit weights: p² − p − 1 = 0
    let p_ric = (1.0 + 5f64.sqrt()) / 2.0;
    let k = -p_ric / (1.0 + p_ric);
    let acl = 1.0 + k;
    let p = 1.0 / (1.0 - acl * acl);
    let s = 1.0 / p;
    let lambda_circ = 1.0 - s / 2.0;
    let k_level = p / (1.0 - lambda_circ);
    let beta = k_level * acl * acl + p;
    ScalarLq {
        k,
        p,
        lambda_circ,
        k_level,
        beta,
        r_max: 1.0 / (k * k),
    }
}

fn c1_lq_synthesis() -> Check {
    let s = builtin_scenario("lq").map_err(|e| e.to_string())?;
    let lq = s.lq.clone().ok_or("no LQ synthesis")?;
    let o = scalar_lq_oracle();
    let consts_ok = close(lq.k_gain[(0, 0)], o.k, 1e-9)
        && close(lq.p[(0, 0)], o.p, 1e-9)
        && close(lq.lambda_circ, o.lambda_circ, 1e-9)
        && close(lq.k_set_level, o.k_level, 1e-9)
        && close(lq.beta, o.beta, 1e-9)
        && close(lq.r_max, o.r_max, 1e-6);
    let g = StagePolicy::linear(lq.k_gain.clone());
    let kernel = Kernel::closed_loop(&s, &g, default_mode(&s));
    let k = ExclusionSet::Ellipsoid {
        p: lq.p.clone(),
        level: lq.k_set_level,
    };
    let pts = k.outside_points(1, 1000, 10.0).map_err(|e| e.to_string())?;
    let v = lq.lyapunov();
    let cert = check_geometric_drift(&kernel, &|x: &[f64]| v.value(x), lq.lambda_circ, &k, &pts, &[]);
    let ok = lq.lyapunov_residual <= 1e-9 && consts_ok && cert.passed && cert.test_points == 1000;
    Ok((
        ok,
        format!(
            "residual {:.1e}, lambda {:.6} (printed formula {:.6}), beta {:.6}, K level {:.6}, constants match oracle: {consts_ok}; drift on {} states, worst margin {:.3e}",
            lq.lyapunov_residual,
            lq.lambda_circ,
            lq.lambda_circ_as_printed,
            lq.beta,
            lq.k_set_level,
            cert.test_points,
            cert.worst_margin
        ),
    ))
}

fn c2_envelope() -> Check {
    let s = builtin_scenario("lq").map_err(|e| e.to_string())?;
    let lq = s.lq.clone().ok_or("no LQ synthesis")?;
    let g = StagePolicy::linear(lq.k_gain.clone());
    let x0 = [5.0];
    let e = simulate(&s, &g, "K", &x0, 200, 10_000, 2024, Record::Summary).map_err(|e| e.to_string())?;
    let v = lq.lyapunov();
    let seq = expected_lyapunov_sequence(&e, &v);
    let margin = envelope_margin(&seq, v.value(&x0), lq.lambda_circ, lq.beta, 200);
    Ok((
        margin <= 0.0 && seq.excluded_paths == 0,
        format!(
            "max over t<=200 of mean - envelope - 3se = {margin:.4}; E V(x_200) = {:.4} vs beta/(1-lambda) = {:.4}",
            seq.rows[200].mean,
            lq.beta / (1.0 - lq.lambda_circ)
        ),
    ))
}

fn lq_closed_form(s: &Scenario) -> Result<(Vec<rhc_core::riccati::QuadraticValue>, Vec<DMatrix<f64>>), String> {
    let lq = s.lq.as_ref().ok_or("no LQ synthesis")?;
    let (q, r, p, alpha) = s.quadratic_parts().ok_or("not quadratic")?;
    let (a, b) = s.system.linear_parts().ok_or("not linear")?;
    finite_horizon_lq_value(a, b, &(q * (1.0 - alpha)), &(r * alpha), p, &lq.sigma, s.horizon).map_err(|e| e.to_string())
}

fn c3_value_drift() -> Check {
    let s = builtin_scenario("lq").map_err(|e| e.to_string())?;
    let lq = s.lq.clone().ok_or("no LQ synthesis")?;
    let (values, gains) = lq_closed_form(&s)?;
    let pi0 = StagePolicy::linear(gains[0].clone());
    let states = shell_points(1, 0.0, 10.0, 1000);
    let cert = check_theorem1(&s, &values[0], &pi0, lq.a3_bound(), &states, default_mode(&s), 0.0);
    Ok((
        cert.passed && cert.test_points == 1000,
        format!(
            "b = tr(P Sigma) = {:.6}, {} states in |x| <= 10, worst margin {:.3e} (tolerance 1e-6)",
            lq.a3_bound(),
            cert.test_points,
            cert.worst_margin
        ),
    ))
}

/// Exhaustive minimisation over all Markov policies of the toy instance.
fn toy_enumeration(nodes: &[f64], controls: &[f64], noise: &[f64], horizon: usize) -> BTreeMap<i64, f64> {
    let f = |x: f64, u: f64, w: f64| (x + u + w).clamp(-2.0, 2.0);
    let c = |x: f64, u: f64| x * x + u * u;
    let cf = |x: f64| 2.0 * x * x;
    let n = nodes.len();
    let per_stage = controls.len().pow(n as u32);
    let idx = |x: f64| nodes.iter().position(|v| *v == x).unwrap();
    let mut best = BTreeMap::new();
    for x0 in nodes {
        let mut min = f64::INFINITY;
        for code in 0..per_stage.pow(horizon as u32) {
            // decode one control index per (stage, node)
            let mut table = vec![vec![0usize; n]; horizon];
            let mut rest = code;
            for row in table.iter_mut() {
                for slot in row.iter_mut() {
                    *slot = rest % controls.len();
                    rest /= controls.len();
                }
            }
            // expectation over the noise tree
            let mut dist = vec![(*x0, 1.0)];
            let mut total = 0.0;
            for row in &table {
                let mut next = Vec::new();
                for (x, p) in &dist {
                    let u = controls[row[idx(*x)]];
                    total += p * c(*x, u);
                    for w in noise {
                        next.push((f(*x, u, *w), p / noise.len() as f64));
                    }
                }
                dist = next;
            }
            total += dist.iter().map(|(x, p)| p * cf(*x)).sum::<f64>();
            min = min.min(total);
        }
        best.insert(*x0 as i64, min);
    }
    best
}

fn c4_dp_toy() -> Check {
    let system = SystemModel::general(
        1,
        1,
        1,
        Arc::new(|x: &[f64], u: &[f64], w: &[f64]| vec![(x[0] + u[0] + w[0]).clamp(-2.0, 2.0)]),
    );
    let noise = NoiseModel::empirical(vec![vec![-1.0], vec![1.0]], 0).map_err(|e| e.to_string())?;
    let cost = CostSpec::custom("toy", |x, u| x[0] * x[0] + u[0] * u[0], |x| 2.0 * x[0] * x[0]);
    let controls = ControlSet::boxed(vec![-1.0], vec![1.0]).map_err(|e| e.to_string())?;
    let mut hints = SolverHints::default_for(1, 1);
    hints.grid_min = vec![-2.0];
    hints.grid_max = vec![2.0];
    hints.grid_points = vec![5];
    hints.control_points = vec![3];
    let s = Scenario::from_parts("toy", 2, system, noise, cost, controls, hints).map_err(|e| e.to_string())?;
    let table = solve_horizon(&s).map_err(|e| e.to_string())?;
    let oracle = toy_enumeration(&[-2.0, -1.0, 0.0, 1.0, 2.0], &[-1.0, 0.0, 1.0], &[-1.0, 1.0], 2);
    let mut mismatches = 0;
    for (i, x) in table.grid.nodes().enumerate() {
        if table.values[0][i] != oracle[&(x[0] as i64)] {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0 && table.grid.len() == 5,
        format!("5 nodes, 3 controls, N = 2, 59049 policies enumerated; {mismatches} mismatches"),
    ))
}

fn c5_dp_vs_riccati() -> Check {
    let s = builtin_scenario("lq").map_err(|e| e.to_string())?;
    let (values, _) = lq_closed_form(&s)?;
    let table = solve_horizon(&s).map_err(|e| e.to_string())?;
    let sd = s.noise.covariance()[(0, 0)].sqrt();
    let (lo, hi) = (table.grid.lower()[0], table.grid.upper()[0]);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, x) in table.grid.nodes().enumerate() {
        if x[0] >= lo + 3.0 * sd && x[0] <= hi - 3.0 * sd {
            worst = worst.max((table.values[0][i] - values[0].value(&x)).abs());
            count += 1;
        }
    }
    Ok((
        worst <= 1e-3 && table.grid.len() == 401,
        format!("401-node grid, {count} interior nodes, max |V_grid - V_closed| = {worst:.3e}"),
    ))
}

fn c6_indicator() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut m = RunManifest::new("integrator-indicator", dir.path().join("out"));
    m.stages = vec![Stage::Certify];
    let out = run(&m).map_err(|e| e.to_string())?;
    let get = |n: &str| out.certificates.iter().find(|c| c.name == n);
    let a3 = get("a3").ok_or("a3 missing")?;
    let cd = get("constant_drift").ok_or("constant_drift missing")?;
    let gfc = get("geometric_from_costs").ok_or("geometric_from_costs missing")?;
    let k_ok = a3.constant("K_lo") == Some(-2.0) && a3.constant("K_hi") == Some(2.0);
    let cd_ok = cd.passed && cd.constant("beta") == Some(1.0) && cd.constant("epsilon") == Some(2.0);
    let gfc_ok = !gfc.passed && gfc.reason.as_deref() == Some("c_s not radially unbounded");
    Ok((
        a3.passed && k_ok && cd_ok && gfc_ok && out.exit_code == 0,
        format!(
            "a3 {} (b = {:.4}, K = [-2, 2]: {k_ok}); constant drift {} (M = {:.4}); geometric-from-costs failed with '{}'; exit {}",
            if a3.passed { "pass" } else { "fail" },
            a3.constant("b").unwrap_or(f64::NAN),
            if cd.passed { "pass" } else { "fail" },
            cd.constant("M").unwrap_or(f64::NAN),
            gfc.reason.clone().unwrap_or_default(),
            out.exit_code
        ),
    ))
}

/// `ln E e^{|Y|}`, `Y ~ N(0, 1)`, by composite Simpson on [−12, 12].
fn rho_scalar_oracle() -> f64 {
    let n = 24_000;
    let (a, b) = (-12.0f64, 12.0f64);
    let h = (b - a) / n as f64;
    let f = |y: f64| (y.abs() - 0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let y = a + i as f64 * h;
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(y);
    }
    (sum * h / 3.0).ln()
}

fn c7_scalar_stabilizer() -> Check {
    let s = builtin_scenario("integrator-exponential").map_err(|e| e.to_string())?;
    let o = s.ortho.clone().ok_or("no stabilizer")?;
    let rho_oracle = rho_scalar_oracle();
    let rho3_oracle = (2.0 / std::f64::consts::PI).sqrt().ln();
    let rho_ok = close(o.rho_prop4.value, rho_oracle, 1e-6) && close(o.rho_example3.value, rho3_oracle, 1e-9);
    let stricter = o.rho_prop4.value.max(o.rho_example3.value);
    let lambda = (stricter - o.u_max).exp();
    let lambda_ok = close(o.lambda_circ, lambda, 1e-12);
    let g = o.as_stage_policy().ok_or("kappa != 1")?;
    let kernel = Kernel::closed_loop(&s, &g, default_mode(&s));
    let ball = ExclusionSet::NormBall { radius: 2.0 * stricter };
    let pts = ball.outside_points(1, 1000, 5.0).map_err(|e| e.to_string())?;
    let drift = check_geometric_drift(&kernel, &|x: &[f64]| x[0].abs().exp(), lambda, &ball, &pts, &[]);

    let steps = 10_000;
    let e = simulate(&s, &o, "prop4", &[1.0], steps, 1000, 31, Record::Summary).map_err(|e| e.to_string())?;
    let seq = expected_lyapunov_sequence(&e, &|x: &[f64]| norm(x).exp());
    let mut late: Vec<f64> = seq.rows[1000..].iter().map(|r| r.mean).collect();
    late.sort_by(f64::total_cmp);
    let median = late[late.len() / 2];
    let top = seq.rows.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)).unwrap();
    let bounded = top.mean <= 2.0 * median + 3.0 * top.stderr;

    let radii: Vec<f64> = (1..=60).map(|i| 0.25 * i as f64).collect();
    let rows = tail_estimate(&e, &radii, 1000, steps).map_err(|e| e.to_string())?;
    let slope = tail_log_slope(&rows, 100);
    let slope_ok = slope.is_some_and(|(sl, _, _)| sl <= -1.0 + 0.2);
    let (sl, r0, r1) = slope.unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    Ok((
        rho_ok && lambda_ok && drift.passed && bounded && slope_ok && seq.excluded_paths == 0,
        format!(
            "rho_prop4 {:.6} (oracle {rho_oracle:.6}), rho_example3 {:.6}, lambda {:.6}; drift outside |x| <= {:.4}: worst margin {:.3e}; max E e^|x_t| {:.4} at t = {} vs 2 x median {:.4}; tail slope {sl:.3} on r in [{r0}, {r1}]",
            o.rho_prop4.value,
            o.rho_example3.value,
            lambda,
            2.0 * stricter,
            drift.worst_margin,
            top.mean,
            top.t,
            2.0 * median
        ),
    ))
}

fn c8_rotation_block() -> Check {
    let s = builtin_scenario("ortho-rotation").map_err(|e| e.to_string())?;
    let o = s.ortho.clone().ok_or("no stabilizer")?;
    let kernel = Kernel::closed_loop(
        &s,
        &o,
        KernelMode::MonteCarlo {
            samples: s.hints.mc_samples,
            seed: 99,
        },
    );
    let k = ExclusionSet::NormBall { radius: o.drift_radius };
    let pts = k.outside_points(2, 200, 5.0).map_err(|e| e.to_string())?;
    let cert = check_geometric_drift(&kernel, &|x: &[f64]| norm(x).exp(), o.lambda_circ, &k, &pts, &[]);
    Ok((
        cert.passed && cert.test_points == 200,
        format!(
            "kappa {}, lambda {:.6}, K radius {:.4}; {} states, {} samples each, worst margin {:.3e} + 3 sigma {:.3e}",
            o.kappa,
            o.lambda_circ,
            o.drift_radius,
            cert.test_points,
            s.hints.mc_samples,
            cert.worst_margin,
            cert.ci_halfwidth
        ),
    ))
}

struct AverageCostInputs {
    v: Arc<dyn ValueFn>,
    pi0: StagePolicy,
    optimal: PolicySequence,
    g: StagePolicy,
    b: f64,
}

fn average_cost_checks(s: &Scenario, inputs: AverageCostInputs, x0: &[f64], order: usize) -> Check {
    let opts = Theorem2Options {
        k_max: 50,
        outer_paths: 1000,
        inner_paths: 100,
        seed: 5,
        order,
    };
    let table = check_theorem2_inequality(s, &*inputs.v, &inputs.pi0, &inputs.optimal, &inputs.g, x0, &opts)
        .map_err(|e| e.to_string())?;
    let e = simulate(s, &inputs.pi0, "pi_hat", x0, 10_000, 1000, 6, Record::Summary).map_err(|e| e.to_string())?;
    let seq = expected_lyapunov_sequence(&e, &*inputs.v);
    let ces = check_cesaro_condition(&seq, None).map_err(|e| e.to_string())?;
    let ac = average_cost(&e, inputs.b).map_err(|e| e.to_string())?;
    let worst = table
        .rows
        .iter()
        .map(|r| (r.lhs - r.rhs) / r.stderr.max(1e-300))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((
        table.passed() && ces.passed && ac.passed,
        format!(
            "{}: inequality holds for k <= 50 (worst (lhs - rhs)/se = {worst:.2}); Cesaro slope {:.2e} (se {:.2e}); A_T = {:.4} +- {:.4} vs b = {:.4}{}",
            s.name,
            ces.slope,
            ces.slope_se,
            ac.estimate,
            ac.stderr,
            ac.bound,
            if ac.non_stationary { " (non-stationarity flag)" } else { "" }
        ),
    ))
}

fn c9_average_cost() -> Check {
    let lq_s = builtin_scenario("lq").map_err(|e| e.to_string())?;
    let lq = lq_s.lq.clone().ok_or("no LQ synthesis")?;
    let (values, gains) = lq_closed_form(&lq_s)?;
    let stages: Vec<StagePolicy> = gains.into_iter().map(StagePolicy::linear).collect();
    let lq_inputs = AverageCostInputs {
        v: Arc::new(values[0].clone()),
        pi0: stages[0].clone(),
        optimal: PolicySequence { stages },
        g: StagePolicy::linear(lq.k_gain.clone()),
        b: lq.a3_bound(),
    };
    let (ok1, msg1) = average_cost_checks(&lq_s, lq_inputs, &[5.0], lq_s.hints.quadrature_order)?;

    let ex = builtin_scenario("integrator-exponential").map_err(|e| e.to_string())?;
    let o = ex.ortho.clone().ok_or("no stabilizer")?;
    let g = o.as_stage_policy().ok_or("kappa != 1")?;
    let a3 = check_a3(
        &ex,
        &g,
        &ExclusionSet::NormBall { radius: o.drift_radius },
        &A3Options::for_scenario(&ex),
    )
    .map_err(|e| e.to_string())?;
    let table = solve_horizon(&ex).map_err(|e| e.to_string())?;
    let ex_inputs = AverageCostInputs {
        v: Arc::new(table.v0()),
        pi0: table.stage_policy(0),
        optimal: table.optimal_sequence(),
        g,
        b: a3.b,
    };
    let (ok2, msg2) = average_cost_checks(&ex, ex_inputs, &[3.0], ex.hints.quadrature_order)?;
    Ok((ok1 && ok2 && a3.certificate.passed, format!("{msg1}; {msg2}")))
}

fn csv_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, fs::read(&p).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn c10_reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    let mut differing = Vec::new();
    for name in rhc_core::models::BUILTIN_NAMES {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let mut m = RunManifest::new(name, dir.path().join(format!("{name}-{rep}")));
            m.paths = Some(300);
            m.steps = Some(3000);
            run(&m).map_err(|e| e.to_string())?;
            runs.push(csv_files(&m.out)?);
        }
        if runs[0].keys().ne(runs[1].keys()) {
            differing.push(format!("{name}: file sets differ"));
        }
        for (file, bytes) in &runs[0] {
            compared += 1;
            if runs[1].get(file) != Some(bytes) {
                differing.push(format!("{name}/{file}"));
            }
        }
    }
    Ok((
        differing.is_empty() && compared > 0,
        format!(
            "all builtins, all stages, 300 paths x 3000 steps, run twice: {compared} CSV files compared, {} differ {:?}",
            differing.len(),
            differing
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, Duration, fn() -> Check); 10] = [
        ("1", "LQ synthesis and geometric drift", Duration::from_secs(10), c1_lq_synthesis),
        ("2", "Geometric-drift envelope on the LQ closed loop", Duration::from_secs(60), c2_envelope),
        ("3", "Value-function drift inequality (LQ, closed form)", Duration::from_secs(10), c3_value_drift),
        ("4", "DP equals exhaustive policy enumeration", Duration::from_secs(5), c4_dp_toy),
        ("5", "DP vs Riccati on a 401-node grid", Duration::from_secs(30), c5_dp_vs_riccati),
        ("6", "Indicator-cost integrator certificates", Duration::from_secs(60), c6_indicator),
        ("7", "Bounded-control stabilizer, scalar", Duration::from_secs(300), c7_scalar_stabilizer),
        ("8", "Bounded-control stabilizer, 2-D rotation block drift", Duration::from_secs(300), c8_rotation_block),
        ("9", "Average-cost inequality, Cesaro condition and bound", Duration::from_secs(1200), c9_average_cost),
        ("10", "Byte-identical reruns", Duration::from_secs(600), c10_reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, title, limit, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let result = check();
        let dt = t.elapsed();
        let (ok, detail) = match result {
            Ok((ok, d)) => (ok && dt <= limit, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let timing = format!("{:.2} s, limit {} s", dt.as_secs_f64(), limit.as_secs());
        println!(
            "[{}] criterion {id}: {title} ({timing}){}\n       {detail}",
            if ok { "PASS" } else { "FAIL" },
            if dt > limit { " over time limit" } else { "" }
        );
        if !ok {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
