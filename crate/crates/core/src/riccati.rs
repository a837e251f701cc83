//! Linear-quadratic synthesis: Lyapunov solves, a stabilizing Riccati gain,
//! finite-horizon Riccati recursion and the drift constants of the
//! quadratic Lyapunov function `V(x) = xᵀPx`.

use nalgebra::{Complex, DMatrix};

use crate::linalg::{generalized_sym_extremes, is_psd, quad_form, spectral_radius, symmetrize};
use crate::{Error, Result};

const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITER: usize = 100_000;

/// `V(x) = xᵀPx + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub p: DMatrix<f64>,
    pub offset: f64,
}

impl QuadraticValue {
    pub fn new(p: DMatrix<f64>, offset: f64) -> Self {
        Self {
            p: symmetrize(&p),
            offset,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        quad_form(&self.p, x) + self.offset
    }
}

/// Solves `AclᵀP Acl − P = −Q`.
pub fn solve_lyapunov(acl: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = acl.nrows();
    if !acl.is_square() || q.nrows() != d || q.ncols() != d {
        return Err(Error::Dimension {
            what: "Lyapunov operands",
            expected: d,
            got: q.nrows(),
        });
    }
    let rho = spectral_radius(acl);
    if rho >= 1.0 {
        return Err(Error::UnstableClosedLoop {
            spectral_radius: rho,
        });
    }
    // column-major vec: vec(Aᵀ P A) = (Aᵀ ⊗ Aᵀ) vec(P)
    let at = acl.transpose();
    let n = d * d;
    let op = DMatrix::<f64>::identity(n, n) - at.kronecker(&at);
    let lu = op.lu();
    let solve = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let v = nalgebra::DVector::from_column_slice(rhs.as_slice());
        let sol = lu.solve(&v).ok_or(Error::Singular("Lyapunov operator"))?;
        Ok(DMatrix::from_column_slice(d, d, sol.as_slice()))
    };
    let mut p = symmetrize(&solve(q)?);
    // one step of iterative refinement
    let resid = lyapunov_residual_matrix(acl, &p, q);
    p -= solve(&resid)?;
    Ok(symmetrize(&p))
}

fn lyapunov_residual_matrix(acl: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    // residual of P − AᵀPA − Q = 0
    p - acl.transpose() * p * acl - q
}

/// Max-abs residual `‖AclᵀPAcl − P + Q‖`.
pub fn lyapunov_residual(acl: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    lyapunov_residual_matrix(acl, p, q).amax()
}

/// PBH test: `rank [A − λI, B] = d` for every eigenvalue with `|λ| ≥ 1`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let d = a.nrows();
    let eig = a.complex_eigenvalues();
    eig.iter().all(|lam| {
        if lam.norm() < 1.0 - 1e-12 {
            return true;
        }
        let mut m = DMatrix::<Complex<f64>>::zeros(d, d + b.ncols());
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = Complex::new(a[(i, j)], 0.0);
            }
            m[(i, i)] -= lam;
            for j in 0..b.ncols() {
                m[(i, d + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = m.singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let tol = 1e-9 * smax.max(1.0);
        sv.iter().filter(|s| **s > tol).count() == d
    })
}

/// Result of the LQ synthesis.
///
/// `lambda_circ = 1 − s/2` and `k_set_level = tr(PΣ)/(1 − λ°)` with
/// `s = σ_min(Q)/σ_max(P)`; for `xᵀPx` above that level
/// `E V(x₁) ≤ (1 − s)V(x) + tr(PΣ) ≤ λ° V(x)`. The constants obtained from
/// `½(1 − s)` and `(2/λ°)·tr(PΣ)` are kept in the `*_as_printed` fields;
/// with them the drift inequality does not hold in general.
#[derive(Debug, Clone, PartialEq)]
pub struct LqSynthesis {
    pub k_gain: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Largest `r` with `Q − r KᵀK ⪰ 0` (infinite when `K = 0`).
    pub r_max: f64,
    pub sigma: DMatrix<f64>,
    pub lambda_circ: f64,
    pub beta: f64,
    pub k_set_level: f64,
    pub lambda_circ_as_printed: f64,
    pub k_set_level_as_printed: f64,
    pub trace_p_sigma: f64,
    pub lyapunov_residual: f64,
    pub riccati_iterations: usize,
    pub closed_loop_radius: f64,
}

impl LqSynthesis {
    pub fn closed_loop(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a + b * &self.k_gain
    }

    /// Lyapunov function `xᵀPx`.
    pub fn lyapunov(&self) -> QuadraticValue {
        QuadraticValue::new(self.p.clone(), 0.0)
    }

    /// Bound `b` for the cost pair `c = (1−α)zᵀQz + αuᵀRu`, `c_F = zᵀPz` under
    /// `g(z) = Kz`: the expression equals `−α zᵀ(Q − KᵀRK)z + tr(PΣ)`, whose
    /// supremum is `tr(PΣ)` at the origin.
    pub fn a3_bound(&self) -> f64 {
        self.trace_p_sigma
    }

    /// Level `ℓ` such that the expression is `≤ 0` outside `{zᵀPz ≤ ℓ}`.
    /// `None` when `α = 0` or `Q − KᵀRK` is singular.
    pub fn a3_level(&self, alpha: f64) -> Option<f64> {
        if alpha <= 0.0 {
            return None;
        }
        let gap = &self.q - self.k_gain.transpose() * &self.r * &self.k_gain;
        let (mu, _) = generalized_sym_extremes(&symmetrize(&gap), &self.p).ok()?;
        if mu <= 1e-12 {
            return None;
        }
        Some(self.trace_p_sigma / (alpha * mu))
    }

    /// Named constants for reports.
    pub fn report_fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("lambda_circ", self.lambda_circ),
            ("beta", self.beta),
            ("k_set_level", self.k_set_level),
            ("lambda_circ_as_printed", self.lambda_circ_as_printed),
            ("k_set_level_as_printed", self.k_set_level_as_printed),
            ("trace_p_sigma", self.trace_p_sigma),
            ("r_max", self.r_max),
            ("lyapunov_residual", self.lyapunov_residual),
            ("closed_loop_radius", self.closed_loop_radius),
            ("riccati_iterations", self.riccati_iterations as f64),
        ]
    }
}

/// Infinite-horizon Riccati iteration with stage weights `(Q, R_s)`.
/// Returns `(P, K, iterations)` with `K = −(R_s + BᵀPB)⁻¹BᵀPA`.
pub fn riccati_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_stage: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    if !is_stabilizable(a, b) {
        return Err(Error::Unstabilizable {
            spectral_radius: spectral_radius(a),
        });
    }
    let mut p = q.clone();
    let mut trace = Vec::new();
    for it in 1..=RICCATI_MAX_ITER {
        let (next, _) = riccati_step(a, b, q, r_stage, &p)?;
        let delta = (&next - &p).amax();
        if trace.len() == 10 {
            trace.remove(0);
        }
        trace.push(delta);
        if !delta.is_finite() || next.amax() > 1e15 {
            return Err(Error::RiccatiDivergence {
                iterations: it,
                trace,
            });
        }
        p = next;
        if delta <= RICCATI_TOL * p.amax().max(1.0) {
            let (_, k) = riccati_step(a, b, q, r_stage, &p)?;
            return Ok((p, k, it));
        }
    }
    Err(Error::RiccatiDivergence {
        iterations: RICCATI_MAX_ITER,
        trace,
    })
}

/// One backward step: returns `(P_prev, K)` from `P_next`.
fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_next: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p_next;
    let gram = symmetrize(&(r + &bt_p * b));
    let inv = gram
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| gram.try_inverse())
        .ok_or(Error::Singular("R + BᵀPB"))?;
    let k = -(&inv * &bt_p * a);
    let at_p = a.transpose() * p_next;
    let p = q + &at_p * a + (&at_p * b) * &k;
    Ok((symmetrize(&p), k))
}

/// Synthesis for `x' = Ax + Bu + w`, `Cov(w) = Σ`, with Lyapunov weight `Q`.
pub fn synthesize_lq(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<LqSynthesis> {
    let d = a.nrows();
    if q.nrows() != d || sigma.nrows() != d {
        return Err(Error::Dimension {
            what: "Q / Sigma",
            expected: d,
            got: q.nrows().min(sigma.nrows()),
        });
    }
    if !is_psd(q, 0.0) || crate::linalg::min_sym_eigenvalue(q) <= 0.0 {
        return Err(Error::Validation("Q must be symmetric positive definite".into()));
    }
    let m = b.ncols();
    let (_, k, iterations) = riccati_gain(a, b, q, &DMatrix::identity(m, m))?;
    let acl = a + b * &k;
    let closed_loop_radius = spectral_radius(&acl);
    if closed_loop_radius >= 1.0 {
        return Err(Error::Unstabilizable {
            spectral_radius: closed_loop_radius,
        });
    }
    let p = solve_lyapunov(&acl, q)?;
    let residual = lyapunov_residual(&acl, &p, q);

    let q_eigs = crate::linalg::singular_values(q);
    let p_eigs = crate::linalg::singular_values(&p);
    let s = q_eigs[0] / p_eigs[p_eigs.len() - 1];
    let lambda_circ = 1.0 - 0.5 * s;
    let lambda_circ_as_printed = 0.5 * (1.0 - s);
    let trace_p_sigma = (&p * sigma).trace();
    let k_set_level = trace_p_sigma / (1.0 - lambda_circ);
    let k_set_level_as_printed = if lambda_circ_as_printed > 0.0 {
        2.0 / lambda_circ_as_printed * trace_p_sigma
    } else {
        f64::INFINITY
    };
    // sup over {xᵀPx ≤ ℓ} of xᵀ Aclᵀ P Acl x + tr(PΣ)
    let mcl = symmetrize(&(acl.transpose() * &p * &acl));
    let (_, gmax) = generalized_sym_extremes(&mcl, &p)?;
    let beta = k_set_level * gmax.max(0.0) + trace_p_sigma;

    let (r_max, r) = select_r(q, &k);
    Ok(LqSynthesis {
        k_gain: k,
        p,
        q: q.clone(),
        r,
        r_max,
        sigma: sigma.clone(),
        lambda_circ,
        beta,
        k_set_level,
        lambda_circ_as_printed,
        k_set_level_as_printed,
        trace_p_sigma,
        lyapunov_residual: residual,
        riccati_iterations: iterations,
        closed_loop_radius,
    })
}

/// Largest `r` with `Q − r KᵀK ⪰ 0` by bisection (tolerance 1e−8), and the
/// control weight `R = (r/2)·I` (`I` when `K = 0`).
fn select_r(q: &DMatrix<f64>, k: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let m = k.nrows();
    let ktk = k.transpose() * k;
    if ktk.amax() == 0.0 {
        return (f64::INFINITY, DMatrix::identity(m, m));
    }
    let ok = |r: f64| is_psd(&symmetrize(&(q - &ktk * r)), 0.0);
    let mut hi = 1.0;
    while ok(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-8 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, DMatrix::identity(m, m) * (0.5 * lo))
}

/// Backward Riccati recursion for the `N`-stage problem with stage cost
/// `zᵀQz + uᵀRu` and terminal cost `zᵀP_T z`. Returns `values[k]`
/// (cost-to-go from stage `k`, so `values[0]` is `V_N*` and `values[N]` is
/// the terminal cost) and the gains `K_k` with `π_k*(x) = K_k x`.
pub fn finite_horizon_lq_value(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q_stage: &DMatrix<f64>,
    r_stage: &DMatrix<f64>,
    p_terminal: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    n: usize,
) -> Result<(Vec<QuadraticValue>, Vec<DMatrix<f64>>)> {
    if n == 0 {
        return Err(Error::Validation("horizon must be at least 1".into()));
    }
    let mut values = vec![QuadraticValue::new(p_terminal.clone(), 0.0)];
    let mut gains = Vec::with_capacity(n);
    for _ in 0..n {
        let next = values.last().unwrap();
        let (p, k) = riccati_step(a, b, q_stage, r_stage, &next.p)?;
        let offset = next.offset + (&next.p * sigma).trace();
        values.push(QuadraticValue::new(p, offset));
        gains.push(k);
    }
    values.reverse();
    gains.reverse();
    Ok((values, gains))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn series_oracle(acl: f64, q: f64) -> f64 {
        (0..200).map(|k| q * acl.powi(2 * k)).sum()
    }

    #[test]
    fn lyapunov_scalar_cases() {
        assert!((solve_lyapunov(&s(0.0), &s(1.0)).unwrap()[(0, 0)] - 1.0).abs() < 1e-14);
        let p = solve_lyapunov(&s(0.5), &s(1.0)).unwrap()[(0, 0)];
        assert!((p - series_oracle(0.5, 1.0)).abs() < 1e-12);
        let p = solve_lyapunov(&(DMatrix::identity(2, 2) * 0.9), &DMatrix::identity(2, 2)).unwrap();
        let oracle = series_oracle(0.9, 1.0);
        assert!((p[(0, 0)] - oracle).abs() < 1e-8 && p[(0, 1)].abs() < 1e-12);
        assert!(matches!(
            solve_lyapunov(&s(1.0), &s(1.0)),
            Err(Error::UnstableClosedLoop { .. })
        ));
    }

    #[test]
    fn lyapunov_residual_on_coupled_system() {
        let acl = DMatrix::from_row_slice(3, 3, &[0.5, 0.3, 0.0, -0.2, 0.6, 0.1, 0.0, 0.4, 0.3]);
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 1.5]);
        let p = solve_lyapunov(&acl, &q).unwrap();
        assert!(lyapunov_residual(&acl, &p, &q) < 1e-12);
    }

    #[test]
    fn zero_dynamics_gives_zero_gain() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let syn = synthesize_lq(
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            &q,
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(syn.k_gain.amax() < 1e-14);
        assert!((&syn.p - &q).amax() < 1e-12);
        assert!((syn.lambda_circ_as_printed - 0.5 * (1.0 - 1.0 / 2.0)).abs() < 1e-12);
        assert_eq!(syn.r, DMatrix::identity(2, 2));
    }

    #[test]
    fn zero_noise_collapses_constants() {
        let syn = synthesize_lq(&s(1.0), &s(1.0), &s(1.0), &s(0.0)).unwrap();
        assert_eq!(syn.k_set_level, 0.0);
        assert_eq!(syn.beta, 0.0);
    }

    #[test]
    fn unstabilizable_pair_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            synthesize_lq(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2)),
            Err(Error::Unstabilizable { .. })
        ));
    }

    #[test]
    fn r_selection_keeps_gap_positive() {
        let syn = synthesize_lq(&s(1.0), &s(1.0), &s(1.0), &s(1.0)).unwrap();
        let k = syn.k_gain[(0, 0)];
        assert!((syn.r_max - 1.0 / (k * k)).abs() < 1e-6);
        let gap = 1.0 - k * k * syn.r[(0, 0)];
        assert!(gap > 0.4);
        assert!(syn.a3_level(0.5).is_some());
        assert!(syn.a3_level(0.0).is_none());
    }

    #[test]
    fn gains_do_not_depend_on_noise() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = s(0.3);
        let pt = DMatrix::identity(2, 2) * 2.0;
        let (_, g1) = finite_horizon_lq_value(&a, &b, &q, &r, &pt, &DMatrix::zeros(2, 2), 5).unwrap();
        let (v2, g2) =
            finite_horizon_lq_value(&a, &b, &q, &r, &pt, &(DMatrix::identity(2, 2) * 3.0), 5).unwrap();
        assert_eq!(g1, g2);
        assert!(v2[0].offset > 0.0 && v2[5].offset == 0.0);
    }

    #[test]
    fn pure_noise_single_stage() {
        let p = s(2.0);
        let (v, g) =
            finite_horizon_lq_value(&s(0.0), &s(1.0), &s(0.0), &s(1.0), &p, &s(1.5), 1).unwrap();
        assert!(g[0].amax() == 0.0);
        assert!((v[0].value(&[3.0]) - 3.0).abs() < 1e-14);
    }
}
