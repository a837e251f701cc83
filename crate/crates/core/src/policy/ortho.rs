use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::{sat_radial, Controller, StagePolicy};
use crate::linalg::{mat_vec, norm, psd_factor, rank};
use crate::models::{NoiseModel, RhoRule};
use crate::quadrature::gaussian_norm_expectation;
use crate::sampling::stream_rng;
use crate::{Error, Result};

const MC_RHO_SAMPLES: usize = 1_000_000;
const Z99: f64 = 2.575_829_303_548_901;

/// `𝓡(A, M) = [A^{κ−1}M ⋯ AM M]`.
pub fn reachability_matrix(a: &DMatrix<f64>, m: &DMatrix<f64>, kappa: usize) -> DMatrix<f64> {
    let d = a.nrows();
    let cols = m.ncols();
    let mut out = DMatrix::zeros(d, kappa * cols);
    let mut block = m.clone();
    for j in (0..kappa).rev() {
        out.view_mut((0, j * cols), (d, cols)).copy_from(&block);
        block = a * &block;
    }
    out
}

/// A log-expectation with its numerical uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate {
    pub value: f64,
    /// Half-width of a 99% confidence interval (0 for quadrature).
    pub ci_halfwidth: f64,
    pub monte_carlo: bool,
}

/// Bounded-control stabilizer for `x' = Ax + Bu + w` with orthogonal `A`.
/// Controls are applied in open-loop blocks of length `κ`:
/// `(u_{κt}, …, u_{κt+κ−1}) = −𝓡(A,B)⁺ sat_{U_max}(A^κ x_{κt})`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoStabilizer {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub kappa: usize,
    pub reach_b: DMatrix<f64>,
    pub reach_pinv: DMatrix<f64>,
    pub a_kappa: DMatrix<f64>,
    /// Covariance of `𝓡(A, I_d)·(w_0, …, w_{κ−1})`.
    pub block_noise_cov: DMatrix<f64>,
    pub u_max: f64,
    /// `ln E exp‖𝓡(A, I_d) w̄‖`.
    pub rho_prop4: RhoEstimate,
    /// `ln E ‖𝓡(A, I_d) w̄‖`; equals `ln(σ√(2/π))` for scalar noise.
    pub rho_example3: RhoEstimate,
    pub rule: RhoRule,
    /// `ρ` selected by `rule`.
    pub rho: f64,
    /// `e^{ρ − U_max}`.
    pub lambda_circ: f64,
    /// `2ρ`.
    pub k_radius: f64,
    /// `max(2ρ, U_max)`: beyond `U_max` saturation is active and
    /// `‖x_{κ(t+1)}‖ ≤ ‖x_{κt}‖ − U_max + ‖𝓡(A,I)w̄‖`.
    pub drift_radius: f64,
}

impl OrthoStabilizer {
    pub fn new(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        noise: &NoiseModel,
        u_max: f64,
        rule: RhoRule,
    ) -> Result<Self> {
        let d = a.nrows();
        if !a.is_square() || b.nrows() != d {
            return Err(Error::Dimension {
                what: "rows of B",
                expected: d,
                got: b.nrows(),
            });
        }
        let orth = (a.transpose() * a - DMatrix::<f64>::identity(d, d)).amax();
        if orth > 1e-10 {
            return Err(Error::Validation(format!(
                "A must be orthogonal (|AᵀA − I| = {orth:.3e})"
            )));
        }
        if !noise.is_zero_mean_gaussian() || noise.dim != d {
            return Err(Error::Validation(
                "the orthogonal stabilizer needs zero-mean Gaussian noise of state dimension".into(),
            ));
        }
        let mut kappa = 0;
        let mut last_rank = 0;
        for j in 1..=d {
            last_rank = rank(&reachability_matrix(a, b, j));
            if last_rank == d {
                kappa = j;
                break;
            }
        }
        if kappa == 0 {
            return Err(Error::Uncontrollable {
                rank: last_rank,
                dim: d,
            });
        }
        let reach_b = reachability_matrix(a, b, kappa);
        let reach_pinv = reach_b
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|_| Error::Singular("reachability matrix"))?;
        let sigma = noise.covariance();
        let mut s = DMatrix::zeros(d, d);
        let mut aj = DMatrix::<f64>::identity(d, d);
        for _ in 0..kappa {
            s += &aj * &sigma * aj.transpose();
            aj = a * &aj;
        }
        let s = crate::linalg::symmetrize(&s);
        let rho_prop4 = log_norm_expectation(&s, f64::exp, noise.seed)?;
        let rho_example3 = log_norm_expectation(&s, |r| r, noise.seed)?;
        let rho = match rule {
            RhoRule::Prop4 => rho_prop4.value,
            RhoRule::Example3 => rho_example3.value,
        };
        if u_max <= rho {
            return Err(Error::InsufficientAuthority { rho, u_max });
        }
        let a_kappa = a.pow(kappa as u32);
        Ok(Self {
            a: a.clone(),
            b: b.clone(),
            kappa,
            reach_b,
            reach_pinv,
            a_kappa,
            block_noise_cov: s,
            u_max,
            rho_prop4,
            rho_example3,
            rule,
            rho,
            lambda_circ: (rho - u_max).exp(),
            k_radius: 2.0 * rho,
            drift_radius: (2.0 * rho).max(u_max),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `λ°` for a given choice of `ρ`.
    pub fn lambda_circ_for(&self, rule: RhoRule) -> f64 {
        match rule {
            RhoRule::Prop4 => (self.rho_prop4.value - self.u_max).exp(),
            RhoRule::Example3 => (self.rho_example3.value - self.u_max).exp(),
        }
    }

    /// The stationary stage policy `x ↦ −𝓡⁺ sat(A x)` when `κ = 1`.
    pub fn as_stage_policy(&self) -> Option<StagePolicy> {
        if self.kappa != 1 {
            return None;
        }
        let s = self.clone();
        Some(StagePolicy::analytic(
            "ortho-stabilizer",
            self.state_dim(),
            self.control_dim(),
            move |x| ortho_control_block(&s, x).remove(0),
        ))
    }
}

/// The `κ` controls of one block, computed from the block-start state.
pub fn ortho_control_block(s: &OrthoStabilizer, x: &[f64]) -> Vec<Vec<f64>> {
    let target = sat_radial(&mat_vec(&s.a_kappa, x), s.u_max);
    let stacked: Vec<f64> = mat_vec(&s.reach_pinv, &target).into_iter().map(|v| -v).collect();
    stacked
        .chunks(s.control_dim())
        .map(<[f64]>::to_vec)
        .collect()
}

impl Controller for OrthoStabilizer {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn period(&self) -> usize {
        self.kappa
    }
    fn block(&self, x: &[f64]) -> Vec<Vec<f64>> {
        ortho_control_block(self, x)
    }
}

/// `ln E h(‖Y‖)`, `Y ~ N(0, S)`: radial quadrature for `rank S ≤ 3`,
/// otherwise Monte Carlo with a 99% interval from the delta method.
fn log_norm_expectation<H: Fn(f64) -> f64>(s: &DMatrix<f64>, h: H, seed: u64) -> Result<RhoEstimate> {
    match gaussian_norm_expectation(s, &h) {
        Ok(v) => Ok(RhoEstimate {
            value: v.ln(),
            ci_halfwidth: 0.0,
            monte_carlo: false,
        }),
        Err(Error::Unsupported(_)) => {
            let l = psd_factor(s);
            let mut rng = stream_rng(seed, 0x5248_4f);
            let (mut sum, mut sq) = (0.0, 0.0);
            let mut z = vec![0.0; l.ncols()];
            for _ in 0..MC_RHO_SAMPLES {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                let v = h(norm(&mat_vec(&l, &z)));
                sum += v;
                sq += v * v;
            }
            let n = MC_RHO_SAMPLES as f64;
            let mean = sum / n;
            let se = ((sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
            Ok(RhoEstimate {
                value: mean.ln(),
                ci_halfwidth: Z99 * se / mean,
                monte_carlo: true,
            })
        }
        Err(e) => Err(e),
    }
}
