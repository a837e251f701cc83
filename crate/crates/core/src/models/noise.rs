use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{is_psd, psd_factor};
use crate::quadrature::{gaussian_rule, triangular_rule, QuadratureRule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseLaw {
    Gaussian {
        mean: Vec<f64>,
        covariance: DMatrix<f64>,
        /// `L` with `L Lᵀ = Σ`, restricted to the range of `Σ`.
        factor: DMatrix<f64>,
    },
    /// Independent coordinates, each symmetric triangular on `[-a_i, a_i]`.
    Triangular { half_width: Vec<f64> },
    /// Uniform draw from a fixed sample table.
    Empirical { samples: Vec<Vec<f64>> },
}

/// i.i.d. process noise law with a base seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub dim: usize,
    pub law: NoiseLaw,
    pub seed: u64,
}

impl NoiseModel {
    pub fn gaussian(mean: Vec<f64>, covariance: DMatrix<f64>, seed: u64) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Validation("noise dimension must be positive".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Dimension {
                what: "noise covariance",
                expected: d,
                got: covariance.nrows(),
            });
        }
        if !is_psd(&covariance, 1e-12) {
            return Err(Error::Validation(
                "noise covariance must be symmetric positive semidefinite".into(),
            ));
        }
        let factor = psd_factor(&covariance);
        Ok(Self {
            dim: d,
            law: NoiseLaw::Gaussian {
                mean,
                covariance,
                factor,
            },
            seed,
        })
    }

    pub fn triangular(half_width: Vec<f64>, seed: u64) -> Result<Self> {
        if half_width.is_empty() || half_width.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Validation("triangular half widths must be positive".into()));
        }
        Ok(Self {
            dim: half_width.len(),
            law: NoiseLaw::Triangular { half_width },
            seed,
        })
    }

    pub fn empirical(samples: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let dim = samples.first().map_or(0, Vec::len);
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Validation(
                "empirical noise needs a non-empty table of equal-length rows".into(),
            ));
        }
        Ok(Self {
            dim,
            law: NoiseLaw::Empirical { samples },
            seed,
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        match &self.law {
            NoiseLaw::Gaussian { mean, .. } => mean.clone(),
            NoiseLaw::Triangular { half_width } => vec![0.0; half_width.len()],
            NoiseLaw::Empirical { samples } => {
                let n = samples.len() as f64;
                (0..self.dim)
                    .map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n)
                    .collect()
            }
        }
    }

    /// Second central moment `Σ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.law {
            NoiseLaw::Gaussian { covariance, .. } => covariance.clone(),
            NoiseLaw::Triangular { half_width } => DMatrix::from_diagonal(
                &nalgebra::DVector::from_iterator(
                    half_width.len(),
                    half_width.iter().map(|a| a * a / 6.0),
                ),
            ),
            NoiseLaw::Empirical { samples } => {
                let mu = self.mean();
                let n = samples.len() as f64;
                DMatrix::from_fn(self.dim, self.dim, |i, j| {
                    samples
                        .iter()
                        .map(|s| (s[i] - mu[i]) * (s[j] - mu[j]))
                        .sum::<f64>()
                        / n
                })
            }
        }
    }

    pub fn is_zero_mean_gaussian(&self) -> bool {
        matches!(&self.law, NoiseLaw::Gaussian { mean, .. } if mean.iter().all(|m| *m == 0.0))
    }

    /// Draw one noise vector into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.law {
            NoiseLaw::Gaussian { mean, factor, .. } => {
                out.copy_from_slice(mean);
                for c in 0..factor.ncols() {
                    let z: f64 = rng.sample(StandardNormal);
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += factor[(i, c)] * z;
                    }
                }
            }
            NoiseLaw::Triangular { half_width } => {
                for (o, a) in out.iter_mut().zip(half_width) {
                    let u1: f64 = rng.random();
                    let u2: f64 = rng.random();
                    *o = a * (u1 + u2 - 1.0);
                }
            }
            NoiseLaw::Empirical { samples } => {
                let k = rng.random_range(0..samples.len());
                out.copy_from_slice(&samples[k]);
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        out
    }

    /// Node/weight rule for `E[h(w)]`. `order` is the number of
    /// Gauss–Hermite nodes per Gaussian direction, or Gauss–Legendre nodes
    /// per half-support for the triangular law. Empirical tables are used
    /// as-is with equal weights.
    pub fn quadrature(&self, order: usize) -> QuadratureRule {
        match &self.law {
            NoiseLaw::Gaussian {
                mean, covariance, ..
            } => gaussian_rule(mean, covariance, order),
            NoiseLaw::Triangular { half_width } => {
                let mut rule = triangular_rule(half_width[0], 1, order);
                for a in &half_width[1..] {
                    rule = rule.tensor(&triangular_rule(*a, 1, order));
                }
                rule
            }
            NoiseLaw::Empirical { samples } => QuadratureRule::equal_weights(samples),
        }
    }
}
