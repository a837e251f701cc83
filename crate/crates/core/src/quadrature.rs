//! Node/weight rules for expectations under the noise laws.
//!
//! Gauss–Hermite and Gauss–Legendre rules come from the Golub–Welsch
//! eigenvalue construction on the symmetric Jacobi matrix of the orthogonal
//! polynomial family. Multivariate Gaussian rules are tensor products pushed
//! through a factor `L` of the covariance (`w = μ + L z`).

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::linalg::psd_factor;
use crate::{Error, Result};

/// A weighted point set `Σ_q ω_q h(w_q)` approximating `E[h(w)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Polynomial degree integrated exactly, when known.
    pub exact_degree: Option<usize>,
}

impl QuadratureRule {
    pub fn new(dim: usize, nodes: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(nodes.len(), dim * weights.len());
        Self {
            dim,
            nodes,
            weights,
            exact_degree: None,
        }
    }

    /// One-point rule at `w`.
    pub fn point(w: &[f64]) -> Self {
        Self {
            dim: w.len(),
            nodes: w.to_vec(),
            weights: vec![1.0],
            exact_degree: None,
        }
    }

    /// Equal weights on a table of samples.
    pub fn equal_weights(samples: &[Vec<f64>]) -> Self {
        let dim = samples.first().map_or(0, Vec::len);
        let w = 1.0 / samples.len() as f64;
        Self {
            dim,
            nodes: samples.iter().flatten().copied().collect(),
            weights: vec![w; samples.len()],
            exact_degree: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, q: usize) -> &[f64] {
        &self.nodes[q * self.dim..(q + 1) * self.dim]
    }

    pub fn weight(&self, q: usize) -> f64 {
        self.weights[q]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.nodes
            .chunks_exact(self.dim.max(1))
            .zip(self.weights.iter().copied())
    }

    pub fn expect<F: FnMut(&[f64]) -> f64>(&self, mut h: F) -> f64 {
        self.iter().map(|(w, p)| p * h(w)).sum()
    }

    /// Tensor product `self ⊗ other` on the concatenated coordinates.
    pub fn tensor(&self, other: &QuadratureRule) -> QuadratureRule {
        let dim = self.dim + other.dim;
        let mut nodes = Vec::with_capacity(dim * self.len() * other.len());
        let mut weights = Vec::with_capacity(self.len() * other.len());
        for (a, wa) in self.iter() {
            for (b, wb) in other.iter() {
                nodes.extend_from_slice(a);
                nodes.extend_from_slice(b);
                weights.push(wa * wb);
            }
        }
        let exact_degree = match (self.exact_degree, other.exact_degree) {
            (Some(a), Some(b)) => Some(a.min(b)),
            _ => None,
        };
        QuadratureRule {
            dim,
            nodes,
            weights,
            exact_degree,
        }
    }

    /// `k`-fold tensor power, used for blocks of i.i.d. noise.
    pub fn power(&self, k: usize) -> QuadratureRule {
        let mut out = self.clone();
        for _ in 1..k {
            out = out.tensor(self);
        }
        out
    }
}

fn golub_welsch(diag: &[f64], offdiag: &[f64], mass: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut j = DMatrix::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = diag[i];
        if i + 1 < n {
            j[(i, i + 1)] = offdiag[i];
            j[(i + 1, i)] = offdiag[i];
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Probabilists' Gauss–Hermite rule for `z ~ N(0, 1)`; exact to degree `2n − 1`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let (mut x, mut w) = golub_welsch(&diag, &off, 1.0);
    // enforce the symmetry of the exact rule
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let xm = 0.5 * (x[j] - x[i]);
        let wm = 0.5 * (w[i] + w[j]);
        x[i] = -xm;
        x[j] = xm;
        w[i] = wm;
        w[j] = wm;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Gauss–Legendre rule on `[-1, 1]` with total mass 2.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &off, 2.0)
}

/// Tensor Gauss–Hermite rule for `w ~ N(mean, cov)` with `order` nodes per
/// direction of the covariance range. A zero covariance collapses to the
/// single point `mean`.
pub fn gaussian_rule(mean: &[f64], cov: &DMatrix<f64>, order: usize) -> QuadratureRule {
    let d = mean.len();
    let l = psd_factor(cov);
    let r = l.ncols();
    if r == 0 {
        let mut rule = QuadratureRule::point(mean);
        rule.exact_degree = Some(usize::MAX);
        return rule;
    }
    let (z, wz) = gauss_hermite(order);
    let mut std_rule = QuadratureRule::new(1, z, wz);
    std_rule.exact_degree = Some(2 * order - 1);
    let base = std_rule.power(r);
    let mut nodes = Vec::with_capacity(base.len() * d);
    for (zq, _) in base.iter() {
        for i in 0..d {
            let mut v = mean[i];
            for (c, zc) in zq.iter().enumerate() {
                v += l[(i, c)] * zc;
            }
            nodes.push(v);
        }
    }
    QuadratureRule {
        dim: d,
        nodes,
        weights: base.weights.clone(),
        exact_degree: Some(2 * order - 1),
    }
}

/// Composite Gauss–Legendre rule on `[a, b]` against a density `p`.
pub fn composite_legendre<P: Fn(f64) -> f64>(
    a: f64,
    b: f64,
    panels: usize,
    order: usize,
    density: P,
) -> QuadratureRule {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * order);
    let mut weights = Vec::with_capacity(panels * order);
    for k in 0..panels {
        let lo = a + k as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            let t = lo + 0.5 * h * (xi + 1.0);
            nodes.push(t);
            weights.push(0.5 * h * wi * density(t));
        }
    }
    QuadratureRule::new(1, nodes, weights)
}

/// Symmetric triangular law on `[-a, a]` (density `(a − |w|)/a²`). Each half is
/// integrated by Gauss–Legendre panels, so polynomials of degree
/// `2·order − 2` are integrated exactly.
pub fn triangular_rule(half_width: f64, panels: usize, order: usize) -> QuadratureRule {
    let a = half_width;
    let density = move |t: f64| ((a - t.abs()) / (a * a)).max(0.0);
    let left = composite_legendre(-a, 0.0, panels, order, density);
    let right = composite_legendre(0.0, a, panels, order, density);
    let mut nodes = left.nodes;
    nodes.extend(right.nodes);
    let mut weights = left.weights;
    weights.extend(right.weights);
    let mut rule = QuadratureRule::new(1, nodes, weights);
    rule.exact_degree = Some(2 * order - 2);
    rule
}

fn ln_gamma_half(r: usize) -> f64 {
    // Γ(r/2) for small r
    match r {
        1 => 0.5 * PI.ln(),
        2 => 0.0,
        3 => (0.5 * PI.sqrt()).ln(),
        _ => unreachable!("radial quadrature supports rank <= 3"),
    }
}

/// `E[h(‖Y‖)]` for `Y ~ N(0, S)` with `rank(S) ≤ 3`.
///
/// Writes `Y = L z` with `z ~ N(0, I_r)`, splits `z = s·u` into a chi(r)
/// radius and a uniform direction, and integrates the radius by composite
/// Gauss–Legendre along each direction. Directions use the exact two-point
/// set for `r = 1`, a periodic trapezoid rule for `r = 2`, and
/// Gauss–Legendre in `cos φ` times a trapezoid in `θ` for `r = 3`. The
/// integrand is smooth along every ray, unlike `h(‖·‖)` in Cartesian
/// coordinates, so these rules converge quickly even for `h = exp`.
pub fn gaussian_norm_expectation<H: Fn(f64) -> f64>(s: &DMatrix<f64>, h: H) -> Result<f64> {
    let l = psd_factor(s);
    let r = l.ncols();
    if r == 0 {
        return Ok(h(0.0));
    }
    if r > 3 {
        return Err(Error::Unsupported(format!(
            "radial quadrature needs rank <= 3, got {r}"
        )));
    }
    // directions u on the unit sphere of R^r with weights summing to 1
    let mut dirs: Vec<(Vec<f64>, f64)> = Vec::new();
    match r {
        1 => {
            dirs.push((vec![1.0], 0.5));
            dirs.push((vec![-1.0], 0.5));
        }
        2 => {
            let m = 128;
            for k in 0..m {
                let th = 2.0 * PI * k as f64 / m as f64;
                dirs.push((vec![th.cos(), th.sin()], 1.0 / m as f64));
            }
        }
        _ => {
            let (ct, wt) = gauss_legendre(32);
            let m = 64;
            for (c, wc) in ct.iter().zip(&wt) {
                let sn = (1.0 - c * c).sqrt();
                for k in 0..m {
                    let th = 2.0 * PI * k as f64 / m as f64;
                    dirs.push((vec![sn * th.cos(), sn * th.sin(), *c], 0.5 * wc / m as f64));
                }
            }
        }
    }
    let stretch: Vec<f64> = dirs
        .iter()
        .map(|(u, _)| {
            let y: Vec<f64> = (0..l.nrows())
                .map(|i| (0..r).map(|c| l[(i, c)] * u[c]).sum())
                .collect();
            crate::linalg::norm(&y)
        })
        .collect();
    let amax = stretch.iter().copied().fold(0.0, f64::max);
    // chi(r) density: s^{r-1} e^{-s²/2} / (2^{r/2-1} Γ(r/2))
    let log_norm = -((r as f64 / 2.0 - 1.0) * std::f64::consts::LN_2 + ln_gamma_half(r));
    let upper = amax + 14.0;
    let (gx, gw) = gauss_legendre(16);
    let panels = 64;
    let hstep = upper / panels as f64;
    let mut total = 0.0;
    for ((_, wu), a) in dirs.iter().zip(&stretch) {
        let mut acc = 0.0;
        for p in 0..panels {
            let lo = p as f64 * hstep;
            for (xi, wi) in gx.iter().zip(&gw) {
                let sr = lo + 0.5 * hstep * (xi + 1.0);
                let logd = (r as f64 - 1.0) * sr.max(1e-300).ln() - 0.5 * sr * sr + log_norm;
                acc += 0.5 * hstep * wi * logd.exp() * h(a * sr);
            }
        }
        total += wu * acc;
    }
    if !total.is_finite() {
        return Err(Error::Evaluation("radial quadrature overflow".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial(k: usize) -> f64 {
        (1..=k).rev().step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn hermite_matches_gaussian_moments() {
        for n in [1usize, 3, 5, 9, 15] {
            let (x, w) = gauss_hermite(n);
            for deg in 0..=(2 * n - 1) {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 {
                    0.0
                } else if deg == 0 {
                    1.0
                } else {
                    double_factorial(deg - 1)
                };
                let scale: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.abs().powi(deg as i32)).sum();
                assert!(
                    (q - exact).abs() <= 1e-10 * scale.max(1.0),
                    "n={n} deg={deg}: {q} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        for deg in 0..12 {
            let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg)).sum();
            let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn gaussian_rule_mass_and_trace() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let rule = gaussian_rule(&[0.0, 0.0], &cov, 9);
        assert!((rule.expect(|_| 1.0) - 1.0).abs() < 1e-12);
        let tr = rule.expect(|w| w[0] * w[0] + w[1] * w[1]);
        assert!((tr - 3.0).abs() < 1e-10);
        let cross = rule.expect(|w| w[0] * w[1]);
        assert!((cross - 0.5).abs() < 1e-10);
    }

    #[test]
    fn degenerate_covariance_is_point_mass() {
        let rule = gaussian_rule(&[1.5], &DMatrix::zeros(1, 1), 9);
        assert_eq!(rule.len(), 1);
        assert_eq!(rule.node(0), &[1.5]);
    }

    #[test]
    fn triangular_moments() {
        let rule = triangular_rule(1.0, 1, 6);
        assert!((rule.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(rule.expect(|w| w[0]).abs() < 1e-14);
        // Var = a²/6, E w⁴ = a⁴/15
        assert!((rule.expect(|w| w[0].powi(2)) - 1.0 / 6.0).abs() < 1e-13);
        assert!((rule.expect(|w| w[0].powi(4)) - 1.0 / 15.0).abs() < 1e-13);
    }

    #[test]
    fn radial_expectation_of_squared_norm() {
        // E‖Y‖² = trace(S)
        let s = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.7]);
        let v = gaussian_norm_expectation(&s, |r| r * r).unwrap();
        assert!((v - 2.2).abs() < 1e-10, "{v}");
        let s3 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 0.5]));
        let v = gaussian_norm_expectation(&s3, |r| r * r).unwrap();
        assert!((v - 3.5).abs() < 1e-9, "{v}");
    }
}
