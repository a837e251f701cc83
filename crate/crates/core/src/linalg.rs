//! Small dense linear-algebra helpers over `nalgebra::DMatrix`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::parse(field, "matrix must have at least one row"));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::parse(field, "matrix rows must be non-empty and of equal length"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::parse(field, "matrix entries must be finite"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// `m * x` for a slice `x`.
pub fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.ncols(), x.len());
    let mut out = vec![0.0; m.nrows()];
    for (j, xj) in x.iter().enumerate() {
        if *xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * xj;
        }
    }
    out
}

/// `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mx = mat_vec(m, x);
    mx.iter().zip(x).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    is_symmetric(m, tol.max(1e-12) * m.amax().max(1.0)) && min_sym_eigenvalue(m) >= -tol
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    sv
}

pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let smax = sv.last().copied().unwrap_or(0.0);
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * 16.0;
    sv.iter().filter(|s| **s > tol.max(1e-300)).count()
}

/// Factor `S = L Lᵀ` for a symmetric positive semidefinite `S`, returning
/// `L = V √Λ` restricted to the strictly positive eigenvalues, so `L` is
/// `d × r` with `r = rank(S)`.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(s).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1e-300);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-13 * scale)
        .collect();
    let mut l = DMatrix::zeros(s.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let root = eig.eigenvalues[i].sqrt();
        for r in 0..s.nrows() {
            l[(r, c)] = eig.eigenvectors[(r, i)] * root;
        }
    }
    l
}

/// Extreme eigenvalues `(min, max)` of the pencil `(M, P)` for symmetric `M`
/// and symmetric positive definite `P`, i.e. of `L⁻¹ M L⁻ᵀ` with `P = L Lᵀ`.
pub fn generalized_sym_extremes(m: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<(f64, f64)> {
    let chol = symmetrize(p)
        .cholesky()
        .ok_or(Error::Singular("generalized eigenproblem (P not positive definite)"))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("generalized eigenproblem"))?;
    let c = &linv * symmetrize(m) * linv.transpose();
    let ev = sym_eigenvalues(&c);
    Ok((ev[0], ev[ev.len() - 1]))
}

pub fn identity(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d)
}

pub fn to_dvector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}
