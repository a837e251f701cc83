//! Deterministic sampling utilities: per-stream RNGs and low-discrepancy
//! test points on norm shells.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{mat_vec, symmetrize};
use crate::{Error, Result};

/// RNG for stream `stream` under base seed `seed`. Streams are independent
/// and do not depend on how work is split across threads.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical inverse of `i` in base `b`.
pub fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

/// `n` Halton points in `[0, 1)^dim`, skipping the origin.
pub fn halton(dim: usize, n: usize) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len());
    (1..=n as u64)
        .map(|i| (0..dim).map(|k| radical_inverse(i, PRIMES[k])).collect())
        .collect()
}

fn unit_direction(dim: usize, h: &[f64], index: usize) -> Vec<f64> {
    match dim {
        1 => vec![if index % 2 == 0 { 1.0 } else { -1.0 }],
        2 => {
            let th = 2.0 * PI * h[0];
            vec![th.cos(), th.sin()]
        }
        _ => {
            // Box–Muller on pairs of coordinates, then normalise.
            let mut g = Vec::with_capacity(dim);
            let mut k = 0;
            while g.len() < dim {
                let u1 = h[k % h.len()].clamp(1e-12, 1.0 - 1e-12);
                let u2 = h[(k + 1) % h.len()];
                let rad = (-2.0 * u1.ln()).sqrt();
                g.push(rad * (2.0 * PI * u2).cos());
                if g.len() < dim {
                    g.push(rad * (2.0 * PI * u2).sin());
                }
                k += 2;
            }
            let n = crate::linalg::norm(&g).max(1e-300);
            g.into_iter().map(|v| v / n).collect()
        }
    }
}

/// `n` low-discrepancy points with Euclidean norm in `[r_inner, r_outer]`.
/// The radius coordinate is uniform in `[r_inner, r_outer]`.
pub fn shell_points(dim: usize, r_inner: f64, r_outer: f64, n: usize) -> Vec<Vec<f64>> {
    let extra = if dim >= 3 { dim } else { 1 };
    let pts = halton(1 + extra, n);
    pts.iter()
        .enumerate()
        .map(|(i, h)| {
            let r = r_inner + (r_outer - r_inner) * h[0];
            let u = unit_direction(dim, &h[1..], i);
            u.into_iter().map(|v| r * v).collect()
        })
        .collect()
}

/// Points with `xᵀ P x ∈ [level_inner, level_outer]`.
pub fn ellipsoid_shell_points(
    p: &DMatrix<f64>,
    level_inner: f64,
    level_outer: f64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    let chol = symmetrize(p)
        .cholesky()
        .ok_or(Error::Singular("ellipsoid shape matrix"))?;
    // x = L⁻ᵀ y gives xᵀ P x = yᵀ y
    let map = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or(Error::Singular("ellipsoid shape matrix"))?;
    let ys = shell_points(
        p.nrows(),
        level_inner.max(0.0).sqrt(),
        level_outer.max(0.0).sqrt(),
        n,
    );
    Ok(ys.iter().map(|y| mat_vec(&map, y)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(7, 3).random()).collect();
        let mut r = stream_rng(7, 3);
        let b: Vec<u64> = (0..4).map(|_| r.random()).collect();
        assert_eq!(a[0], b[0]);
        let mut r2 = stream_rng(7, 4);
        assert_ne!(b[0], r2.random::<u64>());
    }

    #[test]
    fn shell_points_respect_radii() {
        for dim in 1..=3 {
            for p in shell_points(dim, 2.0, 5.0, 200) {
                let r = crate::linalg::norm(&p);
                assert!((2.0 - 1e-12..=5.0 + 1e-12).contains(&r));
            }
        }
    }

    #[test]
    fn ellipsoid_points_respect_levels() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        for x in ellipsoid_shell_points(&p, 1.0, 4.0, 100).unwrap() {
            let v = crate::linalg::quad_form(&p, &x);
            assert!((1.0 - 1e-9..=4.0 + 1e-9).contains(&v));
        }
    }
}
