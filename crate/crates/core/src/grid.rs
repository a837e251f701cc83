//! Rectilinear grids with multilinear interpolation and clamped
//! extrapolation outside the grid box.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Vec<f64>>,
    // row-major: last axis varies fastest
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Validation("grid needs at least one axis".into()));
        }
        for (k, ax) in axes.iter().enumerate() {
            if ax.len() < 2 {
                return Err(Error::Validation(format!("grid axis {k} needs at least 2 nodes")));
            }
            if ax.iter().any(|v| !v.is_finite()) || ax.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Validation(format!(
                    "grid axis {k} must be finite and strictly increasing"
                )));
            }
        }
        let mut strides = vec![1; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].len();
        }
        let len = strides[0] * axes[0].len();
        Ok(Self { axes, strides, len })
    }

    /// Uniform axes from per-dimension bounds and node counts.
    pub fn uniform(min: &[f64], max: &[f64], points: &[usize]) -> Result<Self> {
        if min.len() != max.len() || min.len() != points.len() {
            return Err(Error::Validation("grid bounds and point counts differ in length".into()));
        }
        let axes = min
            .iter()
            .zip(max)
            .zip(points)
            .map(|((lo, hi), &n)| {
                let n = n.max(2);
                (0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect()
            })
            .collect();
        Grid::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[0]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[a.len() - 1]).collect()
    }

    pub fn node(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        self.axes
            .iter()
            .zip(&self.strides)
            .map(|(ax, s)| {
                let i = rem / s;
                rem %= s;
                ax[i]
            })
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len).map(|i| self.node(i))
    }

    /// True when every coordinate is at least `margin` inside the box.
    pub fn is_interior(&self, x: &[f64], margin: f64) -> bool {
        self.axes
            .iter()
            .zip(x)
            .all(|(ax, v)| *v >= ax[0] + margin && *v <= ax[ax.len() - 1] - margin)
    }

    fn cell(ax: &[f64], x: f64) -> (usize, f64) {
        let n = ax.len();
        let x = x.clamp(ax[0], ax[n - 1]);
        let h = (ax[n - 1] - ax[0]) / (n - 1) as f64;
        let mut i = (((x - ax[0]) / h).floor() as isize).clamp(0, n as isize - 2) as usize;
        while i + 2 < n && ax[i + 1] <= x {
            i += 1;
        }
        while i > 0 && ax[i] > x {
            i -= 1;
        }
        let t = (x - ax[i]) / (ax[i + 1] - ax[i]);
        (i, t)
    }

    /// Multilinear interpolation of nodal `values` at `x`; coordinates outside
    /// the box are clamped to it. At grid nodes the stored value is returned
    /// exactly.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len);
        if self.axes.len() == 1 {
            let (i, t) = Self::cell(&self.axes[0], x[0]);
            if t == 0.0 {
                return values[i];
            }
            return (1.0 - t) * values[i] + t * values[i + 1];
        }
        let d = self.axes.len();
        let mut base = 0;
        let mut ts = [0.0f64; 8];
        for k in 0..d {
            let (i, t) = Self::cell(&self.axes[k], x[k]);
            base += i * self.strides[k];
            ts[k] = t;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = base;
            for k in 0..d {
                if corner >> (d - 1 - k) & 1 == 1 {
                    w *= ts[k];
                    off += self.strides[k];
                } else {
                    w *= 1.0 - ts[k];
                }
            }
            if w != 0.0 {
                acc += w * values[off];
            }
        }
        acc
    }
}
