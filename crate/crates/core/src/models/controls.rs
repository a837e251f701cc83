use crate::linalg::norm;
use crate::{Error, Result};

/// Admissible control set `U`, which always contains `0`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    Unconstrained { dim: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Euclidean ball `{‖u‖ ≤ radius}`.
    Ball { dim: usize, radius: f64 },
}

impl ControlSet {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Validation("box bounds must be non-empty and equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= &0.0 && &0.0 <= u)) {
            return Err(Error::Validation("control box must contain 0".into()));
        }
        Ok(ControlSet::Box { lower, upper })
    }

    pub fn ball(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || dim == 0 {
            return Err(Error::Validation("control ball needs positive radius and dimension".into()));
        }
        Ok(ControlSet::Ball { dim, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Unconstrained { dim } | ControlSet::Ball { dim, .. } => *dim,
            ControlSet::Box { lower, .. } => lower.len(),
        }
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(&vec![0.0; self.dim()])
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match self {
            ControlSet::Unconstrained { .. } => u.iter().all(|v| v.is_finite()),
            ControlSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (l, h))| l <= v && v <= h),
            ControlSet::Ball { radius, .. } => norm(u) <= *radius,
        }
    }

    /// Nearest point of `U` (Euclidean projection).
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlSet::Unconstrained { .. } => u.to_vec(),
            ControlSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (l, h))| v.clamp(*l, *h))
                .collect(),
            ControlSet::Ball { radius, .. } => {
                let n = norm(u);
                if n <= *radius {
                    u.to_vec()
                } else {
                    u.iter().map(|v| v * radius / n).collect()
                }
            }
        }
    }

    /// Finite control set for dynamic programming: a tensor grid with
    /// `points[i]` nodes along coordinate `i` (0 is always added), filtered to
    /// `U`. Unconstrained sets use the supplied `range`.
    pub fn discretize(
        &self,
        points: &[usize],
        range: Option<(&[f64], &[f64])>,
    ) -> Result<Vec<Vec<f64>>> {
        let m = self.dim();
        if points.len() != m {
            return Err(Error::Dimension {
                what: "control_points",
                expected: m,
                got: points.len(),
            });
        }
        let (lo, hi): (Vec<f64>, Vec<f64>) = match self {
            ControlSet::Box { lower, upper } => (lower.clone(), upper.clone()),
            ControlSet::Ball { radius, .. } => (vec![-radius; m], vec![*radius; m]),
            ControlSet::Unconstrained { .. } => {
                let (l, h) = range.ok_or_else(|| {
                    Error::Validation(
                        "unconstrained controls need solver.control_min/control_max".into(),
                    )
                })?;
                (l.to_vec(), h.to_vec())
            }
        };
        let axes: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let n = points[i];
                let mut ax: Vec<f64> = if n <= 1 {
                    vec![0.0]
                } else {
                    (0..n)
                        .map(|k| lo[i] + (hi[i] - lo[i]) * k as f64 / (n - 1) as f64)
                        .collect()
                };
                if !ax.contains(&0.0) {
                    ax.push(0.0);
                    ax.sort_by(f64::total_cmp);
                }
                ax
            })
            .collect();
        let mut out = vec![vec![]];
        for ax in &axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    ax.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        out.retain(|u| self.contains(u));
        if out.is_empty() {
            return Err(Error::EmptyControlSet);
        }
        Ok(out)
    }
}
