use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::linalg::mat_vec;
use crate::{Error, Result};

pub type TransitionFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum Dynamics {
    /// `x' = A x + B u + w`.
    LinearAffine { a: DMatrix<f64>, b: DMatrix<f64> },
    General(TransitionFn),
}

/// Controlled system `x_{t+1} = f(x_t, u_t, w_t)`.
#[derive(Clone)]
pub struct SystemModel {
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    pub dynamics: Dynamics,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.dynamics {
            Dynamics::LinearAffine { .. } => "linear-affine",
            Dynamics::General(_) => "general",
        };
        f.debug_struct("SystemModel")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("noise_dim", &self.noise_dim)
            .field("kind", &kind)
            .finish()
    }
}

impl SystemModel {
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Validation("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimension {
                what: "rows of B",
                expected: a.nrows(),
                got: b.nrows(),
            });
        }
        Ok(Self {
            state_dim: a.nrows(),
            control_dim: b.ncols(),
            noise_dim: a.nrows(),
            dynamics: Dynamics::LinearAffine { a, b },
        })
    }

    pub fn general(state_dim: usize, control_dim: usize, noise_dim: usize, f: TransitionFn) -> Self {
        Self {
            state_dim,
            control_dim,
            noise_dim,
            dynamics: Dynamics::General(f),
        }
    }

    pub fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.dynamics {
            Dynamics::LinearAffine { a, b } => Some((a, b)),
            Dynamics::General(_) => None,
        }
    }

    pub fn transition(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::LinearAffine { a, b } => {
                let mut out = mat_vec(a, x);
                for (o, bu) in out.iter_mut().zip(mat_vec(b, u)) {
                    *o += bu;
                }
                for (o, wi) in out.iter_mut().zip(w) {
                    *o += wi;
                }
                out
            }
            Dynamics::General(f) => f(x, u, w),
        }
    }

    pub fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::Dimension {
                what: "state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if u.len() != self.control_dim {
            return Err(Error::Dimension {
                what: "control",
                expected: self.control_dim,
                got: u.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn linear_transition_matches_formula(
            x in proptest::collection::vec(-1e3f64..1e3, 2),
            u in -1e3f64..1e3,
            w in proptest::collection::vec(-1e3f64..1e3, 2),
        ) {
            let a = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.25, 2.0]);
            let b = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
            let sys = SystemModel::linear(a.clone(), b.clone()).unwrap();
            let got = sys.transition(&x, &[u], &w);
            for i in 0..2 {
                let exact = a[(i, 0)] * x[0] + a[(i, 1)] * x[1] + b[(i, 0)] * u + w[i];
                prop_assert!((got[i] - exact).abs() <= 1e-12 * exact.abs().max(1.0));
            }
        }
    }
}
