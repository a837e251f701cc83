use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::linalg::{norm, quad_form};

pub type StageFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum CostKind {
    /// `c(z, u) = (1 − α) zᵀQz + α uᵀRu`, `c_F(z) = zᵀPz`.
    Quadratic {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p: DMatrix<f64>,
        alpha: f64,
    },
    /// `c(z, u) = 1{‖z‖ > half_width}`, `c_F(z) = ‖z‖`.
    IndicatorOutside { half_width: f64 },
    /// `c(z, u) = weight · e^{‖z‖}`, `c_F(z) = e^{‖z‖}`.
    Exponential { weight: f64 },
    Custom {
        label: String,
        stage: StageFn,
        terminal: StateFn,
        separable: Option<(StateFn, StateFn)>,
    },
}

/// Stage cost `c` and final cost `c_F`, optionally with a separable
/// decomposition `c(z, v) = c_s(z) + c_c(v)`.
#[derive(Clone)]
pub struct CostSpec {
    pub kind: CostKind,
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            CostKind::Quadratic { alpha, .. } => write!(f, "CostSpec::Quadratic(alpha = {alpha})"),
            CostKind::IndicatorOutside { half_width } => {
                write!(f, "CostSpec::IndicatorOutside({half_width})")
            }
            CostKind::Exponential { weight } => write!(f, "CostSpec::Exponential({weight})"),
            CostKind::Custom { label, .. } => write!(f, "CostSpec::Custom({label})"),
        }
    }
}

impl CostSpec {
    pub fn new(kind: CostKind) -> Self {
        Self { kind }
    }

    pub fn custom(
        label: impl Into<String>,
        stage: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(CostKind::Custom {
            label: label.into(),
            stage: Arc::new(stage),
            terminal: Arc::new(terminal),
            separable: None,
        })
    }

    pub fn stage(&self, z: &[f64], u: &[f64]) -> f64 {
        match &self.kind {
            CostKind::Quadratic { q, r, alpha, .. } => {
                (1.0 - alpha) * quad_form(q, z) + alpha * quad_form(r, u)
            }
            CostKind::IndicatorOutside { half_width } => {
                if norm(z) > *half_width {
                    1.0
                } else {
                    0.0
                }
            }
            CostKind::Exponential { weight } => weight * norm(z).exp(),
            CostKind::Custom { stage, .. } => stage(z, u),
        }
    }

    pub fn terminal(&self, z: &[f64]) -> f64 {
        match &self.kind {
            CostKind::Quadratic { p, .. } => quad_form(p, z),
            CostKind::IndicatorOutside { .. } => norm(z),
            CostKind::Exponential { .. } => norm(z).exp(),
            CostKind::Custom { terminal, .. } => terminal(z),
        }
    }

    pub fn has_separable(&self) -> bool {
        !matches!(&self.kind, CostKind::Custom { separable: None, .. })
    }

    /// State part `c_s`, when a separable decomposition is declared.
    pub fn state_part(&self, z: &[f64]) -> Option<f64> {
        match &self.kind {
            CostKind::Quadratic { q, alpha, .. } => Some((1.0 - alpha) * quad_form(q, z)),
            CostKind::IndicatorOutside { .. } | CostKind::Exponential { .. } => {
                Some(self.stage(z, &[]))
            }
            CostKind::Custom { separable, .. } => separable.as_ref().map(|(s, _)| s(z)),
        }
    }

    /// Control part `c_c`, when a separable decomposition is declared.
    pub fn control_part(&self, u: &[f64]) -> Option<f64> {
        match &self.kind {
            CostKind::Quadratic { r, alpha, .. } => Some(alpha * quad_form(r, u)),
            CostKind::IndicatorOutside { .. } | CostKind::Exponential { .. } => Some(0.0),
            CostKind::Custom { separable, .. } => separable.as_ref().map(|(_, c)| c(u)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_parts_sum_to_stage_cost() {
        let cost = CostSpec::new(CostKind::Quadratic {
            q: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            r: DMatrix::from_row_slice(1, 1, &[3.0]),
            p: DMatrix::identity(2, 2),
            alpha: 0.3,
        });
        for (z, u) in [([1.0, -2.0], [0.5]), ([0.0, 0.0], [4.0]), ([3.0, 1.0], [0.0])] {
            let s = cost.state_part(&z).unwrap() + cost.control_part(&u).unwrap();
            assert!((cost.stage(&z, &u) - s).abs() < 1e-12);
        }
        let e = CostSpec::new(CostKind::Exponential { weight: 0.6 });
        assert_eq!(e.stage(&[1.0], &[2.0]), e.state_part(&[1.0]).unwrap());
    }

    #[test]
    fn indicator_cost_values() {
        let c = CostSpec::new(CostKind::IndicatorOutside { half_width: 2.0 });
        assert_eq!(c.stage(&[0.0], &[0.0]), 0.0);
        assert_eq!(c.stage(&[2.0], &[0.0]), 0.0);
        assert_eq!(c.stage(&[3.0], &[0.0]), 1.0);
        assert_eq!(c.stage(&[-5.0], &[0.0]), 1.0);
        assert_eq!(c.terminal(&[-1.5]), 1.5);
    }
}
