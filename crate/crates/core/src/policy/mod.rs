//! Feedback policies: stage maps, finite sequences and concatenation, the
//! stationary receding-horizon policy, saturation maps and the bounded
//! control stabilizer for orthogonal systems.

mod ortho;

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::grid::Grid;
use crate::linalg::{mat_vec, norm};
use crate::models::ControlSet;
use crate::{Error, Result};

pub use ortho::{ortho_control_block, reachability_matrix, OrthoStabilizer, RhoEstimate};

pub type PolicyFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `min{r, ‖z‖}·z/‖z‖`, and `0` at the origin.
pub fn sat_radial(z: &[f64], r: f64) -> Vec<f64> {
    let n = norm(z);
    if n == 0.0 {
        return vec![0.0; z.len()];
    }
    if n <= r {
        return z.to_vec();
    }
    z.iter().map(|v| v * r / n).collect()
}

/// Scalar saturation onto `[-1, 1]`.
pub fn sat(z: f64) -> f64 {
    z.clamp(-1.0, 1.0)
}

/// `g(x) = −sat(x)`.
pub fn scalar_sat_policy(x: f64) -> f64 {
    -sat(x)
}

#[derive(Clone)]
pub enum StageMap {
    /// `u = Kx`.
    Linear(DMatrix<f64>),
    /// `u = sat_r(Kx)`.
    SaturatedLinear { gain: DMatrix<f64>, radius: f64 },
    /// Multilinear interpolation of node controls; `controls[j][node]`.
    GridTable { grid: Arc<Grid>, controls: Vec<Vec<f64>> },
    Analytic { label: String, map: PolicyFn },
}

/// Measurable feedback `π_i : ℝ^d → U`. Outputs are projected onto the
/// attached control set.
#[derive(Clone)]
pub struct StagePolicy {
    pub state_dim: usize,
    pub control_dim: usize,
    pub map: StageMap,
    pub control_set: Option<ControlSet>,
}

impl fmt::Debug for StagePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let repr = match &self.map {
            StageMap::Linear(_) => "linear-gain".to_string(),
            StageMap::SaturatedLinear { radius, .. } => format!("saturated-linear({radius})"),
            StageMap::GridTable { grid, .. } => format!("grid-table({} nodes)", grid.len()),
            StageMap::Analytic { label, .. } => format!("analytic({label})"),
        };
        f.debug_struct("StagePolicy")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("map", &repr)
            .finish()
    }
}

impl StagePolicy {
    pub fn linear(gain: DMatrix<f64>) -> Self {
        Self {
            state_dim: gain.ncols(),
            control_dim: gain.nrows(),
            map: StageMap::Linear(gain),
            control_set: None,
        }
    }

    pub fn saturated_linear(gain: DMatrix<f64>, radius: f64) -> Self {
        Self {
            state_dim: gain.ncols(),
            control_dim: gain.nrows(),
            map: StageMap::SaturatedLinear { gain, radius },
            control_set: None,
        }
    }

    pub fn grid_table(grid: Arc<Grid>, controls: Vec<Vec<f64>>) -> Result<Self> {
        if controls.is_empty() || controls.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::Validation(
                "grid-table policy needs one control value per node and coordinate".into(),
            ));
        }
        Ok(Self {
            state_dim: grid.dim(),
            control_dim: controls.len(),
            map: StageMap::GridTable { grid, controls },
            control_set: None,
        })
    }

    pub fn analytic(
        label: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        map: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dim,
            control_dim,
            map: StageMap::Analytic {
                label: label.into(),
                map: Arc::new(map),
            },
            control_set: None,
        }
    }

    /// Scalar `g(x) = −sat(x)` on the box `[-1, 1]`.
    pub fn neg_sat() -> Self {
        let mut p = Self::analytic("-sat", 1, 1, |x| vec![scalar_sat_policy(x[0])]);
        p.control_set = ControlSet::boxed(vec![-1.0], vec![1.0]).ok();
        p
    }

    pub fn with_control_set(mut self, set: ControlSet) -> Self {
        self.control_set = Some(set);
        self
    }

    pub fn label(&self) -> String {
        match &self.map {
            StageMap::Linear(_) => "linear-gain".into(),
            StageMap::SaturatedLinear { .. } => "saturated-linear".into(),
            StageMap::GridTable { .. } => "grid-table".into(),
            StageMap::Analytic { label, .. } => label.clone(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let raw = match &self.map {
            StageMap::Linear(k) => mat_vec(k, x),
            StageMap::SaturatedLinear { gain, radius } => sat_radial(&mat_vec(gain, x), *radius),
            StageMap::GridTable { grid, controls } => {
                controls.iter().map(|c| grid.interpolate(c, x)).collect()
            }
            StageMap::Analytic { map, .. } => map(x),
        };
        match &self.control_set {
            Some(set) => set.project(&raw),
            None => raw,
        }
    }

    /// Writes a grid-table policy as CSV: header `x0:n0,…,u0,…` (axis sizes in
    /// the header), then one row per node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let StageMap::GridTable { grid, controls } = &self.map else {
            return Err(Error::Unsupported("only grid-table policies serialize to CSV".into()));
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = grid
            .axes()
            .iter()
            .enumerate()
            .map(|(i, ax)| format!("x{i}:{}", ax.len()))
            .collect();
        header.extend((0..controls.len()).map(|j| format!("u{j}")));
        w.write_record(&header)?;
        for (idx, node) in grid.nodes().enumerate() {
            let mut row: Vec<String> = node.iter().map(|v| v.to_string()).collect();
            row.extend(controls.iter().map(|c| c[idx].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let mut sizes = Vec::new();
        let mut m = 0;
        for h in header.iter() {
            if let Some(rest) = h.strip_prefix('x') {
                let (_, n) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::parse(h, "expected `x<i>:<nodes>`"))?;
                sizes.push(n.parse::<usize>().map_err(|e| Error::parse(h, e.to_string()))?);
            } else if h.starts_with('u') {
                m += 1;
            } else {
                return Err(Error::parse(h, "unknown column"));
            }
        }
        let d = sizes.len();
        let mut axes: Vec<Vec<f64>> = sizes.iter().map(|n| Vec::with_capacity(*n)).collect();
        let mut controls = vec![Vec::new(); m];
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .enumerate()
                .map(|(i, s)| s.parse::<f64>().map_err(|e| Error::parse(&header[i], e.to_string())))
                .collect::<Result<_>>()?;
            for (k, ax) in axes.iter_mut().enumerate() {
                if ax.last() != Some(&vals[k]) && !ax.contains(&vals[k]) {
                    ax.push(vals[k]);
                }
            }
            for j in 0..m {
                controls[j].push(vals[d + j]);
            }
        }
        for ax in &mut axes {
            ax.sort_by(f64::total_cmp);
        }
        if axes.iter().zip(&sizes).any(|(a, n)| a.len() != *n) {
            return Err(Error::Validation("policy CSV rows do not match header axis sizes".into()));
        }
        Self::grid_table(Arc::new(Grid::new(axes)?), controls)
    }
}

/// A finite stage-policy sequence `(π_0, …, π_{k−1})`.
#[derive(Debug, Clone, Default)]
pub struct PolicySequence {
    pub stages: Vec<StagePolicy>,
}

impl PolicySequence {
    pub fn new(stages: Vec<StagePolicy>) -> Result<Self> {
        let seq = Self { stages: Vec::new() };
        seq.concat(&Self { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.stages.first().map(|s| (s.state_dim, s.control_dim))
    }

    /// `self ♯ other`.
    pub fn concat(&self, other: &PolicySequence) -> Result<PolicySequence> {
        let mut stages = self.stages.clone();
        let dims = self.dims();
        for s in &other.stages {
            let want = dims.or_else(|| stages.first().map(|f| (f.state_dim, f.control_dim)));
            if let Some((d, m)) = want {
                if s.state_dim != d || s.control_dim != m {
                    return Err(Error::Dimension {
                        what: "concatenated stage policy",
                        expected: d,
                        got: s.state_dim,
                    });
                }
            }
            stages.push(s.clone());
        }
        Ok(PolicySequence { stages })
    }

    /// Subsequence `(π_from, …, π_{k−1})`.
    pub fn tail(&self, from: usize) -> PolicySequence {
        PolicySequence {
            stages: self.stages[from.min(self.stages.len())..].to_vec(),
        }
    }
}

/// `π̂ = (π₀*, π₀*, …)`, optionally with the full optimal sequence
/// `(π₀*, …, π_{N−1}*)` it was taken from.
#[derive(Debug, Clone)]
pub struct RecedingHorizonPolicy {
    pub first_stage: StagePolicy,
    pub optimal_sequence: Option<PolicySequence>,
    pub source: String,
}

impl RecedingHorizonPolicy {
    pub fn new(first_stage: StagePolicy, source: impl Into<String>) -> Self {
        Self {
            first_stage,
            optimal_sequence: None,
            source: source.into(),
        }
    }

    pub fn from_sequence(seq: PolicySequence, source: impl Into<String>) -> Result<Self> {
        let first = seq
            .stages
            .first()
            .cloned()
            .ok_or_else(|| Error::MissingStagePolicies("empty optimal sequence".into()))?;
        Ok(Self {
            first_stage: first,
            optimal_sequence: Some(seq),
            source: source.into(),
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.first_stage.apply(x)
    }

    /// First `t` stages of `π̂` as an explicit sequence.
    pub fn unroll(&self, t: usize) -> PolicySequence {
        PolicySequence {
            stages: vec![self.first_stage.clone(); t],
        }
    }
}

/// A feedback law applied in blocks of `period()` steps; the controls of a
/// block depend only on the state at the start of the block.
pub trait Controller: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn period(&self) -> usize {
        1
    }
    fn block(&self, x: &[f64]) -> Vec<Vec<f64>>;
}

impl Controller for StagePolicy {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn block(&self, x: &[f64]) -> Vec<Vec<f64>> {
        vec![self.apply(x)]
    }
}

impl Controller for RecedingHorizonPolicy {
    fn state_dim(&self) -> usize {
        self.first_stage.state_dim
    }
    fn control_dim(&self) -> usize {
        self.first_stage.control_dim
    }
    fn block(&self, x: &[f64]) -> Vec<Vec<f64>> {
        vec![self.apply(x)]
    }
}
