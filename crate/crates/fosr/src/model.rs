//! Discretized model objects: response/design matrices, the phase partition of the
//! time grid, and coefficient-function reconstruction.

use crate::basis::{eval_basis, BasisSystem, KnotVector};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::ops::Range;

/// Disjoint, ordered grid-index ranges covering the whole grid. Phases are
/// left-closed and right-open; the last phase is right-closed.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePartition {
    ranges: Vec<Range<usize>>,
}

impl PhasePartition {
    /// One phase spanning the whole grid.
    pub fn single(t_len: usize) -> Self {
        Self { ranges: vec![0..t_len] }
    }

    /// Build from interior boundary values. Every boundary must coincide with a
    /// grid point, which becomes the first index of the next phase.
    pub fn from_boundaries(grid: &[f64], boundaries: &[f64]) -> Result<Self> {
        let t_len = grid.len();
        let mut cut_indices = Vec::with_capacity(boundaries.len());
        for &b in boundaries {
            let idx = grid
                .iter()
                .position(|&g| (g - b).abs() <= 1e-12)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("phase boundary {b} is not on the grid"))
                })?;
            if idx == 0 || idx >= t_len {
                return Err(Error::InvalidInput(format!(
                    "phase boundary {b} does not split the grid"
                )));
            }
            if let Some(&last) = cut_indices.last() {
                if idx <= last {
                    return Err(Error::InvalidInput(format!(
                        "phase boundaries not strictly increasing at {b}"
                    )));
                }
            }
            cut_indices.push(idx);
        }
        let mut ranges = Vec::with_capacity(cut_indices.len() + 1);
        let mut start = 0;
        for &idx in &cut_indices {
            ranges.push(start..idx);
            start = idx;
        }
        ranges.push(start..t_len);
        Ok(Self { ranges })
    }

    /// Build from interior cut indices: each cut starts a new phase.
    pub fn from_index_cuts(t_len: usize, cuts: &[usize]) -> Result<Self> {
        let mut ranges = Vec::with_capacity(cuts.len() + 1);
        let mut start = 0;
        for &c in cuts {
            if c <= start || c >= t_len {
                return Err(Error::InvalidInput(format!(
                    "phase cut {c} does not split 0..{t_len}"
                )));
            }
            ranges.push(start..c);
            start = c;
        }
        ranges.push(start..t_len);
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Interior boundary grid indices (first index of each phase after the first).
    pub fn boundary_indices(&self) -> Vec<usize> {
        self.ranges.iter().skip(1).map(|r| r.start).collect()
    }
}

/// Responses observed on a common grid together with scalar covariates.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    /// `n x T` response matrix.
    pub y: DMatrix<f64>,
    /// `n x p` design matrix.
    pub x: DMatrix<f64>,
    /// Time grid in `[0, 1]`, sorted.
    pub grid: Vec<f64>,
    pub phases: PhasePartition,
}

impl FunctionalDataset {
    pub fn new(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        grid: Vec<f64>,
        phases: PhasePartition,
    ) -> Result<Self> {
        let (n, t_len) = (y.nrows(), y.ncols());
        if n < 2 || t_len < 2 {
            return Err(Error::InvalidInput(format!(
                "need n >= 2 and T >= 2, got n={n}, T={t_len}"
            )));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows but Y has {n}",
                x.nrows()
            )));
        }
        if x.ncols() < 1 {
            return Err(Error::InvalidInput("X has no columns".into()));
        }
        if grid.len() != t_len {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} points but Y has {t_len} columns",
                grid.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entries in Y or X".into()));
        }
        for (i, w) in grid.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(Error::InvalidInput(format!("grid not sorted at index {i}")));
            }
        }
        if grid[0] < 0.0 || grid[t_len - 1] > 1.0 {
            return Err(Error::InvalidInput("grid outside [0, 1]".into()));
        }
        let mut cursor = 0;
        for r in phases.ranges() {
            if r.start != cursor || r.end <= r.start {
                return Err(Error::InvalidInput(
                    "phases must be disjoint, ordered, and cover the grid".into(),
                ));
            }
            cursor = r.end;
        }
        if cursor != t_len {
            return Err(Error::InvalidInput("phases do not cover the grid".into()));
        }
        Ok(Self { y, x, grid, phases })
    }

    pub fn num_subjects(&self) -> usize {
        self.y.nrows()
    }

    pub fn num_times(&self) -> usize {
        self.y.ncols()
    }

    pub fn num_covariates(&self) -> usize {
        self.x.ncols()
    }
}

/// Fitted mean `X * gamma * B`.
pub fn predict(x: &DMatrix<f64>, gamma: &DMatrix<f64>, basis: &BasisSystem) -> Result<DMatrix<f64>> {
    if x.ncols() != gamma.nrows() || gamma.ncols() != basis.num_basis() {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{}, gamma is {}x{}, basis has K={}",
            x.nrows(),
            x.ncols(),
            gamma.nrows(),
            gamma.ncols(),
            basis.num_basis()
        )));
    }
    Ok(x * gamma * &basis.b)
}

/// Coefficient functions evaluated on a grid, with exact-zero flags.
#[derive(Debug, Clone)]
pub struct CoefficientCurves {
    /// `p x G` curve values.
    pub values: DMatrix<f64>,
    /// `p x G` flags: true where the group l1 norm of the active coefficients is
    /// exactly zero, which forces the curve value to be exactly zero.
    pub exact_zero: DMatrix<bool>,
}

/// Reconstruct the coefficient functions `beta_j(t) = sum_k gamma_jk phi_k(t)` on
/// `eval_grid`, flagging the exactly-zero regions.
pub fn coefficient_functions(
    gamma: &DMatrix<f64>,
    knots: &KnotVector,
    eval_grid: &[f64],
) -> Result<CoefficientCurves> {
    if gamma.ncols() != knots.num_basis() {
        return Err(Error::DimensionMismatch(format!(
            "gamma has {} columns but knots define K={}",
            gamma.ncols(),
            knots.num_basis()
        )));
    }
    let bs = eval_basis(knots, eval_grid)?;
    let p = gamma.nrows();
    let g_len = eval_grid.len();
    let values = gamma * &bs.b;
    let mut exact_zero = DMatrix::from_element(p, g_len, false);
    for j in 0..p {
        let row: Vec<f64> = gamma.row(j).iter().cloned().collect();
        for m in 0..g_len {
            exact_zero[(j, m)] = bs.group_l1(&row, m) == 0.0;
        }
    }
    Ok(CoefficientCurves { values, exact_zero })
}
