//! Clamped B-spline bases on `[0, 1]`.
//!
//! Bases are evaluated with the Cox–de Boor recursion, using the convention that
//! `0/0 = 0` and that evaluation at `t = 1` is the limit from the left, so the
//! partition of unity holds on the closed interval. Zeros in the evaluated basis
//! matrix are structural: they come from the recursion itself, never from
//! thresholding, because the group penalty's support sets depend on them.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Clamped knot sequence of length `K + d + 1` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Spline order `q = d + 1`.
    pub fn order(&self) -> usize {
        self.degree + 1
    }

    /// Number of basis functions `K`.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.order()
    }

    /// Greville abscissae: the mean of `d` consecutive interior-facing knots per basis.
    /// For degree zero these are the span midpoints.
    pub fn greville(&self) -> Vec<f64> {
        let d = self.degree;
        let k = self.num_basis();
        (0..k)
            .map(|i| {
                if d == 0 {
                    0.5 * (self.knots[i] + self.knots[i + 1])
                } else {
                    self.knots[i + 1..i + 1 + d].iter().sum::<f64>() / d as f64
                }
            })
            .collect()
    }
}

/// Equally spaced clamped knots: `K - q + 1` interior spans on `[0, 1]`.
pub fn make_knots(num_basis: usize, order: usize) -> Result<KnotVector> {
    if order < 1 || num_basis < order {
        return Err(Error::InvalidConfig(format!(
            "need K >= q >= 1, got K={num_basis}, q={order}"
        )));
    }
    let degree = order - 1;
    let n_break = num_basis - order + 2;
    let mut knots = Vec::with_capacity(num_basis + degree + 1);
    knots.extend(std::iter::repeat(0.0).take(degree));
    for i in 0..n_break {
        knots.push(i as f64 / (n_break - 1) as f64);
    }
    knots.extend(std::iter::repeat(1.0).take(degree));
    debug_assert_eq!(knots.len(), num_basis + degree + 1);
    Ok(KnotVector { knots, degree })
}

/// A basis evaluated on a time grid.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    pub knots: KnotVector,
    /// Evaluation grid, sorted, within `[0, 1]`.
    pub grid: Vec<f64>,
    /// `K x T` matrix of basis values.
    pub b: DMatrix<f64>,
    /// `K x T` structural support: `b[(k, m)] != 0` exactly.
    pub support: DMatrix<bool>,
    col_start: Vec<usize>,
    col_end: Vec<usize>,
}

impl BasisSystem {
    pub fn num_basis(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_times(&self) -> usize {
        self.b.ncols()
    }

    /// Contiguous range of basis indices with nonzero value at time index `m`.
    pub fn col_support(&self, m: usize) -> std::ops::Range<usize> {
        self.col_start[m]..self.col_end[m]
    }

    /// Group l1 norm `sum_{k: b[k][m] != 0} |coefs[k]|` at time index `m`.
    pub fn group_l1(&self, coefs: &[f64], m: usize) -> f64 {
        self.col_support(m).map(|k| coefs[k].abs()).sum()
    }
}

/// Evaluate all basis functions of `knots` at the given grid points.
pub fn eval_basis(knots: &KnotVector, grid: &[f64]) -> Result<BasisSystem> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty evaluation grid".into()));
    }
    for (i, &t) in grid.iter().enumerate() {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!(
                "grid point {i} = {t} lies outside [0, 1]"
            )));
        }
        if i > 0 && grid[i - 1] > t {
            return Err(Error::InvalidInput(format!(
                "grid is not sorted at index {i}: {} > {t}",
                grid[i - 1]
            )));
        }
    }

    let k = knots.num_basis();
    let d = knots.degree();
    let t_len = grid.len();
    let mut b = DMatrix::zeros(k, t_len);
    let mut values = vec![0.0; d + 1];
    let mut left = vec![0.0; d + 1];
    let mut right = vec![0.0; d + 1];
    for (m, &t) in grid.iter().enumerate() {
        let span = find_span(knots, t);
        basis_values(knots, span, t, &mut values, &mut left, &mut right);
        for (offset, &v) in values.iter().enumerate() {
            b[(span - d + offset, m)] = v;
        }
    }

    let support = b.map(|v| v != 0.0);
    let mut col_start = vec![0usize; t_len];
    let mut col_end = vec![0usize; t_len];
    for m in 0..t_len {
        let nz: Vec<usize> = (0..k).filter(|&i| b[(i, m)] != 0.0).collect();
        debug_assert!(!nz.is_empty());
        col_start[m] = nz[0];
        col_end[m] = nz[nz.len() - 1] + 1;
        debug_assert_eq!(nz.len(), col_end[m] - col_start[m], "support not contiguous");
    }

    Ok(BasisSystem {
        knots: knots.clone(),
        grid: grid.to_vec(),
        b,
        support,
        col_start,
        col_end,
    })
}

/// Structural support indicator at time index `m`: entry `k` is true iff the
/// evaluated basis value is nonzero exactly.
pub fn support_indicator(bs: &BasisSystem, m: usize) -> Result<Vec<bool>> {
    if m >= bs.num_times() {
        return Err(Error::InvalidInput(format!(
            "time index {m} out of range 0..{}",
            bs.num_times()
        )));
    }
    Ok((0..bs.num_basis()).map(|k| bs.support[(k, m)]).collect())
}

/// Index `i` with `u[i] <= t < u[i+1]`, clamped to the last span at `t = 1`.
fn find_span(knots: &KnotVector, t: f64) -> usize {
    let d = knots.degree();
    let k = knots.num_basis();
    let u = knots.knots();
    if t >= u[k] {
        return k - 1;
    }
    let mut lo = d;
    let mut hi = k;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if t < u[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The de Boor triangle: values of the `d + 1` bases active on `span` at `t`.
/// `values[r]` is basis `span - d + r`. Terms with zero denominator are zero.
fn basis_values(
    knots: &KnotVector,
    span: usize,
    t: f64,
    values: &mut [f64],
    left: &mut [f64],
    right: &mut [f64],
) {
    let d = knots.degree();
    let u = knots.knots();
    values[0] = 1.0;
    for j in 1..=d {
        left[j] = t - u[span + 1 - j];
        right[j] = u[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
            values[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        values[j] = saved;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Textbook Cox-de Boor recursion, evaluated independently of the de Boor
    /// triangle above. Right-closed at t = 1 on the last nonzero-length span.
    fn naive_basis(knots: &KnotVector, k: usize, q: usize, t: f64) -> f64 {
        let u = knots.knots();
        if q == 1 {
            let closes = u[k + 1] >= 1.0 && u[k] < u[k + 1];
            if (u[k] <= t && t < u[k + 1]) || (closes && t == 1.0) {
                return 1.0;
            }
            return 0.0;
        }
        let mut acc = 0.0;
        let den1 = u[k + q - 1] - u[k];
        if den1 != 0.0 {
            acc += (t - u[k]) / den1 * naive_basis(knots, k, q - 1, t);
        }
        let den2 = u[k + q] - u[k + 1];
        if den2 != 0.0 {
            acc += (u[k + q] - t) / den2 * naive_basis(knots, k + 1, q - 1, t);
        }
        acc
    }

    #[test]
    fn make_knots_base_cases() {
        let kv = make_knots(1, 1).unwrap();
        assert_eq!(kv.knots(), &[0.0, 1.0]);
        assert_eq!(kv.degree(), 0);

        let kv = make_knots(4, 4).unwrap();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);

        let kv = make_knots(6, 4).unwrap();
        let expect = [0.0, 0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0, 1.0];
        for (a, b) in kv.knots().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn make_knots_rejects_k_below_q() {
        assert!(make_knots(3, 4).is_err());
        assert!(make_knots(2, 0).is_err());
    }

    #[test]
    fn cubic_k6_matches_hand_expanded_recursion() {
        // Knots (0,0,0,0,1/3,2/3,1,1,1,1). On [0,1/3) the first basis is (1-3t)^3,
        // so t = 0.1 gives 0.7^3 = 0.343; the column values below follow from
        // expanding the recursion by hand at t = 0.1, 0.5, 0.75.
        let kv = make_knots(6, 4).unwrap();
        let bs = eval_basis(&kv, &[0.1, 0.5, 0.75]).unwrap();
        let expected = [
            [0.343, 0.54225, 0.11025, 0.0045, 0.0, 0.0],
            [0.0, 0.03125, 0.46875, 0.46875, 0.03125, 0.0],
            [0.0, 0.0, 0.0703125, 0.45703125, 0.45703125, 0.015625],
        ];
        for (m, row) in expected.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                assert_abs_diff_eq!(bs.b[(k, m)], v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_recursion_and_structural_zeros_agree() {
        for &(k, q) in &[(2usize, 1usize), (5, 2), (6, 4), (12, 4), (9, 3)] {
            let kv = make_knots(k, q).unwrap();
            let grid: Vec<f64> = (0..53).map(|i| i as f64 / 52.0).collect();
            let bs = eval_basis(&kv, &grid).unwrap();
            for (m, &t) in grid.iter().enumerate() {
                for ki in 0..k {
                    let v = naive_basis(&kv, ki, q, t);
                    assert_abs_diff_eq!(bs.b[(ki, m)], v, epsilon = 1e-12);
                    assert_eq!(bs.b[(ki, m)] != 0.0, v != 0.0, "k={ki} t={t}");
                }
            }
        }
    }

    #[test]
    fn degree_zero_column() {
        let kv = make_knots(2, 1).unwrap();
        let bs = eval_basis(&kv, &[0.25]).unwrap();
        assert_eq!(bs.b[(0, 0)], 1.0);
        assert_eq!(bs.b[(1, 0)], 0.0);
        assert_eq!(support_indicator(&bs, 0).unwrap(), vec![true, false]);
    }

    #[test]
    fn right_endpoint_partition_of_unity_and_support() {
        // Left-continuous closure at t = 1: the last basis carries the whole mass
        // and is the only exactly nonzero one there.
        for &(k, q) in &[(2usize, 1usize), (6, 4), (10, 3)] {
            let kv = make_knots(k, q).unwrap();
            let bs = eval_basis(&kv, &[1.0]).unwrap();
            let col: Vec<f64> = (0..k).map(|i| bs.b[(i, 0)]).collect();
            assert_abs_diff_eq!(col.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_eq!(col[k - 1], 1.0);
            let sup = support_indicator(&bs, 0).unwrap();
            assert_eq!(sup.iter().filter(|&&s| s).count(), 1);
            assert!(sup[k - 1]);
        }
    }

    #[test]
    fn interior_point_has_q_contiguous_supports() {
        let kv = make_knots(30, 4).unwrap();
        let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let bs = eval_basis(&kv, &grid).unwrap();
        for m in 0..100 {
            let r = bs.col_support(m);
            assert!(r.len() <= 4);
            // brute force: count nonzeros over all k and verify contiguity
            let nz: Vec<usize> = (0..30).filter(|&k| bs.b[(k, m)] != 0.0).collect();
            assert_eq!(nz.len(), r.len());
            for (a, b) in nz.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>() {
                assert_eq!(b, a + 1);
            }
        }
        // a point strictly inside a span touches exactly q bases
        let bs = eval_basis(&kv, &[0.5001]).unwrap();
        assert_eq!(bs.col_support(0).len(), 4);
    }

    #[test]
    fn row_support_is_one_interval() {
        let kv = make_knots(14, 4).unwrap();
        let grid: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let bs = eval_basis(&kv, &grid).unwrap();
        for k in 0..14 {
            let nz: Vec<usize> = (0..200).filter(|&m| bs.b[(k, m)] != 0.0).collect();
            assert!(!nz.is_empty());
            assert_eq!(nz[nz.len() - 1] - nz[0] + 1, nz.len(), "row {k} not contiguous");
        }
    }

    #[test]
    fn rejects_bad_grids() {
        let kv = make_knots(6, 4).unwrap();
        assert!(eval_basis(&kv, &[0.2, 0.1]).is_err());
        assert!(eval_basis(&kv, &[-0.1, 0.5]).is_err());
        assert!(eval_basis(&kv, &[0.5, 1.2]).is_err());
        assert!(eval_basis(&kv, &[]).is_err());
        assert!(support_indicator(&eval_basis(&kv, &[0.5]).unwrap(), 1).is_err());
    }

    #[test]
    fn eigenvalue_sandwich_interval_is_stable() {
        // Eigenvalues of (K/T) B B^T stay in a fixed interval whose ratio is
        // far below 50 and whose width does not grow with K.
        let mut widths = Vec::new();
        let mut lo_all = f64::INFINITY;
        let mut hi_all = 0.0f64;
        for &k in &[10usize, 20, 40] {
            let t = 10 * k;
            let kv = make_knots(k, 4).unwrap();
            let grid: Vec<f64> = (0..t).map(|i| i as f64 / (t - 1) as f64).collect();
            let bs = eval_basis(&kv, &grid).unwrap();
            let m = (&bs.b * bs.b.transpose()) * (k as f64 / t as f64);
            let eig = m.symmetric_eigen();
            let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            assert!(lo > 0.0);
            assert!(hi / lo < 50.0, "K={k}: ratio {}", hi / lo);
            widths.push(hi - lo);
            lo_all = lo_all.min(lo);
            hi_all = hi_all.max(hi);
        }
        assert!(widths[1] <= widths[0] * (1.0 + 1e-9));
        assert!(widths[2] <= widths[1] * (1.0 + 1e-9));
        assert!(hi_all / lo_all < 50.0);
    }

    proptest! {
        #[test]
        fn partition_of_unity(k in 1usize..20, dq in 0usize..5, t in 0.0f64..=1.0) {
            let q = (dq + 1).min(k);
            let kv = make_knots(k, q).unwrap();
            let bs = eval_basis(&kv, &[t]).unwrap();
            let sum: f64 = (0..k).map(|i| bs.b[(i, 0)]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let min = (0..k).map(|i| bs.b[(i, 0)]).fold(f64::INFINITY, f64::min);
            prop_assert!(min >= 0.0);
        }
    }
}
