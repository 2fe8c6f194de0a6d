//! Heteroscedastic weighting: pointwise OLS, phase-wise local linear smoothing of
//! residual curves, GCV bandwidth selection, and the weight matrix `W = Sigma^{-1/2}`.
//!
//! The random-effect covariance is estimated from smoothed residual curves. Smoothing
//! never crosses a phase boundary, so discontinuities between experimental stages do
//! not leak into neighboring phases. The kernel is Epanechnikov,
//! `K_b(u) = 0.75 (1 - (u/b)^2)_+ / b`.

use crate::error::{Error, Result};
use crate::model::{FunctionalDataset, PhasePartition};
use nalgebra::DMatrix;

/// Estimated covariance structure and the induced weight matrix.
#[derive(Debug, Clone)]
pub struct WeightModel {
    /// `T x T` random-effect covariance (symmetric PSD up to rounding).
    pub sigma_theta: DMatrix<f64>,
    /// Measurement noise variance.
    pub sigma2: f64,
    /// `Sigma = Sigma_theta + sigma2 * I`.
    pub sigma: DMatrix<f64>,
    /// Symmetric inverse square root of `Sigma`, so `W W^T Sigma = I`.
    pub w: DMatrix<f64>,
    /// Selected bandwidth per phase.
    pub bandwidths: Vec<f64>,
}

/// Pointwise OLS: column `m` is `(X^T X)^{-1} X^T Y^(m)`.
pub fn ols_pointwise(ds: &FunctionalDataset) -> Result<DMatrix<f64>> {
    let xtx = ds.x.transpose() * &ds.x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("X^T X is singular in pointwise OLS".into()))?;
    Ok(chol.solve(&(ds.x.transpose() * &ds.y)))
}

fn epanechnikov(u: f64, b: f64) -> f64 {
    let v = u / b;
    if v.abs() <= 1.0 {
        0.75 * (1.0 - v * v) / b
    } else {
        0.0
    }
}

/// Local linear smoother matrices on one phase: `fit` maps observed values at the
/// phase grid points to fitted values, `slope_scaled` to `b * d/dt` estimates.
fn phase_smoother(grid: &[f64], b: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t_len = grid.len();
    let mut fit = DMatrix::zeros(t_len, t_len);
    let mut slope = DMatrix::zeros(t_len, t_len);
    for (i, &t) in grid.iter().enumerate() {
        let w: Vec<f64> = grid.iter().map(|&tm| epanechnikov(tm - t, b)).collect();
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (m, &tm) in grid.iter().enumerate() {
            let d = tm - t;
            s0 += w[m];
            s1 += w[m] * d;
            s2 += w[m] * d * d;
        }
        if s0 <= 0.0 {
            return Err(Error::Bandwidth(format!(
                "all kernel weights vanish at t = {t} with bandwidth {b}"
            )));
        }
        let det = s0 * s2 - s1 * s1;
        if det <= 1e-12 * s0 * s0 * b * b {
            return Err(Error::Bandwidth(format!(
                "local linear system is singular at t = {t} with bandwidth {b}"
            )));
        }
        for (m, &tm) in grid.iter().enumerate() {
            let d = tm - t;
            fit[(i, m)] = (s2 - s1 * d) * w[m] / det;
            slope[(i, m)] = (s0 * d - s1) * w[m] / det * b;
        }
    }
    Ok((fit, slope))
}

/// Smooth each subject's residual curve phase by phase with the given per-phase
/// bandwidths. Returns the fitted curves and the scaled slopes `b * d theta/dt`.
pub fn local_linear_theta(
    residuals: &DMatrix<f64>,
    grid: &[f64],
    phases: &PhasePartition,
    bandwidths: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if residuals.ncols() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "residuals have {} columns but grid has {} points",
            residuals.ncols(),
            grid.len()
        )));
    }
    if bandwidths.len() != phases.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} bandwidths for {} phases",
            bandwidths.len(),
            phases.len()
        )));
    }
    let n = residuals.nrows();
    let t_len = grid.len();
    let mut theta = DMatrix::zeros(n, t_len);
    let mut slope = DMatrix::zeros(n, t_len);
    for (range, &b) in phases.ranges().iter().zip(bandwidths) {
        if range.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "phase {range:?} has fewer than 2 grid points"
            )));
        }
        if b <= 0.0 {
            return Err(Error::Bandwidth(format!("bandwidth {b} must be positive")));
        }
        let sub_grid = &grid[range.clone()];
        let (fit, slp) = phase_smoother(sub_grid, b)?;
        let block = residuals.columns(range.start, range.len());
        theta
            .columns_mut(range.start, range.len())
            .copy_from(&(&block * fit.transpose()));
        slope
            .columns_mut(range.start, range.len())
            .copy_from(&(&block * slp.transpose()));
    }
    Ok((theta, slope))
}

/// Default bandwidth candidates for a phase: 10 log-spaced values from twice the
/// grid spacing up to the phase length.
fn default_candidates(sub_grid: &[f64]) -> Vec<f64> {
    let len = sub_grid.len();
    let spacing = (sub_grid[len - 1] - sub_grid[0]) / (len - 1) as f64;
    let lo = 2.0 * spacing;
    let hi = (sub_grid[len - 1] - sub_grid[0]).max(lo * 1.0001);
    (0..10)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 9.0).exp())
        .collect()
}

/// Select one bandwidth per phase by minimizing the generalized cross-validation
/// score `GCV(b) = (RSS(b)/T_pa) / (1 - tr(S_b)/T_pa)^2`, residuals pooled over
/// subjects. Ties break toward the smaller bandwidth.
pub fn select_bandwidth_gcv(
    residuals: &DMatrix<f64>,
    grid: &[f64],
    phases: &PhasePartition,
    candidates: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if let Some(c) = candidates {
        if c.is_empty() {
            return Err(Error::InvalidInput("empty bandwidth candidate list".into()));
        }
    }
    let mut out = Vec::with_capacity(phases.len());
    for range in phases.ranges() {
        if range.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "phase {range:?} has fewer than 2 grid points"
            )));
        }
        let sub_grid = &grid[range.clone()];
        let cands = match candidates {
            Some(c) => c.to_vec(),
            None => default_candidates(sub_grid),
        };
        let block = residuals.columns(range.start, range.len());
        let t_pa = range.len() as f64;
        let mut best: Option<(f64, f64)> = None; // (gcv, b)
        for &b in &cands {
            let Ok((fit, _)) = phase_smoother(sub_grid, b) else {
                continue;
            };
            let tr: f64 = fit.diagonal().iter().sum();
            if tr >= t_pa {
                continue;
            }
            let fitted = &block * fit.transpose();
            let rss: f64 = (&block - fitted).iter().map(|r| r * r).sum::<f64>()
                / residuals.nrows() as f64;
            let gcv = (rss / t_pa) / (1.0 - tr / t_pa).powi(2);
            let better = match best {
                None => true,
                Some((g, bb)) => gcv < g || (gcv == g && b < bb),
            };
            if better {
                best = Some((gcv, b));
            }
        }
        let (_, b) = best.ok_or_else(|| {
            Error::DegenerateSmoother(format!(
                "no bandwidth candidate gives an admissible smoother on phase {range:?}"
            ))
        })?;
        out.push(b);
    }
    Ok(out)
}

/// Assemble the weight model from the pointwise OLS coefficients and smoothed
/// residual curves: `Sigma_theta` is the sample covariance of the theta curves,
/// `sigma2` the mean square of the second-stage residuals, and
/// `W = Sigma^{-1/2}` by symmetric eigendecomposition with a relative floor of
/// `1e-10 * lambda_max` on the eigenvalues.
pub fn estimate_weight_model(
    ds: &FunctionalDataset,
    beta_ols: &DMatrix<f64>,
    theta_hat: &DMatrix<f64>,
    bandwidths: Vec<f64>,
) -> Result<WeightModel> {
    let n = ds.num_subjects();
    let t_len = ds.num_times();
    let fitted = &ds.x * beta_ols;
    let resid2 = &ds.y - fitted - theta_hat;
    let sigma2 = resid2.iter().map(|r| r * r).sum::<f64>() / (n * t_len) as f64;
    if sigma2 <= 1e-12 {
        return Err(Error::DegenerateNoise(format!(
            "second-stage residual variance {sigma2:.3e} is numerically zero"
        )));
    }
    let mean = theta_hat.row_mean();
    let mut centered = theta_hat.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut sigma_theta = centered.transpose() * &centered / (n as f64 - 1.0);
    // symmetrize against rounding
    sigma_theta = (&sigma_theta + sigma_theta.transpose()) * 0.5;
    let mut sigma = sigma_theta.clone();
    for i in 0..t_len {
        sigma[(i, i)] += sigma2;
    }
    let w = inverse_sqrt_psd(&sigma)?;
    Ok(WeightModel { sigma_theta, sigma2, sigma, w, bandwidths })
}

/// Symmetric inverse square root with eigenvalues floored at `1e-10 * lambda_max`.
pub fn inverse_sqrt_psd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sigma.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Err(Error::InvalidInput("covariance has no positive eigenvalue".into()));
    }
    let floor = 1e-10 * max;
    let inv_sqrt: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / l.max(floor).sqrt())
        .collect();
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv_sqrt[j];
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Full weight estimation pipeline: pointwise OLS, GCV bandwidths, phase-wise local
/// linear smoothing, and covariance assembly.
pub fn estimate_weights(ds: &FunctionalDataset) -> Result<WeightModel> {
    let beta_ols = ols_pointwise(ds)?;
    let residuals = &ds.y - &ds.x * &beta_ols;
    let bandwidths = select_bandwidth_gcv(&residuals, &ds.grid, &ds.phases, None)?;
    let (theta_hat, _) = local_linear_theta(&residuals, &ds.grid, &ds.phases, &bandwidths)?;
    estimate_weight_model(ds, &beta_ols, &theta_hat, bandwidths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhasePartition;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid(t: usize) -> Vec<f64> {
        (0..t).map(|i| i as f64 / (t - 1) as f64).collect()
    }

    fn dataset(y: DMatrix<f64>, x: DMatrix<f64>, phases: PhasePartition) -> FunctionalDataset {
        let g = grid(y.ncols());
        FunctionalDataset::new(y, x, g, phases).unwrap()
    }

    #[test]
    fn ols_recovers_noiseless_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(7, 2, |_, _| rng.random::<f64>() - 0.5);
        let c = DMatrix::from_fn(2, 5, |_, _| rng.random::<f64>() - 0.5);
        let y = &x * &c;
        let ds = dataset(y, x, PhasePartition::single(5));
        let est = ols_pointwise(&ds).unwrap();
        for (a, b) in est.iter().zip(c.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn ols_scalar_case_matches_ratio() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let y = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 5.0, 4.0]);
        let ds = dataset(y, x, PhasePartition::single(2));
        let est = ols_pointwise(&ds).unwrap();
        // sum(x*y)/sum(x^2) per column
        assert_abs_diff_eq!(est[(0, 0)], (3.0 + 10.0) / 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est[(0, 1)], (1.0 + 8.0) / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn ols_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(6, 2, |_, _| rng.random::<f64>() - 0.5);
        let y = DMatrix::from_fn(6, 4, |_, _| rng.random::<f64>() - 0.5);
        let ds = dataset(y.clone(), x.clone(), PhasePartition::single(4));
        let est = ols_pointwise(&ds).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = DMatrix::from_fn(6, 2, |i, j| x[(perm[i], j)]);
        let yp = DMatrix::from_fn(6, 4, |i, j| y[(perm[i], j)]);
        let dsp = dataset(yp, xp, PhasePartition::single(4));
        let estp = ols_pointwise(&dsp).unwrap();
        for (a, b) in est.iter().zip(estp.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ols_rejects_singular_design() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DMatrix::zeros(3, 3);
        let ds = dataset(y, x, PhasePartition::single(3));
        assert!(matches!(ols_pointwise(&ds), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn local_linear_reproduces_constants_and_lines() {
        let g = grid(20);
        let phases = PhasePartition::single(20);
        let constant = DMatrix::from_element(2, 20, 3.25);
        let (theta, slope) = local_linear_theta(&constant, &g, &phases, &[0.17]).unwrap();
        for v in theta.iter() {
            assert_abs_diff_eq!(*v, 3.25, epsilon = 1e-10);
        }
        for v in slope.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }

        let line = DMatrix::from_fn(1, 20, |_, m| 2.0 - 5.0 * g[m]);
        let (theta, _) = local_linear_theta(&line, &g, &phases, &[1.0]).unwrap();
        for (m, v) in theta.iter().enumerate() {
            assert_abs_diff_eq!(*v, 2.0 - 5.0 * g[m], epsilon = 1e-8);
        }
    }

    #[test]
    fn smoothing_never_crosses_phases() {
        // step function: -1 on the first phase, +1 on the second
        let g = grid(31);
        let phases = PhasePartition::from_boundaries(&g, &[0.5]).unwrap();
        let step = DMatrix::from_fn(3, 31, |_, m| if g[m] < 0.5 { -1.0 } else { 1.0 });
        let (theta, _) = local_linear_theta(&step, &g, &phases, &[0.4, 0.4]).unwrap();
        // constants per phase are reproduced exactly, so no boundary bleeding
        for m in 0..31 {
            let expect = if g[m] < 0.5 { -1.0 } else { 1.0 };
            assert_abs_diff_eq!(theta[(0, m)], expect, epsilon = 1e-9);
        }
        // oracle: fitting each phase separately must agree
        for range in phases.ranges() {
            let sub: Vec<f64> = g[range.clone()].to_vec();
            let block = DMatrix::from_fn(3, sub.len(), |i, m| step[(i, range.start + m)]);
            let single = PhasePartition::single(sub.len());
            let (th, _) = local_linear_theta(&block, &sub, &single, &[0.4]).unwrap();
            for m in 0..sub.len() {
                assert_abs_diff_eq!(theta[(0, range.start + m)], th[(0, m)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bandwidth_error_when_too_small() {
        let g = grid(10);
        let phases = PhasePartition::single(10);
        let r = DMatrix::zeros(2, 10);
        let res = local_linear_theta(&r, &g, &phases, &[1e-6]);
        assert!(matches!(res, Err(Error::Bandwidth(_))));
    }

    #[test]
    fn gcv_single_candidate_passthrough() {
        let g = grid(15);
        let phases = PhasePartition::single(15);
        let r = DMatrix::from_fn(2, 15, |_, m| g[m]);
        let b = select_bandwidth_gcv(&r, &g, &phases, Some(&[0.3])).unwrap();
        assert_eq!(b, vec![0.3]);
    }

    #[test]
    fn gcv_noiseless_linear_fits_exactly() {
        let g = grid(25);
        let phases = PhasePartition::single(25);
        let r = DMatrix::from_fn(3, 25, |i, m| (i as f64 + 1.0) * (0.5 - g[m]));
        let b = select_bandwidth_gcv(&r, &g, &phases, None).unwrap();
        let (theta, _) = local_linear_theta(&r, &g, &phases, &b).unwrap();
        let rss: f64 = (&r - theta).iter().map(|v| v * v).sum();
        assert!(rss < 1e-6, "rss = {rss}");
    }

    #[test]
    fn gcv_pure_noise_prefers_wide_bandwidths() {
        // local linear on pure noise should smooth hard: the selected bandwidth
        // lands in the upper half of the candidate range most of the time
        let g = grid(40);
        let phases = PhasePartition::single(40);
        let spacing = g[1] - g[0];
        let lo = 2.0 * spacing;
        let hi = 1.0f64;
        let cands: Vec<f64> = (0..10)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 9.0).exp())
            .collect();
        let mut upper = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = DMatrix::from_fn(4, 40, |_, _| rng.sample(rand_distr::StandardNormal));
            let b = select_bandwidth_gcv(&r, &g, &phases, Some(&cands)).unwrap()[0];
            let idx = cands.iter().position(|&c| c == b).unwrap();
            if idx >= 5 {
                upper += 1;
            }
        }
        assert!(upper >= 80, "upper-half selections: {upper}/100");
    }

    #[test]
    fn weight_model_identity_case() {
        // theta == 0 and unit residual variance gives Sigma = I and W = I
        let g = grid(6);
        let x = DMatrix::from_element(4, 1, 1.0);
        let beta = DMatrix::zeros(1, 6);
        let y = DMatrix::from_fn(4, 6, |i, m| if (i + m) % 2 == 0 { 1.0 } else { -1.0 });
        let ds = FunctionalDataset::new(y, x, g, PhasePartition::single(6)).unwrap();
        let theta = DMatrix::zeros(4, 6);
        let wm = estimate_weight_model(&ds, &beta, &theta, vec![0.5]).unwrap();
        assert_abs_diff_eq!(wm.sigma2, 1.0, epsilon = 1e-12);
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(wm.sigma[(i, j)], expect, epsilon = 1e-10);
                assert_abs_diff_eq!(wm.w[(i, j)], expect, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn weight_model_diagonal_toy() {
        // Sigma = diag(4, 1) -> W = diag(0.5, 1)
        let g = grid(2);
        let x = DMatrix::from_element(2, 1, 1.0);
        let beta = DMatrix::zeros(1, 2);
        // theta columns: sample covariance (n-1 divisor) = diag(3, 0)
        let a = (1.5f64).sqrt();
        let theta = DMatrix::from_row_slice(2, 2, &[a, 0.0, -a, 0.0]);
        // second-stage residuals y - 0 - theta have mean square 1
        let y = DMatrix::from_row_slice(2, 2, &[a + 1.0, 1.0, -a - 1.0, -1.0]);
        let ds = FunctionalDataset::new(y, x, g, PhasePartition::single(2)).unwrap();
        let wm = estimate_weight_model(&ds, &beta, &theta, vec![0.5]).unwrap();
        assert_abs_diff_eq!(wm.sigma[(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wm.sigma[(1, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wm.w[(0, 0)], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(wm.w[(1, 1)], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn inverse_sqrt_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(8, 8, |_, _| rng.random::<f64>() - 0.5);
        let sigma = &a * a.transpose() + DMatrix::identity(8, 8) * 0.5;
        let w = inverse_sqrt_psd(&sigma).unwrap();
        let prod = &w * w.transpose() * &sigma;
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - expect).abs() < 1e-8);
            }
        }
        // eigenvalues of W W^T live within the reciprocal eigenvalue range of Sigma
        let eig_s = sigma.clone().symmetric_eigen();
        let smin = eig_s.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let smax = eig_s.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let eig_w = (&w * w.transpose()).symmetric_eigen();
        for &l in eig_w.eigenvalues.iter() {
            assert!(l >= 1.0 / smax - 1e-9 && l <= 1.0 / smin + 1e-9);
        }
    }

    #[test]
    fn degenerate_noise_is_rejected() {
        let g = grid(4);
        let x = DMatrix::from_element(2, 1, 1.0);
        let beta = DMatrix::zeros(1, 4);
        let y = DMatrix::zeros(2, 4);
        let theta = DMatrix::zeros(2, 4);
        let ds = FunctionalDataset::new(y, x, g, PhasePartition::single(4)).unwrap();
        let res = estimate_weight_model(&ds, &beta, &theta, vec![0.5]);
        assert!(matches!(res, Err(Error::DegenerateNoise(_))));
    }
}
