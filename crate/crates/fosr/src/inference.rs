//! KKT-based covariance of the penalized estimator, perturbation expansion to the
//! full coefficient set, simultaneous confidence bands, and a one-sided windowed
//! suppression test.
//!
//! For supported coefficients the stationarity system is linear in `gamma_hat`:
//! row `(j, k)` has entries `Gx[j, j'] * Gb[k, k']` plus `lambda * D_jk` on its own
//! diagonal, where `Gx = X^T X` and `Gb = B W W^T B^T`. The right-hand side is
//! driven by the noise `theta + E`, whose rows are independent across subjects
//! with common covariance `Sigma`, so the middle of the sandwich reduces to
//! `Gx[j, j'] * H[k, k']` with `H = B W W^T Sigma W W^T B^T`. No `nT x nT`
//! matrices are ever formed.

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::solver::BridgeFit;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::ops::Range;

/// Covariance of the coefficient estimates on a support set.
#[derive(Debug, Clone)]
pub struct GammaCovariance {
    /// Row-major `(j, k)` pairs indexing the covariance.
    pub support: Vec<(usize, usize)>,
    /// Symmetric PSD matrix after clipping negative eigenvalues at zero.
    pub cov: DMatrix<f64>,
    pub p: usize,
    pub k: usize,
}

impl GammaCovariance {
    /// `K x K` covariance block of coefficient `j`; entries outside the support
    /// are zero.
    pub fn coefficient_block(&self, j: usize) -> DMatrix<f64> {
        let mut block = DMatrix::zeros(self.k, self.k);
        let idx: Vec<(usize, usize)> = self
            .support
            .iter()
            .enumerate()
            .filter(|(_, &(jj, _))| jj == j)
            .map(|(i, &(_, kk))| (i, kk))
            .collect();
        for &(a, ka) in &idx {
            for &(b, kb) in &idx {
                block[(ka, kb)] = self.cov[(a, b)];
            }
        }
        block
    }
}

/// The stationarity system for a support set: the square matrix `P_lambda` and the
/// factors needed to assemble the sandwich middle.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub support: Vec<(usize, usize)>,
    /// `s x s`, rows indexed by the stationarity equation of each supported pair.
    pub p_lambda: DMatrix<f64>,
    gx: DMatrix<f64>,
    /// `T x K` matrix `W W^T B^T` whose column `k` drives equation `(j, k)`.
    a: DMatrix<f64>,
    p: usize,
    k: usize,
}

/// Assemble `P_lambda` and the noise-projection factors for the given support.
pub fn build_p_q(
    support: Vec<(usize, usize)>,
    d: &DMatrix<f64>,
    basis: &BasisSystem,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lambda: f64,
) -> Result<KktSystem> {
    if support.is_empty() {
        return Err(Error::InvalidInput("empty support in the KKT system".into()));
    }
    let p = x.ncols();
    let k = basis.num_basis();
    for &(j, kk) in &support {
        if j >= p || kk >= k {
            return Err(Error::InvalidInput(format!(
                "support index ({j}, {kk}) out of range for p={p}, K={k}"
            )));
        }
    }
    if d.nrows() != p || d.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "D is {}x{}, expected {p}x{k}",
            d.nrows(),
            d.ncols()
        )));
    }
    let gx = x.transpose() * x;
    let wwt = w * w.transpose();
    let a = &wwt * basis.b.transpose(); // T x K
    let gb = &basis.b * &a; // K x K
    let s = support.len();
    let mut p_lambda = DMatrix::zeros(s, s);
    for (r, &(j, kk)) in support.iter().enumerate() {
        for (c, &(j2, kk2)) in support.iter().enumerate() {
            let mut v = gx[(j, j2)] * gb[(kk, kk2)];
            if r == c {
                v += lambda * d[(j, kk)];
            }
            p_lambda[(r, c)] = v;
        }
    }
    Ok(KktSystem { support, p_lambda, gx, a, p, k })
}

/// Sandwich covariance `P^{-1} M P^{-T}` where
/// `M[(j,k),(j',k')] = Gx[j,j'] * (a_k^T Sigma a_k')` and `noise_cov` is the
/// common `T x T` covariance of each subject's noise curve `theta_i + eps_i`.
pub fn covariance_gamma(sys: &KktSystem, noise_cov: &DMatrix<f64>) -> Result<GammaCovariance> {
    let t_len = sys.a.nrows();
    if noise_cov.nrows() != t_len || noise_cov.ncols() != t_len {
        return Err(Error::DimensionMismatch(format!(
            "noise covariance is {}x{}, expected {t_len}x{t_len}",
            noise_cov.nrows(),
            noise_cov.ncols()
        )));
    }
    let h = sys.a.transpose() * noise_cov * &sys.a; // K x K
    let s = sys.support.len();
    let mut mb = DMatrix::zeros(s, s);
    for (r, &(j, kk)) in sys.support.iter().enumerate() {
        for (c, &(j2, kk2)) in sys.support.iter().enumerate() {
            mb[(r, c)] = sys.gx[(j, j2)] * h[(kk, kk2)];
        }
    }
    let lu = sys.p_lambda.clone().lu();
    let first = lu.solve(&mb).ok_or_else(|| degenerate(&sys.p_lambda))?;
    let second = lu
        .solve(&first.transpose())
        .ok_or_else(|| degenerate(&sys.p_lambda))?;
    let mut cov = second.transpose();
    cov = (&cov + cov.transpose()) * 0.5;
    // clip negative eigenvalues at zero
    let eig = cov.symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (i, mut col) in scaled.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[i].max(0.0);
    }
    let cov = &scaled * eig.eigenvectors.transpose();
    Ok(GammaCovariance { support: sys.support.clone(), cov, p: sys.p, k: sys.k })
}

fn degenerate(p_lambda: &DMatrix<f64>) -> Error {
    let sv = p_lambda.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    Error::DegenerateSupport { cond: if min > 0.0 { max / min } else { f64::INFINITY } }
}

/// Expand the covariance to every coefficient: seeded uniform `(-eps, eps)`
/// perturbations mark the zero entries as supported, and the sandwich is rebuilt
/// on the full index set with the converged Lasso weights of the fit. `eps`
/// defaults to `1e-4 * max|gamma_hat|`.
pub fn expand_covariance(
    fit: &BridgeFit,
    basis: &BasisSystem,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
    eps: Option<f64>,
    seed: u64,
) -> Result<GammaCovariance> {
    let max_abs = fit.gamma.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let eps = match eps {
        Some(e) => {
            if e <= 0.0 {
                return Err(Error::InvalidConfig("eps must be positive".into()));
            }
            e
        }
        None => 1e-4 * max_abs.max(1.0),
    };
    let p = fit.gamma.nrows();
    let k = fit.gamma.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = fit.gamma.clone();
    for j in 0..p {
        for kk in 0..k {
            if perturbed[(j, kk)] == 0.0 {
                perturbed[(j, kk)] = rng.random_range(-eps..eps);
            }
        }
    }
    // all entries are now nonzero, so the support is the full index set
    let support: Vec<(usize, usize)> =
        (0..p).flat_map(|j| (0..k).map(move |kk| (j, kk))).collect();
    debug_assert!(perturbed.iter().all(|&v| v != 0.0));
    let sys = build_p_q(support, &fit.d_final, basis, x, w, fit.config.lambda)?;
    covariance_gamma(&sys, noise_cov)
}

/// Covariance of `beta_j` on the basis evaluation grid: `B^T C_j B` with `C_j`
/// the coefficient block of `j`.
pub fn beta_cov_on_grid(gc: &GammaCovariance, j: usize, basis: &BasisSystem) -> Result<DMatrix<f64>> {
    if j >= gc.p {
        return Err(Error::InvalidInput(format!("coefficient index {j} out of range")));
    }
    if basis.num_basis() != gc.k {
        return Err(Error::DimensionMismatch(format!(
            "basis has K = {}, covariance has K = {}",
            basis.num_basis(),
            gc.k
        )));
    }
    let block = gc.coefficient_block(j);
    Ok(basis.b.transpose() * block * &basis.b)
}

/// A simultaneous confidence band: `beta_hat(t) +- critical * s_hat(t)`.
#[derive(Debug, Clone)]
pub struct ConfidenceBand {
    pub level: f64,
    /// Half-width per grid point, `critical * s_hat(t)`.
    pub half_widths: Vec<f64>,
    /// Level quantile of the simulated max-t statistic.
    pub critical: f64,
    pub draws: usize,
}

fn gaussian_factor(cov_grid: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let t_len = cov_grid.nrows();
    if cov_grid.ncols() != t_len {
        return Err(Error::DimensionMismatch("covariance must be square".into()));
    }
    let sym = (cov_grid + cov_grid.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-6 * max.max(1e-300) {
        return Err(Error::InvalidInput(format!(
            "covariance is not PSD: min eigenvalue {min:.3e}"
        )));
    }
    let cols: Vec<usize> =
        (0..t_len).filter(|&i| eig.eigenvalues[i] > 0.0).collect();
    let mut factor = DMatrix::zeros(t_len, cols.len());
    for (c, &i) in cols.iter().enumerate() {
        let scale = eig.eigenvalues[i].max(0.0).sqrt();
        for r in 0..t_len {
            factor[(r, c)] = eig.eigenvectors[(r, i)] * scale;
        }
    }
    let sd: Vec<f64> = (0..t_len).map(|i| sym[(i, i)].max(0.0).sqrt()).collect();
    Ok((factor, sd))
}

/// Simultaneous band by max-t simulation: draw zero-mean Gaussian fields with the
/// given grid covariance, record `max_t |G(t)| / s_hat(t)` over the points with
/// positive variance, and set the critical multiplier to the level quantile of the
/// stored draws. Reproducible for a fixed seed and draw count.
pub fn joint_band(
    cov_grid: &DMatrix<f64>,
    level: f64,
    draws: usize,
    seed: u64,
) -> Result<ConfidenceBand> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level = {level} outside (0, 1)")));
    }
    if draws < 1000 {
        return Err(Error::InvalidConfig("need at least 1000 draws".into()));
    }
    let (factor, sd) = gaussian_factor(cov_grid)?;
    let t_len = sd.len();
    let sd_max = sd.iter().cloned().fold(0.0f64, f64::max);
    let active: Vec<usize> = (0..t_len).filter(|&i| sd[i] > 1e-12 * sd_max.max(1e-300)).collect();
    let critical = if active.is_empty() {
        0.0
    } else {
        let rank = factor.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = Vec::with_capacity(draws);
        let mut g = vec![0.0f64; rank];
        for _ in 0..draws {
            for gi in g.iter_mut() {
                *gi = rng.sample(StandardNormal);
            }
            let mut maxstat = 0.0f64;
            for &i in &active {
                let mut z = 0.0;
                for c in 0..rank {
                    z += factor[(i, c)] * g[c];
                }
                maxstat = maxstat.max((z / sd[i]).abs());
            }
            stats.push(maxstat);
        }
        stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((level * draws as f64).ceil() as usize).clamp(1, draws) - 1;
        stats[idx]
    };
    Ok(ConfidenceBand {
        level,
        half_widths: sd.iter().map(|s| critical * s).collect(),
        critical,
        draws,
    })
}

/// One-sided Monte-Carlo p-value for "no suppression" from the minimum
/// standardized statistic over a window: the observed
/// `z = min_{t in window} beta_hat(t)/s_hat(t)` is ranked against simulated
/// minima of the standardized Gaussian field under the null.
pub fn suppression_test(
    beta_hat: &[f64],
    cov_grid: &DMatrix<f64>,
    window: Range<usize>,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let t_len = beta_hat.len();
    if window.is_empty() || window.end > t_len {
        return Err(Error::InvalidInput(format!(
            "window {window:?} is empty or exceeds the grid of {t_len} points"
        )));
    }
    if cov_grid.nrows() != t_len {
        return Err(Error::DimensionMismatch("covariance does not match the grid".into()));
    }
    if draws < 1000 {
        return Err(Error::InvalidConfig("need at least 1000 draws".into()));
    }
    let (factor, sd) = gaussian_factor(cov_grid)?;
    for i in window.clone() {
        if sd[i] <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "zero standard deviation at window index {i}; use the expanded covariance"
            )));
        }
    }
    let z = window
        .clone()
        .map(|i| beta_hat[i] / sd[i])
        .fold(f64::INFINITY, f64::min);
    let rank = factor.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    let mut g = vec![0.0f64; rank];
    for _ in 0..draws {
        for gi in g.iter_mut() {
            *gi = rng.sample(StandardNormal);
        }
        let mut minstat = f64::INFINITY;
        for i in window.clone() {
            let mut v = 0.0;
            for c in 0..rank {
                v += factor[(i, c)] * g[c];
            }
            minstat = minstat.min(v / sd[i]);
        }
        if minstat <= z {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (draws + 1) as f64)
}
