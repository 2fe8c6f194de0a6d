//! Baseline GLS estimator, adjusted extended BIC, and `(lambda, alpha)` grid search.
//!
//! The adjusted EBIC normalizes the weighted residual sum of squares of a candidate
//! fit by the GLS fit's, which is unbiased and dense, so shrinkage does not inflate
//! the implicit variance estimate:
//!
//! ```text
//!   score = T * RSS_w(fit) / RSS_w(GLS) + df * log(n)/n + nu * df * log(pK)/n
//! ```
//!
//! with `df` the number of nonzero entries of `gamma_hat`.

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::model::FunctionalDataset;
use crate::solver::{fit_group_bridge_cached, select_ridge_lambda_cv, BridgeConfig, BridgeFit, ProblemCache};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// GLS estimator `(X^T X)^{-1} X^T Y W W^T B^T (B W W^T B^T)^{-1}` and its
/// weighted residual variance `||(Y - X beta B) W||^2 / (nT)`.
pub fn gls_estimate(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    basis: &BasisSystem,
    w: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let cache = ProblemCache::new(x, y, basis, w)?;
    let beta = cache.ridge(0.0)?;
    let sigma2 = cache.weighted_rss(&beta) / (y.nrows() * y.ncols()) as f64;
    Ok((beta, sigma2))
}

/// EBIC sparsity constant `nu = max(1 - log(n) / (2 log(pK)), 1/2)`.
pub fn ebic_nu(n: usize, p: usize, k: usize) -> f64 {
    debug_assert!(n >= 2 && p * k >= 2);
    (1.0 - (n as f64).ln() / (2.0 * ((p * k) as f64).ln())).max(0.5)
}

/// Adjusted EBIC score from precomputed weighted residual sums of squares.
#[allow(clippy::too_many_arguments)]
pub fn adjusted_ebic(
    fit_wrss: f64,
    gls_wrss: f64,
    df: usize,
    n: usize,
    t: usize,
    p: usize,
    k: usize,
    nu: f64,
) -> Result<f64> {
    if gls_wrss <= 0.0 {
        return Err(Error::DegenerateNoise(
            "GLS weighted RSS is zero; the data are noiseless, add jitter to the responses"
                .into(),
        ));
    }
    let nf = n as f64;
    Ok(t as f64 * fit_wrss / gls_wrss
        + df as f64 * nf.ln() / nf
        + nu * df as f64 * ((p * k) as f64).ln() / nf)
}

/// Unadjusted EBIC, provided for comparison: the variance plug-in is the GLS
/// residual variance.
#[allow(clippy::too_many_arguments)]
pub fn ebic_unadjusted(
    fit_wrss: f64,
    sigma2: f64,
    df: usize,
    n: usize,
    t: usize,
    p: usize,
    k: usize,
    nu: f64,
) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(Error::DegenerateNoise("variance plug-in must be positive".into()));
    }
    let nf = n as f64;
    Ok(fit_wrss / (nf * sigma2)
        + t as f64 * sigma2.ln()
        + df as f64 * nf.ln() / nf
        + nu * df as f64 * ((p * k) as f64).ln() / nf)
}

/// A `(lambda, alpha)` search grid.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl GridSpec {
    /// 100 log-linear lambdas in `[0.1, 100]` and 18 linear alphas in `[0.05, 0.95]`.
    pub fn paper_default() -> Self {
        Self::with_counts(100, 18)
    }

    /// Same ranges with custom resolution.
    pub fn with_counts(n_lambda: usize, n_alpha: usize) -> Self {
        let lambdas = (0..n_lambda)
            .map(|i| {
                if n_lambda == 1 {
                    0.1
                } else {
                    0.1 * 1000f64.powf(i as f64 / (n_lambda - 1) as f64)
                }
            })
            .collect();
        let alphas = (0..n_alpha)
            .map(|i| {
                if n_alpha == 1 {
                    0.5
                } else {
                    0.05 + 0.9 * i as f64 / (n_alpha - 1) as f64
                }
            })
            .collect();
        Self { lambdas, alphas }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.alphas.is_empty() {
            return Err(Error::InvalidConfig("empty tuning grid".into()));
        }
        Ok(())
    }
}

/// Scored tuning surface and the selected pair.
#[derive(Debug, Clone)]
pub struct TuningGrid {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `scores[(i, j)]` for `(lambdas[i], alphas[j])`; failed fits carry `+inf`.
    pub scores: DMatrix<f64>,
    /// Nonzero-coefficient counts per cell; `-1` marks a failed fit.
    pub dfs: DMatrix<f64>,
    pub best_lambda: f64,
    pub best_alpha: f64,
    pub best_index: (usize, usize),
    pub best_fit: BridgeFit,
    /// Diagnostics for failed cells: `(lambda index, alpha index, message)`.
    pub failures: Vec<(usize, usize, String)>,
    pub nu: f64,
}

/// Pick the minimizing cell; ties break toward larger lambda, then smaller alpha.
fn select_best(
    scores: &DMatrix<f64>,
    lambdas: &[f64],
    alphas: &[f64],
) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for i in 0..lambdas.len() {
        for j in 0..alphas.len() {
            let s = scores[(i, j)];
            if !s.is_finite() {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, bj)) => {
                    let bs = scores[(bi, bj)];
                    s < bs
                        || (s == bs
                            && (lambdas[i] > lambdas[bi]
                                || (lambdas[i] == lambdas[bi] && alphas[j] < alphas[bj])))
                }
            };
            if better {
                best = Some((i, j));
            }
        }
    }
    best
}

/// Fit every `(lambda, alpha)` pair, score with the adjusted EBIC, and return the
/// full surface plus the winning fit. Cells are independent and evaluated in
/// parallel; assembly is index-ordered so the result does not depend on thread
/// count. All fits share one ridge warm start, resolved once (cross-validated if
/// `solver_config.ridge_lambda` is `None`).
pub fn grid_search(
    ds: &FunctionalDataset,
    basis: &BasisSystem,
    w: &DMatrix<f64>,
    grid: &GridSpec,
    solver_config: &BridgeConfig,
) -> Result<TuningGrid> {
    grid.validate()?;
    let cache = ProblemCache::new(&ds.x, &ds.y, basis, w)?;
    let ridge_lambda = match solver_config.ridge_lambda {
        Some(r) => r,
        None => select_ridge_lambda_cv(&ds.x, &ds.y, basis, w, solver_config.cv_seed)?,
    };
    let warm = cache.ridge(ridge_lambda)?;

    let (n, t, p, k) = (
        ds.num_subjects(),
        ds.num_times(),
        ds.num_covariates(),
        basis.num_basis(),
    );
    let gls = cache.ridge(0.0)?;
    let gls_wrss = cache.weighted_rss(&gls);
    if gls_wrss <= 0.0 {
        return Err(Error::DegenerateNoise(
            "GLS weighted RSS is zero; adjusted EBIC is undefined".into(),
        ));
    }
    let nu = ebic_nu(n, p, k);

    let nl = grid.lambdas.len();
    let na = grid.alphas.len();
    let cells: Vec<(usize, usize)> =
        (0..nl).flat_map(|i| (0..na).map(move |j| (i, j))).collect();

    let results: Vec<((usize, usize), std::result::Result<(BridgeFit, f64, usize), String>)> =
        cells
            .par_iter()
            .map(|&(i, j)| {
                let mut cfg = solver_config.clone();
                cfg.lambda = grid.lambdas[i];
                cfg.alpha = grid.alphas[j];
                cfg.ridge_lambda = Some(ridge_lambda);
                let out = fit_group_bridge_cached(&cache, &cfg, Some(&warm))
                    .and_then(|fit| {
                        let wrss = cache.weighted_rss(&fit.gamma);
                        let df = fit.df();
                        let score = adjusted_ebic(wrss, gls_wrss, df, n, t, p, k, nu)?;
                        Ok((fit, score, df))
                    })
                    .map_err(|e| e.to_string());
                ((i, j), out)
            })
            .collect();

    let mut scores = DMatrix::from_element(nl, na, f64::INFINITY);
    let mut dfs = DMatrix::from_element(nl, na, -1.0);
    let mut fits: Vec<Option<BridgeFit>> = (0..nl * na).map(|_| None).collect();
    let mut failures = Vec::new();
    for ((i, j), out) in results {
        match out {
            Ok((fit, score, df)) => {
                scores[(i, j)] = score;
                dfs[(i, j)] = df as f64;
                fits[i * na + j] = Some(fit);
            }
            Err(msg) => failures.push((i, j, msg)),
        }
    }

    let (bi, bj) = select_best(&scores, &grid.lambdas, &grid.alphas)
        .ok_or_else(|| Error::Divergence("every tuning-grid fit failed".into()))?;
    let best_fit = fits[bi * na + bj].take().expect("selected cell has a fit");

    Ok(TuningGrid {
        lambdas: grid.lambdas.clone(),
        alphas: grid.alphas.clone(),
        scores,
        dfs,
        best_lambda: grid.lambdas[bi],
        best_alpha: grid.alphas[bj],
        best_index: (bi, bj),
        best_fit,
        failures,
        nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{eval_basis, make_knots};
    use crate::model::PhasePartition;
    use crate::solver::ridge_warm_start;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid_pts(t: usize) -> Vec<f64> {
        (0..t).map(|i| i as f64 / (t - 1) as f64).collect()
    }

    #[test]
    fn gls_recovers_noiseless_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kv = make_knots(6, 4).unwrap();
        let bs = eval_basis(&kv, &grid_pts(15)).unwrap();
        let x = DMatrix::from_fn(12, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let gamma = DMatrix::from_fn(2, 6, |_, _| rng.random::<f64>() - 0.5);
        let y = &x * &gamma * &bs.b;
        let w = DMatrix::identity(15, 15);
        let (beta, sigma2) = gls_estimate(&x, &y, &bs, &w).unwrap();
        for (a, b) in beta.iter().zip(gamma.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        assert!(sigma2 < 1e-12);
    }

    #[test]
    fn gls_identity_weight_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kv = make_knots(4, 2).unwrap();
        let bs = eval_basis(&kv, &grid_pts(9)).unwrap();
        let x = DMatrix::from_fn(8, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let y = DMatrix::from_fn(8, 9, |_, _| rng.random::<f64>() - 0.5);
        let w = DMatrix::identity(9, 9);
        let (beta, _) = gls_estimate(&x, &y, &bs, &w).unwrap();
        // vec solve: (Gb (x) Gx) vec(gamma) = vec(M), column-major vec
        let gx = x.transpose() * &x;
        let gb = &bs.b * bs.b.transpose();
        let m = x.transpose() * &y * bs.b.transpose();
        let kron = gb.kronecker(&gx);
        let mvec = DMatrix::from_fn(8, 1, |i, _| m[(i % 2, i / 2)]);
        let sol = kron.try_inverse().unwrap() * mvec;
        for k in 0..4 {
            for j in 0..2 {
                assert_abs_diff_eq!(beta[(j, k)], sol[(k * 2 + j, 0)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gls_equals_zero_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kv = make_knots(5, 3).unwrap();
        let bs = eval_basis(&kv, &grid_pts(11)).unwrap();
        let x = DMatrix::from_fn(9, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let y = DMatrix::from_fn(9, 11, |_, _| rng.random::<f64>() - 0.5);
        let w = DMatrix::identity(11, 11);
        let (beta, _) = gls_estimate(&x, &y, &bs, &w).unwrap();
        let ridge0 = ridge_warm_start(&x, &y, &bs, &w, 0.0).unwrap();
        for (a, b) in beta.iter().zip(ridge0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn nu_formula() {
        // n = 100, pK = 90: 1 - log(100)/(2 log 90) < 1/2, so nu = 1/2
        assert_abs_diff_eq!(ebic_nu(100, 3, 30), 0.5, epsilon = 1e-12);
        // n = pK: 1 - 1/2 = 1/2
        assert_abs_diff_eq!(ebic_nu(64, 8, 8), 0.5, epsilon = 1e-12);
        // n = 10, pK = 10^6
        let expect = 1.0 - 10f64.ln() / (2.0 * 1e6f64.ln());
        assert_abs_diff_eq!(ebic_nu(10, 1000, 1000), expect, epsilon = 1e-12);
        assert!((ebic_nu(10, 1000, 1000) - 0.9167).abs() < 1e-4);
    }

    #[test]
    fn adjusted_ebic_values() {
        // the GLS fit itself scores exactly T in its first term
        let s = adjusted_ebic(2.0, 2.0, 90, 100, 100, 3, 30, 0.5).unwrap();
        let penalty = 90.0 * (100f64).ln() / 100.0 + 0.5 * 90.0 * (90f64).ln() / 100.0;
        assert_abs_diff_eq!(s, 100.0 + penalty, epsilon = 1e-12);

        // equal RSS, df 10 vs 20: difference is 10 (log 100 + 0.5 log 90)/100
        let s10 = adjusted_ebic(3.0, 2.0, 10, 100, 100, 3, 30, 0.5).unwrap();
        let s20 = adjusted_ebic(3.0, 2.0, 20, 100, 100, 3, 30, 0.5).unwrap();
        let expect = 10.0 * ((100f64).ln() + 0.5 * (90f64).ln()) / 100.0;
        assert_abs_diff_eq!(s20 - s10, expect, epsilon = 1e-12);
        assert!((expect - 0.6855).abs() < 1e-4);

        // strictly increasing in df at fixed residual ratio
        assert!(s20 > s10);

        assert!(adjusted_ebic(1.0, 0.0, 5, 100, 100, 3, 30, 0.5).is_err());
    }

    #[test]
    fn tie_break_prefers_larger_lambda_then_smaller_alpha() {
        let lambdas = [0.1, 1.0];
        let alphas = [0.2, 0.8];
        let mut scores = DMatrix::from_element(2, 2, 5.0);
        // all equal: pick lambda = 1.0, alpha = 0.2
        let (i, j) = select_best(&scores, &lambdas, &alphas).unwrap();
        assert_eq!((lambdas[i], alphas[j]), (1.0, 0.2));
        scores[(0, 1)] = 4.0;
        let (i, j) = select_best(&scores, &lambdas, &alphas).unwrap();
        assert_eq!((lambdas[i], alphas[j]), (0.1, 0.8));
    }

    #[test]
    fn single_cell_grid_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kv = make_knots(6, 4).unwrap();
        let g = grid_pts(20);
        let bs = eval_basis(&kv, &g).unwrap();
        let x = DMatrix::from_fn(15, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let gamma = DMatrix::from_fn(2, 6, |_, _| rng.random::<f64>() - 0.5);
        let noise = DMatrix::from_fn(15, 20, |_, _| {
            0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let y = &x * &gamma * &bs.b + noise;
        let ds = FunctionalDataset::new(y, x, g, PhasePartition::single(20)).unwrap();
        let w = DMatrix::identity(20, 20);

        let spec = GridSpec { lambdas: vec![0.5], alphas: vec![0.4] };
        let cfg = BridgeConfig::default();
        let tg = grid_search(&ds, &bs, &w, &spec, &cfg).unwrap();
        assert_eq!(tg.best_index, (0, 0));
        assert_eq!(tg.best_lambda, 0.5);
        assert_eq!(tg.best_alpha, 0.4);

        let spec2 = GridSpec::with_counts(4, 3);
        let a = grid_search(&ds, &bs, &w, &spec2, &cfg).unwrap();
        let b = grid_search(&ds, &bs, &w, &spec2, &cfg).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.best_fit.gamma, b.best_fit.gamma);
        assert!(a.failures.is_empty());
    }

    #[test]
    fn paper_grid_dimensions() {
        let g = GridSpec::paper_default();
        assert_eq!(g.lambdas.len(), 100);
        assert_eq!(g.alphas.len(), 18);
        assert_abs_diff_eq!(g.lambdas[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(g.lambdas[99], 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.alphas[0], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(g.alphas[17], 0.95, epsilon = 1e-12);
    }
}
