//! Subcommand implementations and artifact writing.

use crate::io::{
    fmt_f64, load_dataset, write_csv, write_matrix_csv, write_meta,
};
use crate::{BandsArgs, BenchmarkArgs, CaseArg, FitArgs, SimulateArgs, TuneArgs, WeightsMode};
use anyhow::{bail, Context, Result};
use fosr::basis::{eval_basis, make_knots, BasisSystem};
use fosr::inference::{beta_cov_on_grid, expand_covariance, joint_band, suppression_test};
use fosr::model::{coefficient_functions, FunctionalDataset};
use fosr::simbench::{generate, run_study, Method, SimScenario, StudyConfig};
use fosr::solver::{fit_group_bridge, BridgeConfig, BridgeFit};
use fosr::tuning::{gls_estimate, grid_search, GridSpec};
use fosr::weights::{estimate_weights, WeightModel};
use nalgebra::DMatrix;
use std::path::Path;
use std::time::Instant;

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    outputs: &[&str],
    extra: serde_json::Value,
    started: Instant,
) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "config": config,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "outputs": outputs,
        "results": extra,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_with_intercept(args: &crate::DataArgs) -> Result<FunctionalDataset> {
    let mut ds = load_dataset(&args.y, &args.x, &args.meta)?;
    if args.intercept {
        let n = ds.x.nrows();
        let p = ds.x.ncols();
        let mut x = DMatrix::zeros(n, p + 1);
        x.column_mut(0).fill(1.0);
        x.columns_mut(1, p).copy_from(&ds.x);
        ds = FunctionalDataset::new(ds.y, x, ds.grid, ds.phases)?;
    }
    Ok(ds)
}

fn build_basis(ds: &FunctionalDataset, k: usize, q: usize) -> Result<BasisSystem> {
    let kv = make_knots(k, q)?;
    Ok(eval_basis(&kv, &ds.grid)?)
}

fn resolve_weights(
    ds: &FunctionalDataset,
    mode: WeightsMode,
) -> Result<(DMatrix<f64>, WeightModel)> {
    // the covariance estimate also feeds the sandwich formula, so it is computed
    // in both modes; the mode only controls the W used by the loss
    let wm = estimate_weights(ds)?;
    let w = match mode {
        WeightsMode::Estimated => wm.w.clone(),
        WeightsMode::Identity => DMatrix::identity(ds.num_times(), ds.num_times()),
    };
    Ok((w, wm))
}

fn solver_config(args: &crate::SolverArgs, lambda: f64, alpha: f64, seed: u64) -> BridgeConfig {
    BridgeConfig {
        lambda,
        alpha,
        macro_iters: args.s1,
        admm_steps: args.s2,
        cv_seed: seed,
        ..Default::default()
    }
}

fn write_curves_csv(
    path: &Path,
    grid: &[f64],
    names: &[String],
    curves: &DMatrix<f64>,
) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|m| {
            let mut row = vec![fmt_f64(grid[m])];
            for j in 0..curves.nrows() {
                row.push(fmt_f64(curves[(j, m)]));
            }
            row
        })
        .collect();
    write_csv(path, &header_refs, &rows)
}

fn write_fit_artifacts(
    dir: &Path,
    ds: &FunctionalDataset,
    basis: &BasisSystem,
    fit: &BridgeFit,
    gls_gamma: &DMatrix<f64>,
) -> Result<Vec<&'static str>> {
    let p = fit.gamma.nrows();
    let names: Vec<String> = (0..p).map(|j| format!("beta{j}")).collect();
    write_matrix_csv(&dir.join("gamma.csv"), &fit.gamma, "k")?;

    let curves = coefficient_functions(&fit.gamma, &basis.knots, &ds.grid)?;
    write_curves_csv(&dir.join("beta_curves.csv"), &ds.grid, &names, &curves.values)?;

    let support = DMatrix::from_fn(p, ds.grid.len(), |j, m| {
        if curves.exact_zero[(j, m)] {
            0.0
        } else {
            1.0
        }
    });
    write_curves_csv(&dir.join("support.csv"), &ds.grid, &names, &support)?;

    let gls_curves = gls_gamma * &basis.b;
    write_curves_csv(&dir.join("gls_curves.csv"), &ds.grid, &names, &gls_curves)?;

    let trace_rows: Vec<Vec<String>> = fit
        .objective_trace
        .iter()
        .zip(&fit.weighted_residual_norm_trace)
        .enumerate()
        .map(|(i, (o, r))| vec![i.to_string(), fmt_f64(*o), fmt_f64(*r)])
        .collect();
    write_csv(
        &dir.join("objective_trace.csv"),
        &["iteration", "objective", "weighted_residual_norm"],
        &trace_rows,
    )?;
    Ok(vec![
        "gamma.csv",
        "beta_curves.csv",
        "support.csv",
        "gls_curves.csv",
        "objective_trace.csv",
        "manifest.json",
    ])
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out(&args.run.out)?;
    let ds = load_with_intercept(&args.data)?;
    let basis = build_basis(&ds, args.basis.k, args.basis.q)?;
    let (w, _wm) = resolve_weights(&ds, args.solver.weights)?;
    let config = solver_config(&args.solver, args.lambda, args.alpha, args.run.seed);
    let fit = fit_group_bridge(&ds, &basis, &w, &config)?;
    let (gls_gamma, _) = gls_estimate(&ds.x, &ds.y, &basis, &w)?;
    let outputs = write_fit_artifacts(&args.run.out, &ds, &basis, &fit, &gls_gamma)?;
    write_manifest(
        &args.run.out,
        "fit",
        args.run.seed,
        serde_json::json!({
            "Y": args.data.y, "X": args.data.x, "meta": args.data.meta,
            "intercept": args.data.intercept,
            "K": args.basis.k, "q": args.basis.q,
            "lambda": args.lambda, "alpha": args.alpha,
            "weights": format!("{:?}", args.solver.weights),
            "S1": args.solver.s1, "S2": args.solver.s2,
        }),
        &outputs,
        serde_json::json!({
            "df": fit.df(),
            "converged_at": fit.converged_at,
            "ridge_lambda": fit.config.ridge_lambda,
        }),
        started,
    )
}

fn parse_grid(spec: &str) -> Result<GridSpec> {
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() != 2 {
        bail!("grid spec '{spec}' is not of the form LAMBDASxALPHAS");
    }
    let nl: usize = parts[0].parse().context("lambda count")?;
    let na: usize = parts[1].parse().context("alpha count")?;
    if nl == 0 || na == 0 {
        bail!("grid spec '{spec}' has a zero dimension");
    }
    Ok(GridSpec::with_counts(nl, na))
}

pub fn tune(args: &TuneArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out(&args.run.out)?;
    let ds = load_with_intercept(&args.data)?;
    let basis = build_basis(&ds, args.basis.k, args.basis.q)?;
    let (w, _wm) = resolve_weights(&ds, args.solver.weights)?;
    let grid = parse_grid(&args.grid)?;
    let config = solver_config(&args.solver, 1.0, 0.5, args.run.seed);
    let tg = grid_search(&ds, &basis, &w, &grid, &config)?;

    let mut rows = Vec::new();
    for (i, &lambda) in tg.lambdas.iter().enumerate() {
        for (j, &alpha) in tg.alphas.iter().enumerate() {
            rows.push(vec![
                fmt_f64(lambda),
                fmt_f64(alpha),
                fmt_f64(tg.scores[(i, j)]),
                format!("{}", tg.dfs[(i, j)] as i64),
            ]);
        }
    }
    write_csv(
        &args.run.out.join("ebic_surface.csv"),
        &["lambda", "alpha", "score", "df"],
        &rows,
    )?;
    write_matrix_csv(&args.run.out.join("best_gamma.csv"), &tg.best_fit.gamma, "k")?;
    let names: Vec<String> =
        (0..tg.best_fit.gamma.nrows()).map(|j| format!("beta{j}")).collect();
    let curves = coefficient_functions(&tg.best_fit.gamma, &basis.knots, &ds.grid)?;
    write_curves_csv(&args.run.out.join("best_beta_curves.csv"), &ds.grid, &names, &curves.values)?;

    write_manifest(
        &args.run.out,
        "tune",
        args.run.seed,
        serde_json::json!({
            "Y": args.data.y, "X": args.data.x, "meta": args.data.meta,
            "intercept": args.data.intercept,
            "K": args.basis.k, "q": args.basis.q, "grid": args.grid,
            "weights": format!("{:?}", args.solver.weights),
            "S1": args.solver.s1, "S2": args.solver.s2,
        }),
        &["ebic_surface.csv", "best_gamma.csv", "best_beta_curves.csv", "manifest.json"],
        serde_json::json!({
            "best_lambda": tg.best_lambda,
            "best_alpha": tg.best_alpha,
            "nu": tg.nu,
            "failed_cells": tg.failures.len(),
            "ridge_lambda": tg.best_fit.config.ridge_lambda,
        }),
        started,
    )
}

fn scenario_from(case: CaseArg, n: usize, t: Option<usize>, c0: Option<f64>, seed: u64) -> SimScenario {
    let mut scn = match case {
        CaseArg::Base => SimScenario::base(n, seed),
        CaseArg::Case1 => SimScenario::case1(n, seed),
        CaseArg::Case2 => SimScenario::case2(n, seed),
        CaseArg::Case3 => SimScenario::case3(n, seed),
    };
    if let Some(t) = t {
        scn.t = t;
    }
    if let Some(c0) = c0 {
        scn.c0 = c0;
    }
    scn
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out(&args.run.out)?;
    let scn = scenario_from(args.case, args.n, args.t, args.c0, args.run.seed);
    let (ds, truth) = generate(&scn)?;
    write_matrix_csv(&args.run.out.join("Y.csv"), &ds.y, "t")?;
    write_matrix_csv(&args.run.out.join("X.csv"), &ds.x, "x")?;
    let boundaries: Vec<f64> =
        ds.phases.boundary_indices().iter().map(|&i| ds.grid[i]).collect();
    write_meta(&args.run.out.join("meta.json"), &ds.grid, &boundaries)?;
    let names: Vec<String> = (0..3).map(|j| format!("beta{j}")).collect();
    write_curves_csv(&args.run.out.join("truth.csv"), &ds.grid, &names, &truth)?;
    write_manifest(
        &args.run.out,
        "simulate",
        args.run.seed,
        serde_json::json!({
            "n": scn.n, "T": scn.t, "case": format!("{:?}", scn.case),
            "c0": scn.c0, "sigma_steps": scn.sigma_steps,
            "ar_rho": scn.ar_rho, "noise_sd": scn.noise_sd,
        }),
        &["Y.csv", "X.csv", "meta.json", "truth.csv", "manifest.json"],
        serde_json::json!({}),
        started,
    )
}

pub fn bands(args: &BandsArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out(&args.run.out)?;
    let ds = load_with_intercept(&args.data)?;
    let basis = build_basis(&ds, args.basis.k, args.basis.q)?;
    let (w, wm) = resolve_weights(&ds, args.solver.weights)?;
    let config = solver_config(&args.solver, args.lambda, args.alpha, args.run.seed);
    let fit = fit_group_bridge(&ds, &basis, &w, &config)?;

    let gc = expand_covariance(&fit, &basis, &ds.x, &w, &wm.sigma, None, args.run.seed)?;
    let p = fit.gamma.nrows();
    let t_len = ds.grid.len();
    let mut header = vec!["t".to_string()];
    let mut columns: Vec<Vec<f64>> = vec![ds.grid.clone()];
    let mut criticals = Vec::new();
    let mut cov_grids = Vec::new();
    for j in 0..p {
        let cov_grid = beta_cov_on_grid(&gc, j, &basis)?;
        let band = joint_band(&cov_grid, args.level, args.draws, args.run.seed ^ (j as u64))?;
        let curve = fit.gamma.row(j) * &basis.b;
        header.push(format!("beta{j}"));
        header.push(format!("lower{j}"));
        header.push(format!("upper{j}"));
        columns.push(curve.iter().cloned().collect());
        columns.push(
            curve.iter().zip(&band.half_widths).map(|(c, h)| c - h).collect(),
        );
        columns.push(
            curve.iter().zip(&band.half_widths).map(|(c, h)| c + h).collect(),
        );
        criticals.push(band.critical);
        cov_grids.push(cov_grid);
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = (0..t_len)
        .map(|m| columns.iter().map(|c| fmt_f64(c[m])).collect())
        .collect();
    write_csv(&args.run.out.join("bands.csv"), &header_refs, &rows)?;

    let mut suppression = serde_json::json!(null);
    if let Some(window) = &args.window {
        let parts: Vec<&str> = window.split(',').collect();
        if parts.len() != 2 {
            bail!("window '{window}' is not of the form start,end");
        }
        let a: f64 = parts[0].trim().parse().context("window start")?;
        let b: f64 = parts[1].trim().parse().context("window end")?;
        let lo = ds.grid.iter().position(|&t| t >= a).context("window start beyond grid")?;
        let hi = ds.grid.iter().rposition(|&t| t < b).map(|i| i + 1).unwrap_or(lo);
        let coef = args.coef.unwrap_or(p - 1);
        if coef >= p {
            bail!("--coef {coef} out of range for p = {p}");
        }
        let curve: Vec<f64> = (fit.gamma.row(coef) * &basis.b).iter().cloned().collect();
        let p_value = suppression_test(
            &curve,
            &cov_grids[coef],
            lo..hi,
            args.draws,
            args.run.seed ^ 0x5f, 
        )?;
        suppression = serde_json::json!({
            "window": [a, b], "grid_indices": [lo, hi], "coef": coef, "p_value": p_value,
        });
        std::fs::write(
            args.run.out.join("suppression.json"),
            serde_json::to_string_pretty(&suppression)?,
        )?;
    }

    write_manifest(
        &args.run.out,
        "bands",
        args.run.seed,
        serde_json::json!({
            "Y": args.data.y, "X": args.data.x, "meta": args.data.meta,
            "intercept": args.data.intercept,
            "K": args.basis.k, "q": args.basis.q,
            "lambda": args.lambda, "alpha": args.alpha,
            "weights": format!("{:?}", args.solver.weights),
            "level": args.level, "draws": args.draws,
            "window": args.window,
        }),
        &["bands.csv", "manifest.json"],
        serde_json::json!({
            "critical_multipliers": criticals,
            "df": fit.df(),
            "suppression": suppression,
        }),
        started,
    )
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out(&args.run.out)?;
    let scn = scenario_from(args.case, args.n, args.t, args.c0, args.run.seed);
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .map(|s| Method::parse(s.trim()))
        .collect::<fosr::Result<_>>()?;
    let default_k = if args.case == CaseArg::Case1 { 40 } else { 30 };
    let mut cfg = StudyConfig::new(scn.clone(), args.reps, methods);
    cfg.num_basis = args.k.unwrap_or(default_k);
    cfg.order = args.q;
    cfg.grid = parse_grid(&args.grid)?;
    cfg.solver.macro_iters = args.solver.s1;
    cfg.solver.admm_steps = args.solver.s2;
    cfg.band_level = args.level;
    cfg.band_draws = args.draws;
    let report = run_study(&cfg)?;

    let fmt_se = |se: Option<f64>| se.map(|v| fmt_f64(v)).unwrap_or_default();
    let mut rows = Vec::new();
    for m in &report.methods {
        rows.push(vec![
            m.method.name().to_string(),
            fmt_f64(m.rmse.mean),
            fmt_se(m.rmse.se),
            fmt_f64(m.l_inf.mean),
            fmt_se(m.l_inf.se),
            m.coverage.map(|c| fmt_f64(c.mean)).unwrap_or_default(),
            m.coverage.and_then(|c| c.se).map(fmt_f64).unwrap_or_default(),
            fmt_f64(m.f1.mean),
            fmt_se(m.f1.se),
            fmt_f64(m.fpr.mean),
            fmt_se(m.fpr.se),
            fmt_f64(m.tpr.mean),
            fmt_se(m.tpr.se),
            fmt_f64(m.fpr_early.mean),
            fmt_f64(m.fpr_late.mean),
        ]);
    }
    write_csv(
        &args.run.out.join("results.csv"),
        &[
            "method",
            "rmse_mean",
            "rmse_se",
            "linf_mean",
            "linf_se",
            "coverage_mean",
            "coverage_se",
            "f1_mean",
            "f1_se",
            "fpr_mean",
            "fpr_se",
            "tpr_mean",
            "tpr_se",
            "fpr_early_mean",
            "fpr_late_mean",
        ],
        &rows,
    )?;

    let mut roc_rows = Vec::new();
    for m in &report.methods {
        for pt in &m.roc {
            roc_rows.push(vec![
                m.method.name().to_string(),
                fmt_f64(pt.delta),
                fmt_f64(pt.fpr),
                fmt_f64(pt.tpr),
            ]);
        }
    }
    write_csv(&args.run.out.join("roc.csv"), &["method", "delta", "fpr", "tpr"], &roc_rows)?;

    // per-delta support masks: fraction of replications declaring each grid point
    // nonzero at each delta
    let deltas = &cfg.roc_deltas;
    let mut mask_rows = Vec::new();
    for m in &report.methods {
        for &delta in deltas {
            let mut row = vec![m.method.name().to_string(), fmt_f64(delta)];
            for g in 0..report.grid.len() {
                let frac = m
                    .reps
                    .iter()
                    .filter(|r| r.curve[g].abs() > delta)
                    .count() as f64
                    / m.reps.len() as f64;
                row.push(fmt_f64(frac));
            }
            mask_rows.push(row);
        }
    }
    let mut mask_header = vec!["method".to_string(), "delta".to_string()];
    mask_header.extend(report.grid.iter().enumerate().map(|(i, _)| format!("t{i}")));
    let mask_header_refs: Vec<&str> = mask_header.iter().map(|s| s.as_str()).collect();
    write_csv(&args.run.out.join("support_masks.csv"), &mask_header_refs, &mask_rows)?;

    write_manifest(
        &args.run.out,
        "benchmark",
        args.run.seed,
        serde_json::json!({
            "n": scn.n, "T": scn.t, "case": format!("{:?}", scn.case),
            "c0": scn.c0, "sigma_steps": scn.sigma_steps,
            "ar_rho": scn.ar_rho, "noise_sd": scn.noise_sd,
            "reps": args.reps, "methods": args.methods,
            "K": cfg.num_basis, "q": cfg.order, "grid": args.grid,
            "draws": args.draws, "level": args.level,
            "S1": args.solver.s1, "S2": args.solver.s2,
        }),
        &["results.csv", "roc.csv", "support_masks.csv", "manifest.json"],
        serde_json::json!({ "child_seeds": report.child_seeds }),
        started,
    )
}

