//! File formats: CSV matrices with a header row, JSON metadata, and fixed decimal
//! formatting so reruns with the same seed produce byte-identical artifacts.

use anyhow::{bail, Context, Result};
use fosr::model::{FunctionalDataset, PhasePartition};
use nalgebra::DMatrix;
use std::fs;
use std::path::Path;

/// 17 significant digits: round-trips f64 exactly and formats deterministically.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, col_prefix: &str) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{col_prefix}{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().with_context(|| format!("{}: empty file", path.display()))?;
    let ncols = header.split(',').count();
    let mut data: Vec<f64> = Vec::new();
    let mut nrows = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ncols {
            bail!(
                "{}: row {} has {} cells, expected {} (ragged rows)",
                path.display(),
                lineno + 2,
                cells.len(),
                ncols
            );
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().with_context(|| {
                format!(
                    "{}: non-numeric cell at row {}, column {}: '{cell}'",
                    path.display(),
                    lineno + 2,
                    col + 1
                )
            })?;
            data.push(v);
        }
        nrows += 1;
    }
    if nrows == 0 {
        bail!("{}: no data rows", path.display());
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

/// Metadata: the time grid and the interior phase boundaries (values that must
/// coincide with grid points).
pub fn write_meta(path: &Path, grid: &[f64], boundaries: &[f64]) -> Result<()> {
    let meta = serde_json::json!({
        "grid": grid.iter().map(|&v| v).collect::<Vec<f64>>(),
        "phase_boundaries": boundaries.iter().map(|&v| v).collect::<Vec<f64>>(),
    });
    fs::write(path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{}: invalid JSON", path.display()))?;
    let grid: Vec<f64> = v["grid"]
        .as_array()
        .with_context(|| format!("{}: missing 'grid' array", path.display()))?
        .iter()
        .map(|x| x.as_f64().context("non-numeric grid entry"))
        .collect::<Result<_>>()?;
    let boundaries: Vec<f64> = match v.get("phase_boundaries") {
        Some(serde_json::Value::Array(a)) => a
            .iter()
            .map(|x| x.as_f64().context("non-numeric phase boundary"))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    Ok((grid, boundaries))
}

/// Load and validate a dataset from its three files.
pub fn load_dataset(path_y: &Path, path_x: &Path, path_meta: &Path) -> Result<FunctionalDataset> {
    let y = read_matrix_csv(path_y)?;
    let x = read_matrix_csv(path_x)?;
    let (grid, boundaries) = read_meta(path_meta)?;
    let phases = if boundaries.is_empty() {
        PhasePartition::single(grid.len())
    } else {
        PhasePartition::from_boundaries(&grid, &boundaries)
            .with_context(|| format!("{}: invalid phase boundaries", path_meta.display()))?
    };
    FunctionalDataset::new(y, x, grid, phases).context("dataset validation failed")
}

/// Write a generic CSV from a header and rows of preformatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
