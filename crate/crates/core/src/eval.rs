//! DEM comparison against a reference: vertical alignment and accuracy
//! statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{DemGrid, MeshError};

/// Minimum number of co-valid cells for a vertical alignment.
pub const MIN_OVERLAP: usize = 10;
pub const NMAD_FACTOR: f64 = 1.4826;
pub const DEFAULT_TRUNCATION: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("only {0} co-valid cells; at least {MIN_OVERLAP} needed")]
    InsufficientOverlap(usize),
    #[error("no co-valid cells to evaluate")]
    EmptyEvaluation,
    #[error("grids are not co-registered")]
    GridMismatch,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub completeness_pct: f64,
    pub rmse_trunc_m: f64,
    /// False when no residual is below the truncation threshold; the RMSE is
    /// then reported as 0.
    pub rmse_defined: bool,
    pub nmad_m: f64,
    pub perc68_m: f64,
    /// Cells selected by the mask (all cells without one).
    pub n_total: usize,
    /// Selected cells valid in both grids.
    pub n_valid: usize,
    pub vertical_offset_applied_m: f64,
    pub truncation_m: f64,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Median with the two middle values averaged for even counts. Sorts `v`.
pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nearest-rank percentile (`ceil(p/100 * n)`-th smallest). Sorts `v`.
pub fn percentile_nearest_rank(v: &mut [f64], p: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn nmad(v: &[f64]) -> f64 {
    let mut r = v.to_vec();
    let med = median(&mut r);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    NMAD_FACTOR * median(&mut dev)
}

fn selected(mask: Option<&DemGrid>, i: usize) -> bool {
    mask.is_none_or(|m| !m.is_nodata(m.heights[i]) && m.heights[i] != 0.0)
}

/// `test - truth` on cells valid in both grids (and selected by `mask`).
pub fn residuals(test: &DemGrid, truth: &DemGrid, mask: Option<&DemGrid>) -> Result<(Vec<f64>, usize), EvalError> {
    if !test.same_grid(truth) || mask.is_some_and(|m| !m.same_grid(truth)) {
        return Err(EvalError::GridMismatch);
    }
    let mut out = Vec::new();
    let mut total = 0;
    for i in 0..truth.heights.len() {
        if !selected(mask, i) {
            continue;
        }
        total += 1;
        let (a, b) = (test.heights[i], truth.heights[i]);
        if !test.is_nodata(a) && !truth.is_nodata(b) {
            out.push(a - b);
        }
    }
    Ok((out, total))
}

/// Removes the median vertical offset between `test` and `truth`.
pub fn align_vertical(test: &DemGrid, truth: &DemGrid) -> Result<(DemGrid, f64), EvalError> {
    let (mut r, _) = residuals(test, truth, None)?;
    if r.len() < MIN_OVERLAP {
        return Err(EvalError::InsufficientOverlap(r.len()));
    }
    let offset = median(&mut r);
    let mut out = test.clone();
    for h in out.heights.iter_mut() {
        if !test.is_nodata(*h) {
            *h -= offset;
        }
    }
    Ok((out, offset))
}

/// Accuracy statistics of `test` against `truth` over the cells selected by
/// `mask` (non-zero, non-nodata cells).
pub fn compute_metrics(
    test: &DemGrid,
    truth: &DemGrid,
    mask: Option<&DemGrid>,
    trunc: f64,
) -> Result<MetricsReport, EvalError> {
    let (r, n_total) = residuals(test, truth, mask)?;
    if r.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let inside: Vec<f64> = r.iter().copied().filter(|x| x.abs() < trunc).collect();
    let rmse_defined = !inside.is_empty();
    let rmse = if rmse_defined {
        (inside.iter().map(|x| x * x).sum::<f64>() / inside.len() as f64).sqrt()
    } else {
        0.0
    };
    let mut abs: Vec<f64> = r.iter().map(|x| x.abs()).collect();
    Ok(MetricsReport {
        completeness_pct: 100.0 * inside.len() as f64 / r.len() as f64,
        rmse_trunc_m: rmse,
        rmse_defined,
        nmad_m: nmad(&r),
        perc68_m: percentile_nearest_rank(&mut abs, 68.0),
        n_total,
        n_valid: r.len(),
        vertical_offset_applied_m: 0.0,
        truncation_m: trunc,
    })
}

/// Aligns vertically, then computes metrics; also returns the aligned
/// residual grid.
pub fn evaluate(
    test: &DemGrid,
    truth: &DemGrid,
    mask: Option<&DemGrid>,
    trunc: f64,
    align: bool,
) -> Result<(MetricsReport, DemGrid), EvalError> {
    let (aligned, offset) = if align { align_vertical(test, truth)? } else { (test.clone(), 0.0) };
    let mut report = compute_metrics(&aligned, truth, mask, trunc)?;
    report.vertical_offset_applied_m = offset;
    let mut grid = truth.empty_like();
    for i in 0..grid.heights.len() {
        let (a, b) = (aligned.heights[i], truth.heights[i]);
        if selected(mask, i) && !aligned.is_nodata(a) && !truth.is_nodata(b) {
            grid.heights[i] = a - b;
        }
    }
    Ok((report, grid))
}
