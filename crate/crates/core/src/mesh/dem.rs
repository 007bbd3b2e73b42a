//! Gridded elevation models and the ESRI ASCII grid format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MeshError;

pub const DEFAULT_NODATA: f64 = -9999.0;

/// North-up elevation raster in local frame meters. Cell `(row, col)` has its
/// center at `(origin_x + col * cell_size, origin_y - row * cell_size)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub heights: Vec<f64>,
    pub nodata: f64,
}

impl DemGrid {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        ncols: usize,
        nrows: usize,
        heights: Vec<f64>,
    ) -> Result<DemGrid, MeshError> {
        if !(cell_size > 0.0) {
            return Err(MeshError::InvalidDem(format!("cell size must be positive, got {cell_size}")));
        }
        if heights.len() != ncols * nrows {
            return Err(MeshError::InvalidDem(format!(
                "{} heights for a {ncols}x{nrows} grid",
                heights.len()
            )));
        }
        Ok(DemGrid { origin_x, origin_y, cell_size, ncols, nrows, heights, nodata: DEFAULT_NODATA })
    }

    /// Grid with the same geometry, every cell set to nodata.
    pub fn empty_like(&self) -> DemGrid {
        DemGrid { heights: vec![self.nodata; self.heights.len()], ..self.clone() }
    }

    pub fn from_fn(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        ncols: usize,
        nrows: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> DemGrid {
        let mut heights = Vec::with_capacity(ncols * nrows);
        for r in 0..nrows {
            for c in 0..ncols {
                heights.push(f(origin_x + c as f64 * cell_size, origin_y - r as f64 * cell_size));
            }
        }
        DemGrid { origin_x, origin_y, cell_size, ncols, nrows, heights, nodata: DEFAULT_NODATA }
    }

    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (self.origin_x + col as f64 * self.cell_size, self.origin_y - row as f64 * self.cell_size)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.heights[row * self.ncols + col];
        if self.is_nodata(v) {
            None
        } else {
            Some(v)
        }
    }

    #[inline]
    pub fn is_nodata(&self, v: f64) -> bool {
        !v.is_finite() || v == self.nodata
    }

    pub fn set(&mut self, row: usize, col: usize, v: Option<f64>) {
        self.heights[row * self.ncols + col] = v.unwrap_or(self.nodata);
    }

    pub fn valid_count(&self) -> usize {
        self.heights.iter().filter(|&&v| !self.is_nodata(v)).count()
    }

    /// Same origin, cell size and dimensions.
    pub fn same_grid(&self, other: &DemGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && (self.origin_x - other.origin_x).abs() < 1e-9 * self.cell_size
            && (self.origin_y - other.origin_y).abs() < 1e-9 * self.cell_size
            && (self.cell_size - other.cell_size).abs() < 1e-12 * self.cell_size
    }

    pub fn mean_height(&self) -> Option<f64> {
        let (sum, n) = self
            .heights
            .iter()
            .filter(|&&v| !self.is_nodata(v))
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn to_esri_ascii(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ncols {}", self.ncols);
        let _ = writeln!(s, "nrows {}", self.nrows);
        let _ = writeln!(s, "xllcorner {}", self.origin_x - 0.5 * self.cell_size);
        let _ = writeln!(
            s,
            "yllcorner {}",
            self.origin_y - (self.nrows as f64 - 0.5) * self.cell_size
        );
        let _ = writeln!(s, "cellsize {}", self.cell_size);
        let _ = writeln!(s, "NODATA_value {}", self.nodata);
        for r in 0..self.nrows {
            let row = &self.heights[r * self.ncols..(r + 1) * self.ncols];
            let line: Vec<String> = row
                .iter()
                .map(|&v| if self.is_nodata(v) { format!("{}", self.nodata) } else { format!("{v}") })
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn parse_esri_ascii(text: &str) -> Result<DemGrid, MeshError> {
        let mut tokens = text.split_whitespace().peekable();
        let mut header = std::collections::HashMap::new();
        while let Some(&t) = tokens.peek() {
            if t.parse::<f64>().is_ok() {
                break;
            }
            let key = tokens.next().expect("peeked").to_ascii_lowercase();
            let value = tokens
                .next()
                .ok_or_else(|| MeshError::Format(format!("missing value for {key}")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| MeshError::Format(format!("bad header value {value:?} for {key}")))?;
            header.insert(key, value);
        }
        let need = |k: &str| {
            header.get(k).copied().ok_or_else(|| MeshError::Format(format!("missing header {k}")))
        };
        let ncols = need("ncols")? as usize;
        let nrows = need("nrows")? as usize;
        let cell = need("cellsize")?;
        let nodata = header.get("nodata_value").copied().unwrap_or(DEFAULT_NODATA);
        let origin_x = match header.get("xllcenter") {
            Some(&x) => x,
            None => need("xllcorner")? + 0.5 * cell,
        };
        let yll_center = match header.get("yllcenter") {
            Some(&y) => y,
            None => need("yllcorner")? + 0.5 * cell,
        };
        let origin_y = yll_center + (nrows as f64 - 1.0) * cell;
        let heights: Vec<f64> = tokens
            .map(|t| t.parse::<f64>().map_err(|_| MeshError::Format(format!("bad height {t:?}"))))
            .collect::<Result<_, _>>()?;
        let mut dem = DemGrid::new(origin_x, origin_y, cell, ncols, nrows, heights)?;
        dem.nodata = nodata;
        Ok(dem)
    }

    pub fn read_esri_ascii(path: &Path) -> Result<DemGrid, MeshError> {
        Self::parse_esri_ascii(&std::fs::read_to_string(path)?)
    }

    pub fn write_esri_ascii(&self, path: &Path) -> Result<(), MeshError> {
        std::fs::write(path, self.to_esri_ascii())?;
        Ok(())
    }
}
