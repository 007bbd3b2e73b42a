//! Rasters, sampling, pyramids and windowed ZNCC with its derivative.

use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::rfm::PixelCoord;

/// Windows whose intensity standard deviation falls below this are treated
/// as textureless and excluded.
pub const DEGENERATE_SIGMA: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("raster dimensions {0}x{1} do not match {2} values")]
    SizeMismatch(usize, usize, usize),
    #[error("rasters differ in size")]
    ShapeMismatch,
    #[error("window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major grid of intensities with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Raster {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Raster, ImageError> {
        if width * height != values.len() {
            return Err(ImageError::SizeMismatch(width, height, values.len()));
        }
        Ok(Raster { width, height, values, mask: None })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Raster {
        Raster { width, height, values: vec![value; width * height], mask: None }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Raster {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Raster { width, height, values, mask: None }
    }

    /// Attaches a validity mask (`true` = valid).
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Raster, ImageError> {
        if mask.len() != self.values.len() {
            return Err(ImageError::SizeMismatch(self.width, self.height, mask.len()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.is_valid_index(y * self.width + x)
    }

    #[inline]
    pub fn is_valid_index(&self, i: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.as_ref().map_or(self.values.len(), |m| m.iter().filter(|&&v| v).count())
    }

    /// Multiplies every value by `gain` and adds `offset`.
    pub fn affine(&self, gain: f64, offset: f64) -> Raster {
        let mut r = self.clone();
        r.values.iter_mut().for_each(|v| *v = gain * *v + offset);
        r
    }

    /// Bilinear interpolation; `None` if any of the four neighbors is out of
    /// bounds or masked.
    pub fn bilinear(&self, p: PixelCoord) -> Option<f64> {
        let (x0, fx) = split_coord(p.samp, self.width)?;
        let (y0, fy) = split_coord(p.line, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let i00 = self.index(x0, y0);
        let i10 = self.index(x1, y0);
        let i01 = self.index(x0, y1);
        let i11 = self.index(x1, y1);
        if let Some(m) = &self.mask {
            if !(m[i00] && m[i10] && m[i01] && m[i11]) {
                return None;
            }
        }
        let v = &self.values;
        let top = v[i00] + fx * (v[i10] - v[i00]);
        let bottom = v[i01] + fx * (v[i11] - v[i01]);
        Some(top + fy * (bottom - top))
    }

    /// Bilinear value together with the exact derivative of the interpolant
    /// with respect to `(samp, line)`.
    pub fn bilinear_with_gradient(&self, p: PixelCoord) -> Option<(f64, f64, f64)> {
        let (x0, fx) = split_coord(p.samp, self.width)?;
        let (y0, fy) = split_coord(p.line, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let idx = [self.index(x0, y0), self.index(x1, y0), self.index(x0, y1), self.index(x1, y1)];
        if let Some(m) = &self.mask {
            if !idx.iter().all(|&i| m[i]) {
                return None;
            }
        }
        let [v00, v10, v01, v11] = idx.map(|i| self.values[i]);
        let top = v00 + fx * (v10 - v00);
        let bottom = v01 + fx * (v11 - v01);
        let gx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
        Some((top + fy * (bottom - top), gx, bottom - top))
    }
}

/// Integer cell and fraction for a coordinate; the last pixel center is
/// addressable with a zero fraction.
#[inline]
fn split_coord(c: f64, n: usize) -> Option<(usize, f64)> {
    if !(c >= 0.0) || c > (n - 1) as f64 || n == 0 {
        return None;
    }
    let i = (c.floor() as usize).min(n.saturating_sub(2));
    Some((i, c - i as f64))
}

/// Central differences in the interior, one-sided differences at the border.
pub fn image_gradient(r: &Raster) -> (Raster, Raster) {
    let (w, h) = (r.width, r.height);
    let diff = |a: f64, b: f64, span: usize| if span == 0 { 0.0 } else { (b - a) / span as f64 };
    let gx = Raster::from_fn(w, h, |x, y| {
        let lo = x.saturating_sub(1);
        let hi = (x + 1).min(w - 1);
        diff(r.get(lo, y), r.get(hi, y), hi - lo)
    });
    let gy = Raster::from_fn(w, h, |x, y| {
        let lo = y.saturating_sub(1);
        let hi = (y + 1).min(h - 1);
        diff(r.get(x, lo), r.get(x, hi), hi - lo)
    });
    match &r.mask {
        Some(m) => (
            gx.with_mask(m.clone()).expect("same size"),
            gy.with_mask(m.clone()).expect("same size"),
        ),
        None => (gx, gy),
    }
}

/// Repeated 2x2 box-filter halving. Output dimensions are `ceil(dim / 2)`
/// per level; border blocks average their available valid pixels.
pub fn downsample(r: &Raster, levels: u32) -> Raster {
    let mut out = r.clone();
    for _ in 0..levels {
        out = halve(&out);
    }
    out
}

fn halve(r: &Raster) -> Raster {
    let w = r.width.div_ceil(2);
    let h = r.height.div_ceil(2);
    let mut values = vec![0.0; w * h];
    let mut mask = vec![true; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0usize;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < r.width && sy < r.height && r.is_valid(sx, sy) {
                        sum += r.get(sx, sy);
                        n += 1;
                    }
                }
            }
            if n > 0 {
                values[y * w + x] = sum / n as f64;
            } else {
                mask[y * w + x] = false;
            }
        }
    }
    let out = Raster { width: w, height: h, values, mask: None };
    if r.mask.is_some() {
        out.with_mask(mask).expect("same size")
    } else {
        out
    }
}

/// Per-center negative ZNCC and the per-pixel derivative of the summed score
/// with respect to the second image.
#[derive(Debug, Clone)]
pub struct SimilarityField {
    /// `-ZNCC` at each window center; masked where the window is invalid.
    pub score: Raster,
    /// Derivative of the sum of all valid scores with respect to each
    /// reprojected pixel value.
    pub d2m: Raster,
    pub window: usize,
}

impl SimilarityField {
    /// Sum of all valid window scores.
    pub fn total(&self) -> f64 {
        let mut s = 0.0;
        for (i, v) in self.score.values.iter().enumerate() {
            if self.score.is_valid_index(i) {
                s += v;
            }
        }
        s
    }

    pub fn valid_centers(&self) -> usize {
        self.score.valid_count()
    }
}

/// Sum over the `(2r+1)^2` neighborhood, clipped at the borders.
fn box_sum(values: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; w * h];
    rows.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let src = &values[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            *o = src[lo..=hi].iter().sum();
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, o)| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for yy in lo..=hi {
            for (x, v) in o.iter_mut().enumerate() {
                *v += rows[yy * w + x];
            }
        }
    });
    out
}

/// Windowed negative ZNCC between `reference` and `reproj` and its analytic
/// derivative with respect to `reproj`, accumulated over all windows that
/// contain each pixel.
pub fn zncc_field(reference: &Raster, reproj: &Raster, window: usize) -> Result<SimilarityField, ImageError> {
    if reference.width != reproj.width || reference.height != reproj.height {
        return Err(ImageError::ShapeMismatch);
    }
    if window < 3 || window % 2 == 0 {
        return Err(ImageError::BadWindow(window));
    }
    let (w, h) = (reference.width, reference.height);
    let r = window / 2;
    // masked pixels are left out of the window statistics
    let min_count = (window * window).div_ceil(2);

    // A pixel is usable when valid in both inputs.
    let usable: Vec<bool> = (0..w * h)
        .map(|i| reference.is_valid_index(i) && reproj.is_valid_index(i))
        .collect();

    // per-center statistics: (valid, zncc, mean_a, mean_b, u, v)
    #[derive(Clone, Copy, Default)]
    struct Center {
        valid: bool,
        zncc: f64,
        mean_a: f64,
        mean_b: f64,
        u: f64,
        v: f64,
    }
    let mut centers = vec![Center::default(); w * h];
    let a = &reference.values;
    let b = &reproj.values;
    centers.par_chunks_mut(w).enumerate().for_each(|(cy, row)| {
        if cy < r || cy + r >= h {
            return;
        }
        for (cx, c) in row.iter_mut().enumerate() {
            if cx < r || cx + r >= w {
                continue;
            }
            if !usable[cy * w + cx] {
                continue;
            }
            let (mut sa, mut sb, mut count) = (0.0, 0.0, 0usize);
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let i = y * w + x;
                    if usable[i] {
                        sa += a[i];
                        sb += b[i];
                        count += 1;
                    }
                }
            }
            if count < min_count {
                continue;
            }
            let n = count as f64;
            let (ma, mb) = (sa / n, sb / n);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let i = y * w + x;
                    if !usable[i] {
                        continue;
                    }
                    let (da, db) = (a[i] - ma, b[i] - mb);
                    saa += da * da;
                    sbb += db * db;
                    sab += da * db;
                }
            }
            let sig_a = (saa / n).sqrt();
            let sig_b = (sbb / n).sqrt();
            if sig_a < DEGENERATE_SIGMA || sig_b < DEGENERATE_SIGMA {
                continue;
            }
            let zncc = (sab / n) / (sig_a * sig_b);
            *c = Center {
                valid: true,
                zncc,
                mean_a: ma,
                mean_b: mb,
                u: 1.0 / (n * sig_a * sig_b),
                v: zncc / (n * sig_b * sig_b),
            };
        }
    });

    let score_vals: Vec<f64> = centers.iter().map(|c| if c.valid { -c.zncc } else { 0.0 }).collect();
    let score_mask: Vec<bool> = centers.iter().map(|c| c.valid).collect();

    // dM_c/db_k = -(a_k - mean_a_c) u_c + (b_k - mean_b_c) v_c, summed over
    // the centers c whose window contains k.
    let su = box_sum(&centers.iter().map(|c| c.u).collect::<Vec<_>>(), w, h, r);
    let sau = box_sum(&centers.iter().map(|c| c.mean_a * c.u).collect::<Vec<_>>(), w, h, r);
    let sv = box_sum(&centers.iter().map(|c| c.v).collect::<Vec<_>>(), w, h, r);
    let sbv = box_sum(&centers.iter().map(|c| c.mean_b * c.v).collect::<Vec<_>>(), w, h, r);
    let d2m: Vec<f64> = (0..w * h)
        .map(|k| {
            if !usable[k] {
                return 0.0;
            }
            -a[k] * su[k] + sau[k] + b[k] * sv[k] - sbv[k]
        })
        .collect();

    Ok(SimilarityField {
        score: Raster::new(w, h, score_vals)?.with_mask(score_mask)?,
        d2m: Raster::new(w, h, d2m)?,
        window,
    })
}

// ---------------------------------------------------------------------------
// File formats

/// Reads a binary PGM (P5), 8- or 16-bit, normalized to [0, 1] by maxval.
pub fn read_pgm(path: &Path) -> Result<Raster, ImageError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    parse_pgm(&data)
}

pub fn parse_pgm(data: &[u8]) -> Result<Raster, ImageError> {
    let mut pos = 0usize;
    let mut next_token = |data: &[u8]| -> Result<String, ImageError> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if next_token(data)? != "P5" {
        return Err(ImageError::Format("not a binary PGM (P5)".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| ImageError::Format(format!("bad header field {s}")));
    let width = num(next_token(data)?)?;
    let height = num(next_token(data)?)?;
    let maxval = num(next_token(data)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Format(format!("bad maxval {maxval}")));
    }
    let body = &data[pos + 1..];
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    if body.len() < width * height * bytes_per {
        return Err(ImageError::Format("truncated PGM data".into()));
    }
    let scale = 1.0 / maxval as f64;
    let values = (0..width * height)
        .map(|i| {
            let v = if bytes_per == 2 {
                u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
            } else {
                body[i] as f64
            };
            v * scale
        })
        .collect();
    Raster::new(width, height, values)
}

/// Writes a 16-bit binary PGM; values are clamped to [0, 1].
pub fn write_pgm16(r: &Raster, path: &Path) -> Result<(), ImageError> {
    let mut out = Vec::with_capacity(r.len() * 2 + 32);
    write!(out, "P5\n{} {}\n65535\n", r.width, r.height)?;
    for v in &r.values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Flat float raster: little-endian `u32` width and height followed by
/// row-major `f32` values. Masked pixels are stored as NaN.
pub fn write_float_raster(r: &Raster, path: &Path) -> Result<(), ImageError> {
    let mut out = Vec::with_capacity(8 + r.len() * 4);
    out.extend_from_slice(&(r.width as u32).to_le_bytes());
    out.extend_from_slice(&(r.height as u32).to_le_bytes());
    for (i, v) in r.values.iter().enumerate() {
        let f = if r.is_valid_index(i) { *v as f32 } else { f32::NAN };
        out.extend_from_slice(&f.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_float_raster(path: &Path) -> Result<Raster, ImageError> {
    let data = std::fs::read(path)?;
    if data.len() < 8 {
        return Err(ImageError::Format("float raster header truncated".into()));
    }
    let width = u32::from_le_bytes(data[0..4].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes")) as usize;
    if data.len() != 8 + width * height * 4 {
        return Err(ImageError::Format("float raster size mismatch".into()));
    }
    let mut values = Vec::with_capacity(width * height);
    let mut mask = Vec::with_capacity(width * height);
    for c in data[8..].chunks_exact(4) {
        let f = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        mask.push(!f.is_nan());
        values.push(if f.is_nan() { 0.0 } else { f as f64 });
    }
    let r = Raster::new(width, height, values)?;
    if mask.iter().all(|&m| m) {
        Ok(r)
    } else {
        r.with_mask(mask)
    }
}

/// Loads a raster by extension: `.pgm` or the flat float format otherwise.
pub fn read_raster(path: &Path) -> Result<Raster, ImageError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") => read_pgm(path),
        _ => read_float_raster(path),
    }
}
