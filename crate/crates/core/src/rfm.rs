//! Rational function (RPC) sensor model.
//!
//! Geographic coordinates are normalized as `(v - off) / scale`, expanded into
//! the 20-term cubic basis in RPC00B order and mapped to pixels through two
//! ratios of polynomials. A constant bias shift is added in pixel space.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub const NUM_TERMS: usize = 20;

/// Guard on the magnitude of a denominator polynomial value.
pub const DENOMINATOR_GUARD: f64 = 1e-10;

/// Normalized coordinates up to this magnitude are accepted (with a warning
/// above 1.0).
pub const DEFAULT_VALIDITY_EXPANSION: f64 = 1.2;

pub type Coeffs = [f64; NUM_TERMS];

#[derive(Debug, thiserror::Error)]
pub enum RfmError {
    #[error("denominator too close to zero ({0:e})")]
    DenominatorNearZero(f64),
    #[error("point outside model validity box (normalized magnitude {0:.3})")]
    OutsideValidity(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("inverse projection did not converge")]
    InverseDivergence,
    #[error("RPC parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("RPC file is missing key {0}")]
    MissingKey(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, RfmError>;

/// Latitude/longitude in degrees, ellipsoidal height in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, height: f64) -> Self {
        GeoPoint { lat, lon, height }
    }
}

/// Image position: sample (column) and line (row), pixel centers on integers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub samp: f64,
    pub line: f64,
}

impl PixelCoord {
    pub fn new(samp: f64, line: f64) -> Self {
        PixelCoord { samp, line }
    }
}

/// Cubic monomials of normalized `(lat, lon, height)` in RPC00B order.
pub fn poly_basis(p: &Vector3<f64>) -> Coeffs {
    let (b, l, h) = (p.x, p.y, p.z);
    [
        1.0,
        l,
        b,
        h,
        l * b,
        l * h,
        b * h,
        l * l,
        b * b,
        h * h,
        b * l * h,
        l * l * l,
        l * b * b,
        l * h * h,
        l * l * b,
        b * b * b,
        b * h * h,
        l * l * h,
        b * b * h,
        h * h * h,
    ]
}

/// Partial derivatives of [`poly_basis`] with respect to `(lat, lon, height)`
/// in normalized units, one row per term.
pub fn basis_jacobian(p: &Vector3<f64>) -> [[f64; 3]; NUM_TERMS] {
    let (b, l, h) = (p.x, p.y, p.z);
    [
        [0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [l, b, 0.0],
        [0.0, h, l],
        [h, 0.0, b],
        [0.0, 2.0 * l, 0.0],
        [2.0 * b, 0.0, 0.0],
        [0.0, 0.0, 2.0 * h],
        [l * h, b * h, b * l],
        [0.0, 3.0 * l * l, 0.0],
        [2.0 * l * b, b * b, 0.0],
        [0.0, h * h, 2.0 * l * h],
        [l * l, 2.0 * l * b, 0.0],
        [3.0 * b * b, 0.0, 0.0],
        [h * h, 0.0, 2.0 * b * h],
        [0.0, 2.0 * l * h, l * l],
        [2.0 * b * h, 0.0, b * b],
        [0.0, 0.0, 3.0 * h * h],
    ]
}

fn dot(c: &Coeffs, p: &Coeffs) -> f64 {
    c.iter().zip(p.iter()).map(|(a, b)| a * b).sum()
}

fn dot_jac(c: &Coeffs, jac: &[[f64; 3]; NUM_TERMS]) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for (ci, row) in c.iter().zip(jac.iter()) {
        out.x += ci * row[0];
        out.y += ci * row[1];
        out.z += ci * row[2];
    }
    out
}

static WARNED_EXTRAPOLATION: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfmModel {
    pub samp_num: Coeffs,
    pub samp_den: Coeffs,
    pub line_num: Coeffs,
    pub line_den: Coeffs,
    pub lat_scale: f64,
    pub lat_off: f64,
    pub lon_scale: f64,
    pub lon_off: f64,
    pub height_scale: f64,
    pub height_off: f64,
    pub samp_scale: f64,
    pub samp_off: f64,
    pub line_scale: f64,
    pub line_off: f64,
    /// Bias correction added to the sample coordinate.
    pub shift_samp: f64,
    /// Bias correction added to the line coordinate.
    pub shift_line: f64,
    /// Largest accepted normalized coordinate magnitude.
    #[serde(default = "default_expansion")]
    pub validity_expansion: f64,
}

fn default_expansion() -> f64 {
    DEFAULT_VALIDITY_EXPANSION
}

impl RfmModel {
    /// Checks scale positivity and that both denominators stay away from zero
    /// on a 9x9x9 lattice over the normalized validity box.
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("lat_scale", self.lat_scale),
            ("lon_scale", self.lon_scale),
            ("height_scale", self.height_scale),
            ("samp_scale", self.samp_scale),
            ("line_scale", self.line_scale),
        ];
        for (name, s) in scales {
            if !(s > 0.0 && s.is_finite()) {
                return Err(RfmError::InvalidModel(format!("{name} must be positive, got {s}")));
            }
        }
        let all = self
            .samp_num
            .iter()
            .chain(&self.samp_den)
            .chain(&self.line_num)
            .chain(&self.line_den);
        if all.clone().any(|c| !c.is_finite()) {
            return Err(RfmError::InvalidModel("non-finite coefficient".into()));
        }
        const N: usize = 9;
        for i in 0..N {
            for j in 0..N {
                for k in 0..N {
                    let t = |n: usize| -1.0 + 2.0 * n as f64 / (N - 1) as f64;
                    let p = poly_basis(&Vector3::new(t(i), t(j), t(k)));
                    for den in [&self.samp_den, &self.line_den] {
                        let d = dot(den, &p);
                        if d.abs() < DENOMINATOR_GUARD {
                            return Err(RfmError::InvalidModel(format!(
                                "denominator vanishes inside the validity box ({d:e})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn normalize(&self, pt: &GeoPoint) -> Vector3<f64> {
        Vector3::new(
            (pt.lat - self.lat_off) / self.lat_scale,
            (pt.lon - self.lon_off) / self.lon_scale,
            (pt.height - self.height_off) / self.height_scale,
        )
    }

    pub fn denormalize(&self, p: &Vector3<f64>) -> GeoPoint {
        GeoPoint::new(
            p.x * self.lat_scale + self.lat_off,
            p.y * self.lon_scale + self.lon_off,
            p.z * self.height_scale + self.height_off,
        )
    }

    fn check_validity(&self, p: &Vector3<f64>) -> Result<()> {
        let m = p.amax();
        if !m.is_finite() || m > self.validity_expansion {
            return Err(RfmError::OutsideValidity(m));
        }
        if m > 1.0 && !WARNED_EXTRAPOLATION.swap(true, Ordering::Relaxed) {
            log::warn!("projecting outside the nominal RPC validity box (normalized {m:.3})");
        }
        Ok(())
    }

    /// Ratios `N/D` for sample and line at a normalized point, plus the basis.
    fn ratios(&self, p: &Vector3<f64>) -> Result<(f64, f64)> {
        let basis = poly_basis(p);
        let ds = dot(&self.samp_den, &basis);
        let dl = dot(&self.line_den, &basis);
        if ds.abs() < DENOMINATOR_GUARD {
            return Err(RfmError::DenominatorNearZero(ds));
        }
        if dl.abs() < DENOMINATOR_GUARD {
            return Err(RfmError::DenominatorNearZero(dl));
        }
        Ok((dot(&self.samp_num, &basis) / ds, dot(&self.line_num, &basis) / dl))
    }

    fn to_pixel(&self, rs: f64, rl: f64) -> PixelCoord {
        PixelCoord::new(
            self.samp_scale * rs + self.samp_off + self.shift_samp,
            self.line_scale * rl + self.line_off + self.shift_line,
        )
    }

    /// Object-to-image projection including the bias shift.
    pub fn project(&self, pt: &GeoPoint) -> Result<PixelCoord> {
        let p = self.normalize(pt);
        self.check_validity(&p)?;
        let (rs, rl) = self.ratios(&p)?;
        Ok(self.to_pixel(rs, rl))
    }

    /// Projection without the validity-box check (used inside iterative
    /// solvers whose intermediate iterates may wander).
    pub fn project_unchecked(&self, pt: &GeoPoint) -> Result<PixelCoord> {
        let (rs, rl) = self.ratios(&self.normalize(pt))?;
        Ok(self.to_pixel(rs, rl))
    }

    /// Analytic 2x3 Jacobian of [`project`](Self::project) with respect to
    /// `(lat, lon, height)` in px/deg, px/deg and px/m.
    pub fn projection_jacobian(&self, pt: &GeoPoint) -> Result<Matrix2x3<f64>> {
        let p = self.normalize(pt);
        self.check_validity(&p)?;
        self.jacobian_normalized(&p)
    }

    fn jacobian_normalized(&self, p: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        let basis = poly_basis(p);
        let jac = basis_jacobian(p);
        let chain = Vector3::new(1.0 / self.lat_scale, 1.0 / self.lon_scale, 1.0 / self.height_scale);
        let row = |num: &Coeffs, den: &Coeffs, scale: f64| -> Result<Vector3<f64>> {
            let n = dot(num, &basis);
            let d = dot(den, &basis);
            if d.abs() < DENOMINATOR_GUARD {
                return Err(RfmError::DenominatorNearZero(d));
            }
            let dn = dot_jac(num, &jac);
            let dd = dot_jac(den, &jac);
            Ok((dn * d - dd * n).component_mul(&chain) * (scale / (d * d)))
        };
        let rs = row(&self.samp_num, &self.samp_den, self.samp_scale)?;
        let rl = row(&self.line_num, &self.line_den, self.line_scale)?;
        Ok(Matrix2x3::from_rows(&[rs.transpose(), rl.transpose()]))
    }

    /// Solves `project(lat, lon, height) = pixel` for lat/lon at a fixed
    /// height by Newton iteration on the planimetric 2x2 sub-Jacobian.
    pub fn inverse_at_height(
        &self,
        pixel: &PixelCoord,
        height: f64,
        initial: Option<(f64, f64)>,
    ) -> Result<GeoPoint> {
        const MAX_ITER: usize = 20;
        const TOL_PX: f64 = 1e-4;
        let (lat0, lon0) = initial.unwrap_or((self.lat_off, self.lon_off));
        let mut pt = GeoPoint::new(lat0, lon0, height);
        for _ in 0..MAX_ITER {
            let p = self.normalize(&pt);
            if !(p.amax() < 10.0) {
                return Err(RfmError::InverseDivergence);
            }
            let (rs, rl) = self.ratios(&p)?;
            let px = self.to_pixel(rs, rl);
            let r = Vector2::new(px.samp - pixel.samp, px.line - pixel.line);
            if r.norm() < TOL_PX {
                self.check_validity(&p)?;
                return Ok(pt);
            }
            let j = self.jacobian_normalized(&p)?;
            let sub = Matrix2::new(j[(0, 0)], j[(0, 1)], j[(1, 0)], j[(1, 1)]);
            let step = sub.try_inverse().ok_or(RfmError::InverseDivergence)? * r;
            pt.lat -= step.x;
            pt.lon -= step.y;
        }
        // final convergence check after the last update
        let p = self.normalize(&pt);
        let (rs, rl) = self.ratios(&p)?;
        let px = self.to_pixel(rs, rl);
        if (px.samp - pixel.samp).hypot(px.line - pixel.line) < TOL_PX {
            self.check_validity(&p)?;
            Ok(pt)
        } else {
            Err(RfmError::InverseDivergence)
        }
    }

    /// Model for an image downsampled `levels` times by 2x2 box averaging.
    /// Pixel centers map as `x_l = (x + 0.5) / 2^l - 0.5`.
    pub fn downscaled(&self, levels: u32) -> RfmModel {
        let f = (1u64 << levels) as f64;
        let mut m = self.clone();
        m.samp_scale = self.samp_scale / f;
        m.line_scale = self.line_scale / f;
        m.samp_off = (self.samp_off + 0.5) / f - 0.5;
        m.line_off = (self.line_off + 0.5) / f - 0.5;
        m.shift_samp = self.shift_samp / f;
        m.shift_line = self.shift_line / f;
        m
    }

    /// Reads an IKONOS / RPC00B style key-value text file.
    pub fn read_rpc_text(path: &Path) -> Result<RfmModel> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_rpc_text(&text)
    }

    pub fn parse_rpc_text(text: &str) -> Result<RfmModel> {
        let mut kv: HashMap<String, f64> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, rest)) = line.split_once(':') else {
                return Err(RfmError::Parse { line: idx + 1, msg: "expected KEY: value".into() });
            };
            let token = rest.split_whitespace().next().unwrap_or("");
            let value: f64 = token.parse().map_err(|_| RfmError::Parse {
                line: idx + 1,
                msg: format!("cannot parse number {token:?}"),
            })?;
            kv.insert(key.trim().to_ascii_uppercase(), value);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| RfmError::MissingKey(k.to_string()));
        let coeffs = |prefix: &str| -> Result<Coeffs> {
            let mut c = [0.0; NUM_TERMS];
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = get(&format!("{prefix}_{}", i + 1))?;
            }
            Ok(c)
        };
        let model = RfmModel {
            samp_num: coeffs("SAMP_NUM_COEFF")?,
            samp_den: coeffs("SAMP_DEN_COEFF")?,
            line_num: coeffs("LINE_NUM_COEFF")?,
            line_den: coeffs("LINE_DEN_COEFF")?,
            lat_scale: get("LAT_SCALE")?,
            lat_off: get("LAT_OFF")?,
            lon_scale: get("LONG_SCALE")?,
            lon_off: get("LONG_OFF")?,
            height_scale: get("HEIGHT_SCALE")?,
            height_off: get("HEIGHT_OFF")?,
            samp_scale: get("SAMP_SCALE")?,
            samp_off: get("SAMP_OFF")?,
            line_scale: get("LINE_SCALE")?,
            line_off: get("LINE_OFF")?,
            shift_samp: 0.0,
            shift_line: 0.0,
            validity_expansion: DEFAULT_VALIDITY_EXPANSION,
        };
        model.validate()?;
        Ok(model)
    }

    /// Serializes in the same key-value layout accepted by
    /// [`parse_rpc_text`](Self::parse_rpc_text). The bias shift is not part
    /// of the format.
    pub fn to_rpc_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: f64, unit: &str| {
            let _ = writeln!(s, "{k}: {v:+.17e}{unit}");
        };
        put("LINE_OFF", self.line_off, " pixels");
        put("SAMP_OFF", self.samp_off, " pixels");
        put("LAT_OFF", self.lat_off, " degrees");
        put("LONG_OFF", self.lon_off, " degrees");
        put("HEIGHT_OFF", self.height_off, " meters");
        put("LINE_SCALE", self.line_scale, " pixels");
        put("SAMP_SCALE", self.samp_scale, " pixels");
        put("LAT_SCALE", self.lat_scale, " degrees");
        put("LONG_SCALE", self.lon_scale, " degrees");
        put("HEIGHT_SCALE", self.height_scale, " meters");
        for (name, c) in [
            ("LINE_NUM_COEFF", &self.line_num),
            ("LINE_DEN_COEFF", &self.line_den),
            ("SAMP_NUM_COEFF", &self.samp_num),
            ("SAMP_DEN_COEFF", &self.samp_den),
        ] {
            for (i, v) in c.iter().enumerate() {
                put(&format!("{name}_{}", i + 1), *v, "");
            }
        }
        s
    }

    pub fn write_rpc_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_rpc_text())?;
        Ok(())
    }
}

/// Bias shift supplied alongside an RPC file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasShift {
    #[serde(default)]
    pub shift_samp: f64,
    #[serde(default)]
    pub shift_line: f64,
}

impl BiasShift {
    pub fn apply(&self, model: &mut RfmModel) {
        model.shift_samp = self.shift_samp;
        model.shift_line = self.shift_line;
    }
}


#[cfg(test)]
mod tests {
    use super::test_models::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Independent evaluation: each monomial from its exponent triple.
    fn monomial_sum(c: &Coeffs, p: &Vector3<f64>) -> f64 {
        // exponents of (B, L, H) in RPC00B order
        const EXP: [[i32; 3]; 20] = [
            [0, 0, 0], [0, 1, 0], [1, 0, 0], [0, 0, 1], [1, 1, 0],
            [0, 1, 1], [1, 0, 1], [0, 2, 0], [2, 0, 0], [0, 0, 2],
            [1, 1, 1], [0, 3, 0], [2, 1, 0], [0, 1, 2], [1, 2, 0],
            [3, 0, 0], [1, 0, 2], [0, 2, 1], [2, 0, 1], [0, 0, 3],
        ];
        EXP.iter()
            .zip(c.iter())
            .map(|(e, ci)| ci * p.x.powi(e[0]) * p.y.powi(e[1]) * p.z.powi(e[2]))
            .sum()
    }

    #[test]
    fn basis_at_origin_and_ones() {
        let b = poly_basis(&Vector3::zeros());
        assert_eq!(b[0], 1.0);
        assert!(b[1..].iter().all(|&v| v == 0.0));
        let b = poly_basis(&Vector3::new(1.0, 1.0, 1.0));
        assert!(b.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn basis_blh_term() {
        let p = Vector3::new(0.5, 0.25, -0.5);
        let b = poly_basis(&p);
        assert_eq!(b[10], -0.0625);
        for k in 0..NUM_TERMS {
            let mut e = [0.0; NUM_TERMS];
            e[k] = 1.0;
            assert_eq!(b[k], monomial_sum(&e, &p), "term {k}");
        }
    }

    #[test]
    fn basis_jacobian_matches_differences() {
        let p = Vector3::new(0.3, -0.7, 0.45);
        let j = basis_jacobian(&p);
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = Vector3::zeros();
            dp[axis] = h;
            let a = poly_basis(&(p + dp));
            let b = poly_basis(&(p - dp));
            for k in 0..NUM_TERMS {
                let fd = (a[k] - b[k]) / (2.0 * h);
                assert!((fd - j[k][axis]).abs() < 1e-8, "term {k} axis {axis}");
            }
        }
    }

    #[test]
    fn selector_projection_and_shift() {
        let mut m = selector();
        let pt = GeoPoint::new(0.0, 0.5, 0.0);
        assert_eq!(m.project(&pt).unwrap().samp, 0.5);
        m.shift_samp = 2.0;
        assert_eq!(m.project(&pt).unwrap().samp, 2.5);
        let j = m.projection_jacobian(&pt).unwrap();
        assert_eq!([j[(0, 0)], j[(0, 1)], j[(0, 2)]], [0.0, 1.0 / m.lon_scale, 0.0]);
    }

    #[test]
    fn constant_ratio_has_zero_jacobian_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = random_cubic(&mut rng);
        m.samp_num = m.samp_den;
        let pt = random_point(&mut rng, &m);
        let j = m.projection_jacobian(&pt).unwrap();
        for c in 0..3 {
            assert!(j[(0, c)].abs() < 1e-9);
        }
        let x = m.project(&pt).unwrap().samp;
        assert!((x - (m.samp_scale + m.samp_off)).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = random_cubic(&mut rng);
            let pt = random_point(&mut rng, &m);
            let px = m.project(&pt).unwrap();
            let p = m.normalize(&pt);
            let xs = m.samp_scale * monomial_sum(&m.samp_num, &p) / monomial_sum(&m.samp_den, &p)
                + m.samp_off;
            let xl = m.line_scale * monomial_sum(&m.line_num, &p) / monomial_sum(&m.line_den, &p)
                + m.line_off;
            assert!(rel(px.samp, xs) < 1e-13, "{} vs {}", px.samp, xs);
            assert!(rel(px.line, xl) < 1e-13);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let m = random_cubic(&mut rng);
            let pt = random_point(&mut rng, &m);
            let j = m.projection_jacobian(&pt).unwrap();
            let h = 1e-7;
            let steps = [h * m.lat_scale, h * m.lon_scale, h * m.height_scale];
            for (c, step) in steps.iter().enumerate() {
                let mut a = pt;
                let mut b = pt;
                match c {
                    0 => { a.lat += step; b.lat -= step; }
                    1 => { a.lon += step; b.lon -= step; }
                    _ => { a.height += step; b.height -= step; }
                }
                let actual = match c {
                    0 => a.lat - b.lat,
                    1 => a.lon - b.lon,
                    _ => a.height - b.height,
                };
                let pa = m.project_unchecked(&a).unwrap();
                let pb = m.project_unchecked(&b).unwrap();
                let fd = [(pa.samp - pb.samp) / actual, (pa.line - pb.line) / actual];
                for r in 0..2 {
                    let scale = j.row(r).amax();
                    assert!((fd[r] - j[(r, c)]).abs() / scale < 1e-6, "row {r} col {c}");
                }
            }
        }
    }

    #[test]
    fn validity_box_enforced() {
        let m = selector();
        assert!(m.project(&GeoPoint::new(0.0, 1.1, 0.0)).is_ok());
        assert!(matches!(
            m.project(&GeoPoint::new(0.0, 1.3, 0.0)),
            Err(RfmError::OutsideValidity(_))
        ));
    }

    #[test]
    fn vanishing_denominator_rejected() {
        let mut m = selector();
        m.samp_den = [0.0; NUM_TERMS];
        m.samp_den[1] = 1.0;
        assert!(m.validate().is_err());
        assert!(matches!(
            m.project(&GeoPoint::new(0.0, 0.0, 0.0)),
            Err(RfmError::DenominatorNearZero(_))
        ));
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let mut m = selector();
        m.height_scale = 0.0;
        assert!(matches!(m.validate(), Err(RfmError::InvalidModel(_))));
    }

    #[test]
    fn rpc_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_cubic(&mut rng);
        let back = RfmModel::parse_rpc_text(&m.to_rpc_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn rpc_text_missing_key() {
        let m = selector();
        let text: String = m
            .to_rpc_text()
            .lines()
            .filter(|l| !l.starts_with("LAT_SCALE"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(RfmModel::parse_rpc_text(&text), Err(RfmError::MissingKey(k)) if k == "LAT_SCALE"));
    }

    #[test]
    fn inverse_recovers_geographic_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let m = random_cubic(&mut rng);
            let pt = m.denormalize(&Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            ));
            let px = m.project(&pt).unwrap();
            let inv = m.inverse_at_height(&px, pt.height, None).unwrap();
            let back = m.project(&inv).unwrap();
            assert!((back.samp - px.samp).hypot(back.line - px.line) < 1e-4);
        }
    }

    #[test]
    fn downscaled_model_maps_pixel_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = random_cubic(&mut rng);
        m.shift_samp = 1.5;
        m.shift_line = -0.25;
        let pt = random_point(&mut rng, &m);
        let full = m.project(&pt).unwrap();
        for l in 0..4 {
            let d = m.downscaled(l).project(&pt).unwrap();
            let f = (1u32 << l) as f64;
            assert!((d.samp - ((full.samp + 0.5) / f - 0.5)).abs() < 1e-9);
            assert!((d.line - ((full.line + 0.5) / f - 0.5)).abs() < 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn shift_is_additive(seed in 0u64..10_000, s in -50.0f64..50.0, t in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_cubic(&mut rng);
            let pt = random_point(&mut rng, &m);
            let mut shifted = m.clone();
            shifted.shift_samp = s;
            shifted.shift_line = t;
            let a = m.project(&pt).unwrap();
            let b = shifted.project(&pt).unwrap();
            proptest::prop_assert!(((b.samp - a.samp) - s).abs() < 1e-9);
            proptest::prop_assert!(((b.line - a.line) - t).abs() < 1e-9);
        }
    }
}
