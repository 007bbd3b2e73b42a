//! Synthetic sensor geometries and least-squares RFM fitting.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::geoframe::{LocalFrame, LocalPoint};
use crate::rfm::{poly_basis, Coeffs, PixelCoord, RfmModel, DEFAULT_VALIDITY_EXPANSION, NUM_TERMS};

use super::SynthError;

/// Largest fit residual accepted for a fitted model, px.
pub const MAX_FIT_RESIDUAL: f64 = 0.01;

/// Distance of the pushbroom proxy's sensor line above the reference plane.
pub const PUSHBROOM_ALTITUDE: f64 = 600_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Affine,
    CubicPerspectiveFit,
}

/// Viewing geometry of one synthetic image. The image is north-up: sample
/// grows east, line grows south, and ground point `(0, 0, z_ref)` maps to the
/// image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub off_nadir_deg: f64,
    /// Direction from the scene toward the sensor, clockwise from north.
    pub azimuth_deg: f64,
    pub gsd: f64,
    pub width: usize,
    pub height: usize,
    pub z_ref: f64,
}

impl ViewGeometry {
    /// Horizontal unit vector pointing toward the sensor.
    fn toward(&self) -> Vector3<f64> {
        let az = self.azimuth_deg.to_radians();
        Vector3::new(az.sin(), az.cos(), 0.0)
    }

    fn ground_to_pixel(&self, gx: f64, gy: f64) -> PixelCoord {
        PixelCoord::new(
            gx / self.gsd + 0.5 * self.width as f64 - 0.5,
            -gy / self.gsd + 0.5 * self.height as f64 - 0.5,
        )
    }

    /// Unit direction of travel for light reaching an affine sensor.
    pub fn affine_direction(&self) -> Vector3<f64> {
        let th = self.off_nadir_deg.to_radians();
        -(self.toward() * th.sin() + Vector3::z() * th.cos())
    }

    /// Parallel projection along the viewing direction onto `z = z_ref`.
    pub fn affine_pixel(&self, p: &LocalPoint) -> PixelCoord {
        let d = self.affine_direction();
        let s = (p.z - self.z_ref) / d.z;
        self.ground_to_pixel(p.x - s * d.x, p.y - s * d.y)
    }

    /// Pushbroom proxy: orthographic along the flight line, perspective across
    /// it from a sensor line at `PUSHBROOM_ALTITUDE` above `z_ref`.
    pub fn pushbroom_pixel(&self, p: &LocalPoint) -> PixelCoord {
        let (c, a) = self.track_axes();
        let th = self.off_nadir_deg.to_radians();
        let hs = PUSHBROOM_ALTITUDE;
        let u = p.dot(&c);
        let r = p.dot(&a);
        let psi = (hs * th.tan() - u).atan2(hs - (p.z - self.z_ref));
        // scaled so that q has ground meters at the scene center
        let q = hs / th.cos().powi(2) * (th - psi).tan();
        let g = q * c + r * a;
        self.ground_to_pixel(g.x, g.y)
    }

    /// Sensor position seen by a pushbroom proxy pixel containing `p`.
    pub fn pushbroom_sensor(&self, p: &LocalPoint) -> LocalPoint {
        let (c, a) = self.track_axes();
        let th = self.off_nadir_deg.to_radians();
        let hs = PUSHBROOM_ALTITUDE;
        p.dot(&a) * a + hs * th.tan() * c + (self.z_ref + hs) * Vector3::z()
    }

    /// (across-track toward the sensor, along-track) horizontal axes.
    fn track_axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let c = self.toward();
        (c, Vector3::new(c.y, -c.x, 0.0))
    }

    pub fn pixel(&self, kind: ModelKind, p: &LocalPoint) -> PixelCoord {
        match kind {
            ModelKind::Affine => self.affine_pixel(p),
            ModelKind::CubicPerspectiveFit => self.pushbroom_pixel(p),
        }
    }
}

/// Local-frame box that a fitted model must cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelBox {
    pub x_half: f64,
    pub y_half: f64,
    pub z_lo: f64,
    pub z_hi: f64,
}

/// Model with normalization set up for `bx` and all coefficients zero.
fn template(frame: &LocalFrame, bx: &ModelBox, width: usize, height: usize) -> RfmModel {
    let z_mid = 0.5 * (bx.z_lo + bx.z_hi);
    let center = frame.from_local(&Vector3::new(0.0, 0.0, z_mid));
    let mut den = [0.0; NUM_TERMS];
    den[0] = 1.0;
    RfmModel {
        samp_num: [0.0; NUM_TERMS],
        samp_den: den,
        line_num: [0.0; NUM_TERMS],
        line_den: den,
        lat_scale: bx.y_half / frame.inv_db,
        lat_off: center.lat,
        lon_scale: bx.x_half / frame.inv_dl,
        lon_off: center.lon,
        height_scale: 0.5 * (bx.z_hi - bx.z_lo),
        height_off: center.height,
        samp_scale: 0.5 * width as f64,
        samp_off: 0.5 * width as f64 - 0.5,
        line_scale: 0.5 * height as f64,
        line_off: 0.5 * height as f64 - 0.5,
        shift_samp: 0.0,
        shift_line: 0.0,
        validity_expansion: DEFAULT_VALIDITY_EXPANSION,
    }
}

fn lattice(n: usize, shift: f64) -> impl Iterator<Item = f64> + Clone {
    (0..n).map(move |i| -1.0 + (2.0 * i as f64 + 1.0 + shift) / n as f64)
}

/// Samples of the projection on a normalized lattice over the box: normalized
/// geographic coordinates and normalized pixel values.
fn samples(
    model: &RfmModel,
    frame: &LocalFrame,
    project: &dyn Fn(&LocalPoint) -> PixelCoord,
    n: usize,
    shift: f64,
) -> Vec<(Vector3<f64>, f64, f64)> {
    let mut out = Vec::new();
    for b in lattice(n, shift) {
        for l in lattice(n, shift) {
            for h in lattice(n.div_ceil(2), shift) {
                let p = Vector3::new(b, l, h);
                let local = frame.to_local(&model.denormalize(&p));
                let px = project(&local);
                out.push((
                    p,
                    (px.samp - model.samp_off) / model.samp_scale,
                    (px.line - model.line_off) / model.line_scale,
                ));
            }
        }
    }
    out
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    let svd = a.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    svd.solve(&b, tol).expect("SVD computed with both factors")
}

/// Fits numerators over `terms` basis terms with unit denominators.
fn fit_unit_denominator(data: &[(Vector3<f64>, f64, f64)], terms: usize) -> (Coeffs, Coeffs) {
    let mut a = DMatrix::zeros(data.len(), terms);
    let mut bs = DVector::zeros(data.len());
    let mut bl = DVector::zeros(data.len());
    for (row, (p, s, l)) in data.iter().enumerate() {
        let basis = poly_basis(p);
        for k in 0..terms {
            a[(row, k)] = basis[k];
        }
        bs[row] = *s;
        bl[row] = *l;
    }
    let xs = solve(a.clone(), bs);
    let xl = solve(a, bl);
    let mut cs = [0.0; NUM_TERMS];
    let mut cl = [0.0; NUM_TERMS];
    cs[..terms].copy_from_slice(xs.as_slice());
    cl[..terms].copy_from_slice(xl.as_slice());
    (cs, cl)
}

/// Iteratively reweighted fit of numerator and denominator for one row.
fn fit_rational(data: &[(Vector3<f64>, f64)], start: &Coeffs) -> (Coeffs, Coeffs) {
    let mut num = *start;
    let mut den = [0.0; NUM_TERMS];
    den[0] = 1.0;
    for _ in 0..5 {
        let mut a = DMatrix::zeros(data.len(), 2 * NUM_TERMS - 1);
        let mut b = DVector::zeros(data.len());
        for (row, (p, r)) in data.iter().enumerate() {
            let basis = poly_basis(p);
            let w = 1.0 / dot(&den, &basis);
            for k in 0..NUM_TERMS {
                a[(row, k)] = w * basis[k];
            }
            for k in 1..NUM_TERMS {
                a[(row, NUM_TERMS + k - 1)] = -w * r * basis[k];
            }
            b[row] = w * r;
        }
        let x = solve(a, b);
        num.copy_from_slice(&x.as_slice()[..NUM_TERMS]);
        den[1..].copy_from_slice(&x.as_slice()[NUM_TERMS..]);
    }
    (num, den)
}

fn dot(a: &Coeffs, b: &Coeffs) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest pixel distance between the model and `project` on a lattice offset
/// from the fitting lattice.
pub fn fit_residual(model: &RfmModel, frame: &LocalFrame, project: &dyn Fn(&LocalPoint) -> PixelCoord) -> f64 {
    let mut worst: f64 = 0.0;
    for (p, _, _) in samples(model, frame, project, 8, 0.5) {
        let g = model.denormalize(&p);
        let want = project(&frame.to_local(&g));
        let Ok(got) = model.project_unchecked(&g) else {
            return f64::INFINITY;
        };
        worst = worst.max((got.samp - want.samp).hypot(got.line - want.line));
    }
    worst
}

/// Fits an RFM to `project` over `bx`: linear least squares on `terms` basis
/// terms with unit denominators, followed by a rational refit when the residual
/// exceeds [`MAX_FIT_RESIDUAL`].
pub fn fit_rfm(
    frame: &LocalFrame,
    bx: &ModelBox,
    width: usize,
    height: usize,
    terms: usize,
    project: &dyn Fn(&LocalPoint) -> PixelCoord,
) -> Result<(RfmModel, f64), SynthError> {
    let mut model = template(frame, bx, width, height);
    let data = samples(&model, frame, project, 11, 0.0);
    let (cs, cl) = fit_unit_denominator(&data, terms);
    model.samp_num = cs;
    model.line_num = cl;
    let mut residual = fit_residual(&model, frame, project);
    if residual > MAX_FIT_RESIDUAL && terms == NUM_TERMS {
        let rows_s: Vec<_> = data.iter().map(|(p, s, _)| (*p, *s)).collect();
        let rows_l: Vec<_> = data.iter().map(|(p, _, l)| (*p, *l)).collect();
        let mut refined = model.clone();
        (refined.samp_num, refined.samp_den) = fit_rational(&rows_s, &model.samp_num);
        (refined.line_num, refined.line_den) = fit_rational(&rows_l, &model.line_num);
        let r = fit_residual(&refined, frame, project);
        if r < residual && refined.validate().is_ok() {
            model = refined;
            residual = r;
        }
    }
    if residual > MAX_FIT_RESIDUAL {
        return Err(SynthError::FitResidualTooLarge(residual));
    }
    Ok((model, residual))
}

/// Exact RFM of an affine view (linear numerators, unit denominators).
pub fn affine_model(frame: &LocalFrame, view: &ViewGeometry, bx: &ModelBox) -> Result<RfmModel, SynthError> {
    let project = |p: &LocalPoint| view.affine_pixel(p);
    Ok(fit_rfm(frame, bx, view.width, view.height, 4, &project)?.0)
}

/// Cubic RFM fitted to the pushbroom proxy of `view`.
pub fn pushbroom_model(frame: &LocalFrame, view: &ViewGeometry, bx: &ModelBox) -> Result<(RfmModel, f64), SynthError> {
    let project = |p: &LocalPoint| view.pushbroom_pixel(p);
    fit_rfm(frame, bx, view.width, view.height, NUM_TERMS, &project)
}

pub fn view_model(
    frame: &LocalFrame,
    view: &ViewGeometry,
    kind: ModelKind,
    bx: &ModelBox,
) -> Result<RfmModel, SynthError> {
    match kind {
        ModelKind::Affine => affine_model(frame, view, bx),
        ModelKind::CubicPerspectiveFit => Ok(pushbroom_model(frame, view, bx)?.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfm::GeoPoint;

    fn frame() -> LocalFrame {
        LocalFrame::build(GeoPoint::new(30.31, -81.66, 10.0)).unwrap()
    }

    fn view(th: f64, az: f64) -> ViewGeometry {
        ViewGeometry { off_nadir_deg: th, azimuth_deg: az, gsd: 0.5, width: 200, height: 160, z_ref: 3.0 }
    }

    const BOX: ModelBox = ModelBox { x_half: 400.0, y_half: 400.0, z_lo: -50.0, z_hi: 700.0 };

    #[test]
    fn affine_fit_is_exact() {
        let f = frame();
        let v = view(12.0, 40.0);
        let m = affine_model(&f, &v, &BOX).unwrap();
        for p in [Vector3::new(3.0, -7.0, 0.0), Vector3::new(-120.0, 80.0, 500.0)] {
            let got = m.project(&f.from_local(&p)).unwrap();
            let want = v.affine_pixel(&p);
            assert!((got.samp - want.samp).abs() < 1e-8 && (got.line - want.line).abs() < 1e-8);
        }
        assert!(m.samp_num[4..].iter().all(|&c| c == 0.0));
        let center = v.affine_pixel(&Vector3::new(0.0, 0.0, 3.0));
        assert!((center.samp - 99.5).abs() < 1e-12 && (center.line - 79.5).abs() < 1e-12);
    }

    #[test]
    fn elevated_points_shift_away_from_the_sensor() {
        // sensor due east: raising a point moves its image west
        let v = view(10.0, 90.0);
        let lo = v.affine_pixel(&Vector3::new(0.0, 0.0, 3.0));
        let hi = v.affine_pixel(&Vector3::new(0.0, 0.0, 13.0));
        assert!((lo.samp - hi.samp - 10.0 * 10f64.to_radians().tan() / 0.5).abs() < 1e-9);
        let pb_lo = v.pushbroom_pixel(&Vector3::new(0.0, 0.0, 3.0));
        let pb_hi = v.pushbroom_pixel(&Vector3::new(0.0, 0.0, 13.0));
        assert!((pb_lo.samp - pb_hi.samp - 10.0 * 10f64.to_radians().tan() / 0.5).abs() < 1e-3);
    }

    #[test]
    fn pushbroom_fit_within_tolerance() {
        let f = frame();
        let v = view(30.0, 200.0);
        let (m, res) = pushbroom_model(&f, &v, &BOX).unwrap();
        assert!(res < MAX_FIT_RESIDUAL, "{res}");
        assert!(m.validate().is_ok());
        let p = Vector3::new(57.0, -33.0, 20.0);
        let got = m.project(&f.from_local(&p)).unwrap();
        let want = v.pushbroom_pixel(&p);
        assert!((got.samp - want.samp).hypot(got.line - want.line) < MAX_FIT_RESIDUAL);
        // the proxy ray passes through the sensor position
        let s = v.pushbroom_sensor(&p);
        let q = p + 1e-4 * (s - p);
        let pq = v.pushbroom_pixel(&q);
        assert!((pq.samp - want.samp).hypot(pq.line - want.line) < 1e-6);
    }
}
