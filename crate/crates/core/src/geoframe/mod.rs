//! Quasi-Cartesian local frame around an anchor point.
//!
//! Latitude and longitude are rescaled to meters with the factors observed
//! when stepping one UTM meter north (latitude) and one UTM meter east
//! (longitude) from the anchor. Local axes are east (x), north (y) and up (z),
//! all relative to the anchor.

pub mod utm;

use nalgebra::{Matrix2x3, Vector3};
use serde::{Deserialize, Serialize};

use crate::rfm::{GeoPoint, RfmError, RfmModel};
pub use utm::{TransverseMercator, UtmError, UtmZone};

pub type LocalPoint = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub anchor_geo: GeoPoint,
    /// UTM easting, northing and height of the anchor.
    pub anchor_utm: Vector3<f64>,
    pub zone: UtmZone,
    /// Meters per degree of latitude.
    pub inv_db: f64,
    /// Meters per degree of longitude.
    pub inv_dl: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("UTM conversion failed: {0}")]
    UtmConversionFailure(#[from] UtmError),
    #[error("degenerate frame scale factors")]
    DegenerateScale,
}

impl LocalFrame {
    /// Derives the scale factors from the geographic positions of the UTM
    /// points one meter north and one meter east of the anchor.
    pub fn build(anchor: GeoPoint) -> Result<LocalFrame, FrameError> {
        let zone = UtmZone::containing(anchor.lat, anchor.lon)?;
        let tm = TransverseMercator::default();
        let (e, n) = utm::geo_to_utm(&tm, zone, anchor.lat, anchor.lon);
        // Separate steps per axis: a diagonal step would leak grid convergence
        // into both factors.
        let (lat1, _) = utm::utm_to_geo(&tm, zone, e, n + 1.0);
        let (_, lon1) = utm::utm_to_geo(&tm, zone, e + 1.0, n);
        let inv_db = 1.0 / (lat1 - anchor.lat);
        let inv_dl = 1.0 / (lon1 - anchor.lon);
        if !(inv_db.is_finite() && inv_dl.is_finite()) || inv_db == 0.0 || inv_dl == 0.0 {
            return Err(FrameError::DegenerateScale);
        }
        Ok(LocalFrame {
            anchor_geo: anchor,
            anchor_utm: Vector3::new(e, n, anchor.height),
            zone,
            inv_db,
            inv_dl,
        })
    }

    /// Frame with explicit scale factors; the UTM anchor is still computed.
    pub fn with_scales(anchor: GeoPoint, inv_db: f64, inv_dl: f64) -> Result<LocalFrame, FrameError> {
        let mut f = Self::build(anchor)?;
        f.inv_db = inv_db;
        f.inv_dl = inv_dl;
        Ok(f)
    }

    pub fn to_local(&self, pt: &GeoPoint) -> LocalPoint {
        Vector3::new(
            (pt.lon - self.anchor_geo.lon) * self.inv_dl,
            (pt.lat - self.anchor_geo.lat) * self.inv_db,
            pt.height - self.anchor_geo.height,
        )
    }

    pub fn from_local(&self, p: &LocalPoint) -> GeoPoint {
        GeoPoint::new(
            p.y / self.inv_db + self.anchor_geo.lat,
            p.x / self.inv_dl + self.anchor_geo.lon,
            p.z + self.anchor_geo.height,
        )
    }

    /// Ellipsoidal height of a local z value.
    pub fn height_of(&self, z: f64) -> f64 {
        z + self.anchor_geo.height
    }

    pub fn utm_to_local(&self, easting: f64, northing: f64, height: f64) -> LocalPoint {
        let tm = TransverseMercator::default();
        let (lat, lon) = utm::utm_to_geo(&tm, self.zone, easting, northing);
        self.to_local(&GeoPoint::new(lat, lon, height))
    }

    pub fn local_to_utm(&self, p: &LocalPoint) -> Vector3<f64> {
        let g = self.from_local(p);
        let tm = TransverseMercator::default();
        let (e, n) = utm::geo_to_utm(&tm, self.zone, g.lat, g.lon);
        Vector3::new(e, n, g.height)
    }
}

/// Image-space Jacobian with respect to local meters (px/m), columns
/// ordered (x east, y north, z up).
pub fn chained_jacobian(
    model: &RfmModel,
    frame: &LocalFrame,
    pt: &LocalPoint,
) -> Result<Matrix2x3<f64>, RfmError> {
    let j = model.projection_jacobian(&frame.from_local(pt))?;
    Ok(reorder_geo_jacobian(&j, frame))
}

/// Converts a (lat, lon, height) Jacobian into local (x, y, z) columns.
pub fn reorder_geo_jacobian(j: &Matrix2x3<f64>, frame: &LocalFrame) -> Matrix2x3<f64> {
    Matrix2x3::new(
        j[(0, 1)] / frame.inv_dl,
        j[(0, 0)] / frame.inv_db,
        j[(0, 2)],
        j[(1, 1)] / frame.inv_dl,
        j[(1, 0)] / frame.inv_db,
        j[(1, 2)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameCheckRow {
    pub scale: f64,
    pub len_x: f64,
    pub len_y: f64,
    pub angle_deg: f64,
}

impl FrameCheckRow {
    pub fn length_error(&self) -> f64 {
        (self.len_x - self.scale).abs().max((self.len_y - self.scale).abs())
    }

    pub fn angle_error(&self) -> f64 {
        (self.angle_deg - 90.0).abs()
    }
}

/// Maps orthogonal UTM vectors of length `s` (anchored at the frame origin,
/// at `height`) through geographic into local coordinates and reports their
/// lengths and mutual angle.
pub fn validate_frame(frame: &LocalFrame, scales: &[f64], height: f64) -> Vec<FrameCheckRow> {
    let (e0, n0) = (frame.anchor_utm.x, frame.anchor_utm.y);
    let p0 = frame.utm_to_local(e0, n0, height);
    scales
        .iter()
        .map(|&s| {
            let x = frame.utm_to_local(e0 + s, n0, height) - p0;
            let y = frame.utm_to_local(e0, n0 + s, height) - p0;
            let cos = (x.dot(&y) / (x.norm() * y.norm())).clamp(-1.0, 1.0);
            FrameCheckRow { scale: s, len_x: x.norm(), len_y: y.norm(), angle_deg: cos.acos().to_degrees() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfm::test_models::random_cubic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const WGS84_A: f64 = 6_378_137.0;
    const WGS84_E2: f64 = 0.006_694_379_990_14;

    #[test]
    fn latitude_scale_matches_meridian_radius() {
        let f = LocalFrame::build(GeoPoint::new(30.0, -79.0, 10.0)).unwrap();
        let phi = 30f64.to_radians();
        let m = WGS84_A * (1.0 - WGS84_E2) / (1.0 - WGS84_E2 * phi.sin().powi(2)).powf(1.5);
        let per_deg = m * std::f64::consts::PI / 180.0;
        assert!((f.inv_db.abs() / per_deg - 1.0).abs() < 0.005, "{} vs {}", f.inv_db, per_deg);
        assert!((per_deg - 110_852.0).abs() / 110_852.0 < 0.005);
    }

    #[test]
    fn longitude_scale_at_equator() {
        let f = LocalFrame::build(GeoPoint::new(0.5, 9.0, 0.0)).unwrap();
        let per_deg = 2.0 * std::f64::consts::PI * WGS84_A / 360.0;
        assert!((f.inv_dl.abs() / per_deg - 1.0).abs() < 0.005);
    }

    #[test]
    fn anchor_maps_to_origin() {
        let a = GeoPoint::new(30.3, -81.6, 12.0);
        let f = LocalFrame::build(a).unwrap();
        assert_eq!(f.to_local(&a), Vector3::zeros());
        let up = GeoPoint::new(a.lat, a.lon, a.height + 100.0);
        assert_eq!(f.to_local(&up), Vector3::new(0.0, 0.0, 100.0));
    }

    #[test]
    fn east_offset_matches_utm() {
        // On the central meridian UTM grid east coincides with geographic
        // east; elsewhere the grid is rotated by the meridian convergence.
        let a = GeoPoint::new(30.3, -81.0, 0.0);
        let f = LocalFrame::build(a).unwrap();
        let s = 1000.0;
        let p = f.utm_to_local(f.anchor_utm.x + s, f.anchor_utm.y, 0.0);
        assert!((p.x - s).abs() < 0.02, "{p:?}");
        // A straight grid line departs from the parallel by about
        // s^2 tan(lat) / 2R; that is the only northing difference expected.
        let sag = s * s * 30.3f64.to_radians().tan() / (2.0 * WGS84_A);
        assert!((p.y.abs() - sag).abs() < 0.01, "{p:?} vs {sag}");
    }

    #[test]
    fn round_trip_is_tight() {
        let f = LocalFrame::build(GeoPoint::new(-12.0, 130.0, 40.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let g = GeoPoint::new(
                -12.0 + rng.gen_range(-0.05..0.05),
                130.0 + rng.gen_range(-0.05..0.05),
                rng.gen_range(-100.0..1000.0),
            );
            let back = f.from_local(&f.to_local(&g));
            assert!((back.lat - g.lat).abs() < 1e-12);
            assert!((back.lon - g.lon).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_latitude_rejected() {
        assert!(matches!(
            LocalFrame::build(GeoPoint::new(89.0, 0.0, 0.0)),
            Err(FrameError::UtmConversionFailure(_))
        ));
    }

    fn model_around(frame: &LocalFrame, rng: &mut ChaCha8Rng) -> RfmModel {
        let mut m = random_cubic(rng);
        m.lat_off = frame.anchor_geo.lat;
        m.lon_off = frame.anchor_geo.lon;
        m.height_off = frame.anchor_geo.height;
        m.lat_scale = 0.02;
        m.lon_scale = 0.02;
        m.height_scale = 500.0;
        m
    }

    #[test]
    fn chained_jacobian_matches_differences() {
        let frame = LocalFrame::build(GeoPoint::new(30.3, -81.6, 5.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m = model_around(&frame, &mut rng);
            let p = Vector3::new(
                rng.gen_range(-1500.0..1500.0),
                rng.gen_range(-1500.0..1500.0),
                rng.gen_range(-300.0..300.0),
            );
            let j = chained_jacobian(&m, &frame, &p).unwrap();
            for c in 0..3 {
                let h = 1e-3;
                let mut dp = Vector3::zeros();
                dp[c] = h;
                let a = m.project(&frame.from_local(&(p + dp))).unwrap();
                let b = m.project(&frame.from_local(&(p - dp))).unwrap();
                let fd = [(a.samp - b.samp) / (2.0 * h), (a.line - b.line) / (2.0 * h)];
                for r in 0..2 {
                    let scale = j.row(r).amax();
                    assert!((fd[r] - j[(r, c)]).abs() / scale < 1e-6);
                }
            }
        }
    }

    #[test]
    fn unit_scales_reorder_geographic_jacobian() {
        let anchor = GeoPoint::new(30.0, -81.0, 0.0);
        let frame = LocalFrame::with_scales(anchor, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model_around(&frame, &mut rng);
        let p = Vector3::new(0.001, -0.002, 30.0);
        let jl = chained_jacobian(&m, &frame, &p).unwrap();
        let jg = m.projection_jacobian(&frame.from_local(&p)).unwrap();
        for r in 0..2 {
            assert_eq!(jl[(r, 0)], jg[(r, 1)]);
            assert_eq!(jl[(r, 1)], jg[(r, 0)]);
            assert_eq!(jl[(r, 2)], jg[(r, 2)]);
        }
    }

    #[test]
    fn doubling_lon_scale_halves_east_column() {
        let frame = LocalFrame::build(GeoPoint::new(30.0, -81.0, 0.0)).unwrap();
        let mut doubled = frame.clone();
        doubled.inv_dl *= 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = model_around(&frame, &mut rng);
        let g = GeoPoint::new(30.001, -81.002, 20.0);
        let ja = chained_jacobian(&m, &frame, &frame.to_local(&g)).unwrap();
        let jb = chained_jacobian(&m, &doubled, &doubled.to_local(&g)).unwrap();
        for r in 0..2 {
            assert_eq!(jb[(r, 0)], ja[(r, 0)] / 2.0);
            assert_eq!(jb[(r, 1)], ja[(r, 1)]);
            assert_eq!(jb[(r, 2)], ja[(r, 2)]);
        }
    }

    #[test]
    fn frame_check_bands() {
        let frame = LocalFrame::build(GeoPoint::new(30.3, -81.0, 10.0)).unwrap();
        let rows = validate_frame(&frame, &[1e-3, 100.0, 2000.0], 10.0);
        assert!(rows[0].angle_error() < 1e-3);
        assert!(rows[1].length_error() < 0.01);
        assert!(rows[2].length_error() < 0.1);
        assert!(rows[2].angle_error() < 0.01);
    }
}
