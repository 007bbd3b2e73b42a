//! Transverse Mercator on the WGS84 ellipsoid using Krüger's series to sixth
//! order in the third flattening, with UTM zone conventions.

use serde::{Deserialize, Serialize};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const UTM_K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;
const FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum UtmError {
    #[error("latitude {0} outside the UTM domain [-80, 84]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtmZone {
    pub number: u8,
    pub north: bool,
}

impl UtmZone {
    pub fn containing(lat: f64, lon: f64) -> Result<UtmZone, UtmError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(UtmError::NonFinite);
        }
        if !(-80.0..=84.0).contains(&lat) {
            return Err(UtmError::LatitudeOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(UtmError::LongitudeOutOfRange(lon));
        }
        let number = (((lon + 180.0) / 6.0).floor() as i32).clamp(0, 59) as u8 + 1;
        Ok(UtmZone { number, north: lat >= 0.0 })
    }

    pub fn central_meridian(&self) -> f64 {
        self.number as f64 * 6.0 - 183.0
    }

    fn false_northing(&self) -> f64 {
        if self.north {
            0.0
        } else {
            FALSE_NORTHING_SOUTH
        }
    }
}

/// Series coefficients for one ellipsoid.
#[derive(Debug, Clone)]
pub struct TransverseMercator {
    e: f64,
    rect_radius: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

impl Default for TransverseMercator {
    fn default() -> Self {
        Self::new(WGS84_A, WGS84_F)
    }
}

impl TransverseMercator {
    pub fn new(a: f64, f: f64) -> Self {
        let n = f / (2.0 - f);
        let n2 = n * n;
        let n3 = n2 * n;
        let n4 = n3 * n;
        let n5 = n4 * n;
        let n6 = n5 * n;
        let rect_radius = a / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
                + 7891.0 * n6 / 37800.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
                - 1983433.0 * n6 / 1935360.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0
                + 167603.0 * n6 / 181440.0,
            49561.0 * n4 / 161280.0 - 179.0 * n5 / 168.0 + 6601661.0 * n6 / 7257600.0,
            34729.0 * n5 / 80640.0 - 3418889.0 * n6 / 1995840.0,
            212378941.0 * n6 / 319334400.0,
        ];
        let beta = [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
                + 96199.0 * n6 / 604800.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
                - 1118711.0 * n6 / 3870720.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
            4397.0 * n4 / 161280.0 - 11.0 * n5 / 504.0 - 830251.0 * n6 / 7257600.0,
            4583.0 * n5 / 161280.0 - 108847.0 * n6 / 3991680.0,
            20648693.0 * n6 / 638668800.0,
        ];
        let e = (f * (2.0 - f)).sqrt();
        TransverseMercator { e, rect_radius, alpha, beta }
    }

    fn conformal_tau(&self, tau: f64) -> f64 {
        let sigma = (self.e * (self.e * tau / tau.hypot(1.0)).atanh()).sinh();
        tau * sigma.hypot(1.0) - sigma * tau.hypot(1.0)
    }

    /// Returns unscaled `(x, y)` = `(A eta, A xi)` for latitude and longitude
    /// relative to the central meridian, both in degrees.
    pub fn forward(&self, lat: f64, dlon: f64) -> (f64, f64) {
        let phi = lat.to_radians();
        let lam = dlon.to_radians();
        let tau_p = self.conformal_tau(phi.tan());
        let xi_p = tau_p.atan2(lam.cos());
        let eta_p = (lam.sin() / tau_p.hypot(lam.cos())).asinh();
        let mut xi = xi_p;
        let mut eta = eta_p;
        for (j, a) in self.alpha.iter().enumerate() {
            let k = 2.0 * (j + 1) as f64;
            xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
            eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
        }
        (self.rect_radius * eta, self.rect_radius * xi)
    }

    /// Inverse of [`forward`](Self::forward): returns `(lat, dlon)` in degrees.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let xi = y / self.rect_radius;
        let eta = x / self.rect_radius;
        let mut xi_p = xi;
        let mut eta_p = eta;
        for (j, b) in self.beta.iter().enumerate() {
            let k = 2.0 * (j + 1) as f64;
            xi_p -= b * (k * xi).sin() * (k * eta).cosh();
            eta_p -= b * (k * xi).cos() * (k * eta).sinh();
        }
        let tau_p = xi_p.sin() / eta_p.sinh().hypot(xi_p.cos());
        let lam = eta_p.sinh().atan2(xi_p.cos());
        let e2 = self.e * self.e;
        let mut tau = tau_p;
        for _ in 0..8 {
            let tp = self.conformal_tau(tau);
            let dtau = (tau_p - tp) / tp.hypot(1.0) * (1.0 + (1.0 - e2) * tau * tau)
                / ((1.0 - e2) * tau.hypot(1.0));
            tau += dtau;
            if dtau.abs() < 1e-15 * tau.abs().max(1.0) {
                break;
            }
        }
        (tau.atan().to_degrees(), lam.to_degrees())
    }
}

/// Geographic to UTM `(easting, northing)` in a given zone.
pub fn geo_to_utm(tm: &TransverseMercator, zone: UtmZone, lat: f64, lon: f64) -> (f64, f64) {
    let (x, y) = tm.forward(lat, lon - zone.central_meridian());
    (FALSE_EASTING + UTM_K0 * x, zone.false_northing() + UTM_K0 * y)
}

/// UTM `(easting, northing)` in a given zone to `(lat, lon)`.
pub fn utm_to_geo(tm: &TransverseMercator, zone: UtmZone, easting: f64, northing: f64) -> (f64, f64) {
    let (lat, dlon) = tm.inverse(
        (easting - FALSE_EASTING) / UTM_K0,
        (northing - zone.false_northing()) / UTM_K0,
    );
    (lat, dlon + zone.central_meridian())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from PROJ (EPSG:4326 -> EPSG:326xx).
    const VECTORS: [(f64, f64, u8, f64, f64); 5] = [
        (30.0, -81.0, 17, 500000.000000, 3318785.352581),
        (30.31, -81.66, 17, 436542.609185, 3353321.134390),
        (31.2, -79.5, 17, 642906.974182, 3452736.485011),
        (28.5, -83.9, 17, 216125.155825, 3156021.794614),
        (32.88, -117.2, 11, 481291.567241, 3638001.586901),
    ];

    #[test]
    fn forward_matches_reference_vectors() {
        let tm = TransverseMercator::default();
        for (lat, lon, zn, e, n) in VECTORS {
            let zone = UtmZone::containing(lat, lon).unwrap();
            assert_eq!(zone.number, zn);
            let (ee, nn) = geo_to_utm(&tm, zone, lat, lon);
            assert!((ee - e).abs() < 1e-5, "{ee} vs {e}");
            assert!((nn - n).abs() < 1e-5, "{nn} vs {n}");
        }
    }

    #[test]
    fn inverse_round_trip() {
        let tm = TransverseMercator::default();
        for (lat, lon, ..) in VECTORS {
            let zone = UtmZone::containing(lat, lon).unwrap();
            let (e, n) = geo_to_utm(&tm, zone, lat, lon);
            let (la, lo) = utm_to_geo(&tm, zone, e, n);
            assert!((la - lat).abs() < 1e-11);
            assert!((lo - lon).abs() < 1e-11);
        }
    }

    #[test]
    fn southern_hemisphere_false_northing() {
        let tm = TransverseMercator::default();
        let zone = UtmZone::containing(-33.9, 18.4).unwrap();
        assert!(!zone.north);
        let (_, n) = geo_to_utm(&tm, zone, -33.9, 18.4);
        assert!(n > 6_000_000.0 && n < 10_000_000.0);
        let (lat, lon) = {
            let (e, n) = geo_to_utm(&tm, zone, -33.9, 18.4);
            utm_to_geo(&tm, zone, e, n)
        };
        assert!((lat + 33.9).abs() < 1e-11 && (lon - 18.4).abs() < 1e-11);
    }

    #[test]
    fn rejects_polar_latitudes() {
        assert_eq!(UtmZone::containing(85.0, 0.0), Err(UtmError::LatitudeOutOfRange(85.0)));
        assert_eq!(UtmZone::containing(f64::NAN, 0.0), Err(UtmError::NonFinite));
    }
}
