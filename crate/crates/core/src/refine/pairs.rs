//! Stereo pair selection by intersection angle.

use nalgebra::Vector3;

use crate::geoframe::LocalFrame;
use crate::rfm::{PixelCoord, RfmModel};

/// Downward ray direction through the model's central pixel, from the top of
/// its nominal height range to its mid height.
pub fn view_direction(model: &RfmModel, frame: &LocalFrame) -> Option<Vector3<f64>> {
    let px = PixelCoord::new(model.samp_off, model.line_off);
    let top = model.inverse_at_height(&px, model.height_off + 0.5 * model.height_scale, None).ok()?;
    let mid = model.inverse_at_height(&px, model.height_off, Some((top.lat, top.lon))).ok()?;
    let d = frame.to_local(&mid) - frame.to_local(&top);
    Some(d.normalize())
}

/// Angle in degrees between two viewing directions.
pub fn pair_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Ordered pairs `(i, j)`, `i != j`, whose viewing directions intersect at an
/// angle within `[min_angle, max_angle]` degrees.
pub fn select_pairs(models: &[RfmModel], frame: &LocalFrame, min_angle: f64, max_angle: f64) -> Vec<(usize, usize)> {
    let dirs: Vec<Option<Vector3<f64>>> = models.iter().map(|m| view_direction(m, frame)).collect();
    let mut out = Vec::new();
    for (i, di) in dirs.iter().enumerate() {
        for (j, dj) in dirs.iter().enumerate() {
            if i == j {
                continue;
            }
            if let (Some(a), Some(b)) = (di, dj) {
                let angle = pair_angle(a, b);
                if (min_angle..=max_angle).contains(&angle) {
                    out.push((i, j));
                }
            }
        }
    }
    if out.is_empty() && models.len() >= 2 {
        log::warn!("no image pair intersects within [{min_angle}, {max_angle}] degrees");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfm::GeoPoint;
    use crate::synthio::{affine_model, ModelBox, ViewGeometry};

    fn setup(views: &[(f64, f64)]) -> (LocalFrame, Vec<RfmModel>) {
        let f = LocalFrame::build(GeoPoint::new(30.0, -81.0, 0.0)).unwrap();
        let bx = ModelBox { x_half: 300.0, y_half: 300.0, z_lo: -100.0, z_hi: 700.0 };
        let models = views
            .iter()
            .map(|&(th, az)| {
                let v = ViewGeometry { off_nadir_deg: th, azimuth_deg: az, gsd: 0.5, width: 64, height: 64, z_ref: 0.0 };
                affine_model(&f, &v, &bx).unwrap()
            })
            .collect();
        (f, models)
    }

    #[test]
    fn identical_views_are_excluded() {
        let (f, m) = setup(&[(7.0, 30.0), (7.0, 30.0)]);
        assert!(select_pairs(&m, &f, 5.0, 13.0).is_empty());
    }

    #[test]
    fn nadir_and_ten_degrees() {
        let (f, m) = setup(&[(0.0, 0.0), (10.0, 75.0)]);
        let a = pair_angle(&view_direction(&m[0], &f).unwrap(), &view_direction(&m[1], &f).unwrap());
        assert!((a - 10.0).abs() < 1e-6);
        assert_eq!(select_pairs(&m, &f, 5.0, 13.0), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn three_views_six_pairs() {
        // equilateral arrangement: pairwise angle 2 * asin(sin(th) * sin(60 deg))
        let th = (3f64.to_radians().sin() / 60f64.to_radians().sin()).asin().to_degrees();
        let (f, m) = setup(&[(th, 0.0), (th, 120.0), (th, 240.0)]);
        let d: Vec<_> = m.iter().map(|m| view_direction(m, &f).unwrap()).collect();
        assert!((pair_angle(&d[0], &d[1]) - 6.0).abs() < 1e-6);
        assert_eq!(select_pairs(&m, &f, 5.0, 13.0).len(), 6);
    }
}
