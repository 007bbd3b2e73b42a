//! Straight-ray proxies of RFM cameras.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geoframe::{LocalFrame, LocalPoint};
use crate::imaging::Raster;
use crate::rfm::{PixelCoord, RfmModel};

use super::RaycastError;

/// Largest fraction of pixels whose inverse projection may fail.
const MAX_FAILED_FRACTION: f64 = 1e-3;

/// Heights (local z) used to build virtual cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPlanes {
    /// Height of the ray origins.
    pub plane_h: f64,
    /// The second plane sits `delta_h` below `plane_h`.
    pub delta_h: f64,
    /// Height at which the GSD is measured.
    pub terrain_h: f64,
}

impl CameraPlanes {
    /// Origins 500 m above the terrain, lowered if needed to stay inside the
    /// model's nominal height range.
    pub fn default_for(terrain_h: f64, models: &[&RfmModel], frame: &LocalFrame) -> CameraPlanes {
        let mut plane_h = terrain_h + 500.0;
        for m in models {
            let top = m.height_off + m.height_scale - frame.anchor_geo.height;
            plane_h = plane_h.min(top);
        }
        let delta_h = 100.0f64.min(0.5 * (plane_h - terrain_h)).max(1.0);
        CameraPlanes { plane_h, delta_h, terrain_h }
    }
}

#[derive(Debug, Clone)]
pub struct VirtualCamera {
    pub width: usize,
    pub height: usize,
    /// Ray origin per pixel at `plane_h`.
    pub origins: Vec<LocalPoint>,
    /// Unit downward ray direction per pixel.
    pub directions: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    pub intensities: Raster,
    pub gsd: f64,
    pub plane_h: f64,
    pub delta_h: f64,
    pub model: RfmModel,
    pub frame: LocalFrame,
}

impl VirtualCamera {
    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Pixel of a local point in this camera's image, if inside the model's
    /// validity box.
    pub fn pixel_of(&self, p: &LocalPoint) -> Option<PixelCoord> {
        self.model.project(&self.frame.from_local(p)).ok()
    }

    pub fn in_image(&self, px: &PixelCoord) -> bool {
        px.samp >= 0.0
            && px.line >= 0.0
            && px.samp <= (self.width - 1) as f64
            && px.line <= (self.height - 1) as f64
    }

    /// Bilinearly interpolated ray direction at a subpixel position.
    pub fn direction_at(&self, px: &PixelCoord) -> Option<Vector3<f64>> {
        if !self.in_image(px) {
            return None;
        }
        let x0 = (px.samp.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (px.line.floor() as usize).min(self.height.saturating_sub(2));
        let fx = px.samp - x0 as f64;
        let fy = px.line - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let mut d = Vector3::zeros();
        for (x, y, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            let i = self.index(x, y);
            if !self.valid[i] {
                return None;
            }
            d += w * self.directions[i];
        }
        Some(d.normalize())
    }

    /// Mean direction over valid pixels.
    pub fn mean_direction(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self
            .directions
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(d, _)| *d)
            .sum();
        sum.normalize()
    }
}

/// Builds the per-pixel rays by inverse-projecting every pixel center onto
/// the planes `plane_h` and `plane_h - delta_h`.
pub fn build_virtual_camera(
    model: &RfmModel,
    frame: &LocalFrame,
    img: &Raster,
    planes: &CameraPlanes,
) -> Result<VirtualCamera, RaycastError> {
    if !(planes.delta_h > 0.0) {
        return Err(RaycastError::InvalidPlanes(format!("delta_h must be positive, got {}", planes.delta_h)));
    }
    let (w, h) = (img.width(), img.height());
    let top = frame.height_of(planes.plane_h);
    let bottom = frame.height_of(planes.plane_h - planes.delta_h);
    let rows: Vec<Vec<Option<(LocalPoint, Vector3<f64>)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut warm = None;
            (0..w)
                .map(|x| {
                    let px = PixelCoord::new(x as f64, y as f64);
                    let g0 = model.inverse_at_height(&px, top, warm).ok()?;
                    warm = Some((g0.lat, g0.lon));
                    let g1 = model.inverse_at_height(&px, bottom, warm).ok()?;
                    let v = frame.to_local(&g0);
                    let d = (frame.to_local(&g1) - v).normalize();
                    d.iter().all(|c| c.is_finite()).then_some((v, d))
                })
                .collect()
        })
        .collect();
    let total = w * h;
    let failed = rows.iter().flatten().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(RaycastError::InverseDivergence { failed, total });
    }
    let mut origins = Vec::with_capacity(total);
    let mut directions = Vec::with_capacity(total);
    let mut valid = Vec::with_capacity(total);
    for r in rows.into_iter().flatten() {
        let (o, d) = r.unwrap_or((Vector3::zeros(), -Vector3::z()));
        origins.push(o);
        directions.push(d);
        valid.push(r.is_some());
    }
    let ground = |i: usize| {
        let t = (planes.terrain_h - origins[i].z) / directions[i].z;
        origins[i] + t * directions[i]
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            if valid[i] && valid[i + 1] {
                sum += (ground(i + 1) - ground(i)).norm();
                n += 1;
            }
        }
    }
    if n == 0 || !(sum > 0.0) {
        return Err(RaycastError::InvalidPlanes("no adjacent valid pixels to measure GSD".into()));
    }
    Ok(VirtualCamera {
        width: w,
        height: h,
        origins,
        directions,
        valid,
        intensities: img.clone(),
        gsd: sum / n as f64,
        plane_h: planes.plane_h,
        delta_h: planes.delta_h,
        model: model.clone(),
        frame: frame.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RayAngleRow {
    pub height: f64,
    pub off_nadir_deg: f64,
}

/// Off-nadir angle of the virtual ray through `pixel` built at each plane
/// height (local z) with a fixed plane separation.
pub fn validate_ray_straightness(
    model: &RfmModel,
    frame: &LocalFrame,
    pixel: &PixelCoord,
    heights: &[f64],
    delta_h: f64,
) -> Result<Vec<RayAngleRow>, RaycastError> {
    heights
        .iter()
        .map(|&h| {
            let g0 = model.inverse_at_height(pixel, frame.height_of(h), None)?;
            let g1 = model.inverse_at_height(pixel, frame.height_of(h - delta_h), Some((g0.lat, g0.lon)))?;
            let d = (frame.to_local(&g1) - frame.to_local(&g0)).normalize();
            Ok(RayAngleRow { height: h, off_nadir_deg: (-d.z).clamp(-1.0, 1.0).acos().to_degrees() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfm::GeoPoint;
    use crate::synthio::{affine_model, pushbroom_model, ModelBox, ViewGeometry};

    fn frame() -> LocalFrame {
        LocalFrame::build(GeoPoint::new(30.31, -81.66, 10.0)).unwrap()
    }

    const BOX: ModelBox = ModelBox { x_half: 500.0, y_half: 500.0, z_lo: -100.0, z_hi: 700.0 };
    const PLANES: CameraPlanes = CameraPlanes { plane_h: 500.0, delta_h: 100.0, terrain_h: 0.0 };

    fn view(th: f64, az: f64) -> ViewGeometry {
        ViewGeometry { off_nadir_deg: th, azimuth_deg: az, gsd: 0.5, width: 40, height: 30, z_ref: 0.0 }
    }

    #[test]
    fn affine_rays_reproject_to_their_pixel() {
        let f = frame();
        let m = affine_model(&f, &view(9.0, 60.0), &BOX).unwrap();
        let cam = build_virtual_camera(&m, &f, &Raster::filled(40, 30, 0.0), &PLANES).unwrap();
        assert!(cam.valid.iter().all(|&v| v));
        for y in 0..30 {
            for x in 0..40 {
                let i = cam.index(x, y);
                let d = cam.directions[i];
                assert!((d.norm() - 1.0).abs() < 1e-12 && d.z < 0.0);
                for p in [cam.origins[i], cam.origins[i] + d * 100.0 / -d.z] {
                    let px = cam.pixel_of(&p).unwrap();
                    assert!((px.samp - x as f64).abs() < 1e-6 && (px.line - y as f64).abs() < 1e-6);
                }
            }
        }
        assert!((cam.gsd - 0.5).abs() < 1e-6);
        let angle = cam.mean_direction().z.acos().to_degrees();
        assert!((180.0 - angle - 9.0).abs() < 1e-6);
    }

    #[test]
    fn nadir_affine_is_vertical() {
        let f = frame();
        let m = affine_model(&f, &view(0.0, 0.0), &BOX).unwrap();
        let cam = build_virtual_camera(&m, &f, &Raster::filled(40, 30, 0.0), &PLANES).unwrap();
        for d in &cam.directions {
            assert!((d + Vector3::z()).norm() < 1e-9);
        }
        assert!(build_virtual_camera(&m, &f, &Raster::filled(4, 4, 0.0), &CameraPlanes { delta_h: 0.0, ..PLANES }).is_err());
    }

    #[test]
    fn fitted_rays_match_pinhole_rays() {
        let f = frame();
        let v = view(30.0, 135.0);
        let (m, _) = pushbroom_model(&f, &v, &BOX).unwrap();
        let cam = build_virtual_camera(&m, &f, &Raster::filled(40, 30, 0.0), &PLANES).unwrap();
        for i in (0..cam.directions.len()).step_by(7) {
            let d = cam.directions[i];
            let ground = cam.origins[i] + d * (cam.origins[i].z / -d.z);
            let oracle = (ground - v.pushbroom_sensor(&ground)).normalize();
            let angle = d.dot(&oracle).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle < 0.01, "{angle}");
        }
    }

    #[test]
    fn straightness_tables() {
        let f = frame();
        let heights = [1.0, 100.0, 250.0, 500.0, 1000.0];
        let bx = ModelBox { z_lo: -150.0, z_hi: 1050.0, ..BOX };
        let px = PixelCoord::new(10.0, 12.0);
        let affine = affine_model(&f, &view(20.0, 10.0), &bx).unwrap();
        let rows = validate_ray_straightness(&affine, &f, &px, &heights, 100.0).unwrap();
        let spread = |rows: &[RayAngleRow]| {
            let a: Vec<f64> = rows.iter().map(|r| r.off_nadir_deg).collect();
            a.iter().cloned().fold(f64::MIN, f64::max) - a.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&rows) < 1e-9);
        assert!((rows[0].off_nadir_deg - 20.0).abs() < 1e-6);
        let (cubic, _) = pushbroom_model(&f, &view(30.0, 10.0), &bx).unwrap();
        let rows = validate_ray_straightness(&cubic, &f, &px, &heights, 100.0).unwrap();
        assert!(spread(&rows) < 0.02);
        let one = validate_ray_straightness(&cubic, &f, &px, &[300.0], 100.0).unwrap();
        assert_eq!(one.len(), 1);
    }
}
