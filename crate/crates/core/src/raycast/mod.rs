//! Ray casting against the surface mesh and texture transfer between views.

mod bvh;
mod camera;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geoframe::LocalPoint;
use crate::imaging::Raster;
use crate::mesh::TriMesh;
use crate::rfm::{PixelCoord, RfmError};

pub use bvh::{intersect_triangle, Bvh, Hit, T_MIN};
pub use camera::{build_virtual_camera, validate_ray_straightness, CameraPlanes, RayAngleRow, VirtualCamera};

/// Offset along the ray toward the camera before testing for occluders.
pub const OCCLUSION_EPS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RaycastError {
    #[error("inverse projection failed for {failed} of {total} pixels")]
    InverseDivergence { failed: usize, total: usize },
    #[error("invalid camera planes: {0}")]
    InvalidPlanes(String),
    #[error(transparent)]
    Rfm(#[from] RfmError),
}

/// Surface sample seen by a pixel of view i and its position in view j.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRecord {
    pub face: usize,
    pub bary: [f64; 3],
    pub point: LocalPoint,
    /// Ray direction of the view-i pixel.
    pub dir: Vector3<f64>,
    pub xj: PixelCoord,
}

/// True if the path from `surface_pt` toward `cam` is free of other faces.
pub fn visibility(bvh: &Bvh, m: &TriMesh, surface_pt: &LocalPoint, cam: &VirtualCamera) -> bool {
    let Some(px) = cam.pixel_of(surface_pt) else {
        return false;
    };
    let Some(d) = cam.direction_at(&px) else {
        return false;
    };
    let up = -d;
    !bvh.occluded(m, &(surface_pt + OCCLUSION_EPS * up), &up)
}

/// First surface hit of every pixel ray of `cam`.
pub fn cast_view(bvh: &Bvh, m: &TriMesh, cam: &VirtualCamera) -> Vec<Option<Hit>> {
    (0..cam.width * cam.height)
        .into_par_iter()
        .map(|i| {
            if !cam.valid[i] {
                return None;
            }
            bvh.intersect(m, &cam.origins[i], &cam.directions[i])
        })
        .collect()
}

/// Samples view j at the surface points seen by view i. Pixels are masked on
/// a miss, outside image j, or when the point is hidden from camera j.
pub fn transfer(
    bvh: &Bvh,
    m: &TriMesh,
    hits_i: &[Option<Hit>],
    cam_i: &VirtualCamera,
    cam_j: &VirtualCamera,
) -> (Raster, Vec<Option<HitRecord>>) {
    let records: Vec<Option<(HitRecord, f64)>> = hits_i
        .par_iter()
        .enumerate()
        .map(|(i, hit)| {
            let hit = (*hit)?;
            let xj = cam_j.pixel_of(&hit.point)?;
            let value = cam_j.intensities.bilinear(xj)?;
            if !visibility(bvh, m, &hit.point, cam_j) {
                return None;
            }
            let rec = HitRecord { face: hit.face, bary: hit.bary, point: hit.point, dir: cam_i.directions[i], xj };
            Some((rec, value))
        })
        .collect();
    let values = records.iter().map(|r| r.map_or(0.0, |(_, v)| v)).collect();
    let mask = records.iter().map(|r| r.is_some()).collect();
    let raster = Raster::new(cam_i.width, cam_i.height, values)
        .and_then(|r| r.with_mask(mask))
        .expect("sizes match the camera grid");
    (raster, records.into_iter().map(|r| r.map(|(h, _)| h)).collect())
}

/// Texture of view j transferred into view i through the mesh.
pub fn reproject(
    bvh: &Bvh,
    m: &TriMesh,
    cam_i: &VirtualCamera,
    cam_j: &VirtualCamera,
) -> (Raster, Vec<Option<HitRecord>>) {
    let hits = cast_view(bvh, m, cam_i);
    transfer(bvh, m, &hits, cam_i, cam_j)
}
