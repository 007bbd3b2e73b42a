//! Procedural test scenes rendered through synthetic sensor models.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geoframe::{LocalFrame, LocalPoint};
use crate::imaging::Raster;
use crate::mesh::{mesh_from_dem, DemGrid, TriMesh};
use crate::raycast::{build_virtual_camera, visibility, Bvh, CameraPlanes, VirtualCamera};
use crate::rfm::{GeoPoint, PixelCoord, RfmModel};

use super::models::{view_model, ModelBox, ModelKind, ViewGeometry};
use super::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub cx: f64,
    pub cy: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Terrain {
    Flat { height: f64 },
    Ramp { height: f64, slope_x: f64, slope_y: f64 },
    Boxes { base: f64, boxes: Vec<BoxSpec> },
    /// Sum of sinusoidal octaves with random orientations; amplitude halves
    /// with each octave.
    Fractal { base: f64, amplitude: f64, wavelength: f64, octaves: u32, seed: u64 },
}

impl Terrain {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match self {
            Terrain::Flat { height } => *height,
            Terrain::Ramp { height, slope_x, slope_y } => height + slope_x * x + slope_y * y,
            Terrain::Boxes { base, boxes } => boxes
                .iter()
                .filter(|b| (x - b.cx).abs() <= b.half_x && (y - b.cy).abs() <= b.half_y)
                .map(|b| base + b.height)
                .fold(*base, f64::max),
            Terrain::Fractal { base, amplitude, wavelength, octaves, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut h = *base;
                for o in 0..*octaves {
                    let scale = 0.5f64.powi(o as i32);
                    for _ in 0..3 {
                        let a: f64 = rng.gen_range(0.0..TAU);
                        let phase: f64 = rng.gen_range(0.0..TAU);
                        let k = TAU / (wavelength * scale);
                        h += amplitude * scale / 3.0 * (k * (x * a.cos() + y * a.sin()) + phase).sin();
                    }
                }
                h
            }
        }
    }
}

/// Sum of 3D sinusoids with wavelengths drawn log-uniformly in
/// `[min_wavelength, max_wavelength]` meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub min_wavelength: f64,
    pub max_wavelength: f64,
    pub components: usize,
    pub mean: f64,
    pub contrast: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec { min_wavelength: 2.0, max_wavelength: 16.0, components: 24, mean: 0.5, contrast: 0.15 }
    }
}

#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<(Vector3<f64>, f64, f64)>,
    mean: f64,
}

impl Texture {
    pub fn new(spec: &TextureSpec, seed: u64) -> Texture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47);
        let (lo, hi) = (spec.min_wavelength.ln(), spec.max_wavelength.ln());
        let amp = spec.contrast * (2.0 / spec.components.max(1) as f64).sqrt();
        let waves = (0..spec.components)
            .map(|_| {
                let lambda = rng.gen_range(lo..=hi).exp();
                let dir = loop {
                    let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    let n = v.norm();
                    if n > 0.1 && n <= 1.0 {
                        break v / n;
                    }
                };
                (dir * (TAU / lambda), rng.gen_range(0.0..TAU), amp)
            })
            .collect();
        Texture { waves, mean: spec.mean }
    }

    pub fn value(&self, p: &LocalPoint) -> f64 {
        self.mean + self.waves.iter().map(|(k, phase, a)| a * (k.dot(p) + phase).sin()).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub off_nadir_deg: f64,
    pub azimuth_deg: f64,
    pub kind: ModelKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Side length of the square scene, meters.
    pub extent: f64,
    pub gsd: f64,
    pub terrain: Terrain,
    #[serde(default)]
    pub texture: TextureSpec,
    pub views: Vec<ViewSpec>,
    #[serde(default = "default_anchor")]
    pub anchor: GeoPoint,
    /// Cells of this many meters from the scene border are left out of the
    /// evaluation mask.
    #[serde(default = "default_margin")]
    pub eval_margin: f64,
}

fn default_anchor() -> GeoPoint {
    GeoPoint::new(30.31, -81.66, 0.0)
}

fn default_margin() -> f64 {
    4.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if !(self.extent > 0.0) || !(self.gsd > 0.0) {
            return bad("extent and gsd must be positive");
        }
        if self.views.len() < 2 {
            return bad("at least two views are required");
        }
        if self.texture.components == 0 || !(self.texture.min_wavelength > 0.0) {
            return bad("texture needs components and positive wavelengths");
        }
        if self.texture.max_wavelength < self.texture.min_wavelength {
            return bad("texture wavelength range is empty");
        }
        Ok(())
    }

    /// Pixels per image side.
    pub fn image_size(&self) -> usize {
        (self.extent / self.gsd).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SceneView {
    pub geometry: ViewGeometry,
    pub kind: ModelKind,
    pub model: RfmModel,
    pub image: Raster,
    /// Truth DEM cells hidden from this view.
    pub occluded: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub frame: LocalFrame,
    pub truth_dem: DemGrid,
    pub truth_mesh: TriMesh,
    pub texture: Texture,
    pub views: Vec<SceneView>,
    /// 1 on cells seen by every view away from the border, nodata elsewhere.
    pub eval_mask: DemGrid,
}

impl Scene {
    pub fn images(&self) -> Vec<Raster> {
        self.views.iter().map(|v| v.image.clone()).collect()
    }

    pub fn models(&self) -> Vec<RfmModel> {
        self.views.iter().map(|v| v.model.clone()).collect()
    }
}

/// Truth DEM with one cell per GSD, centered on the frame origin.
pub fn truth_dem(spec: &SceneSpec) -> DemGrid {
    let n = spec.image_size();
    let half = 0.5 * (n as f64 - 1.0) * spec.gsd;
    DemGrid::from_fn(-half, half, spec.gsd, n, n, |x, y| spec.terrain.height(x, y))
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SynthError> {
    spec.validate()?;
    let frame = LocalFrame::build(spec.anchor).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let dem = truth_dem(spec);
    let truth = mesh_from_dem(&dem, 1).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let bvh = Bvh::build(&truth);
    let texture = Texture::new(&spec.texture, seed);
    let (lo, hi) = truth.bounds();
    let z_ref = dem.mean_height().unwrap_or(0.0);
    let plane_h = z_ref + 500.0;
    let max_tilt = spec.views.iter().map(|v| v.off_nadir_deg).fold(0.0, f64::max).to_radians();
    // tall enough for ray checks up to 1 km above the terrain
    let (z_lo, z_hi) = (lo.z - 150.0, (hi.z + 100.0).max(z_ref + 1100.0));
    let half = 0.5 * spec.extent + (z_hi - z_lo) * max_tilt.tan() + 10.0 * spec.gsd;
    let bx = ModelBox { x_half: half, y_half: half, z_lo, z_hi };
    let n = spec.image_size();
    let planes = CameraPlanes { plane_h, delta_h: 100.0, terrain_h: z_ref };

    let mut views = Vec::with_capacity(spec.views.len());
    for v in &spec.views {
        let geometry = ViewGeometry {
            off_nadir_deg: v.off_nadir_deg,
            azimuth_deg: v.azimuth_deg,
            gsd: spec.gsd,
            width: n,
            height: n,
            z_ref,
        };
        let model = view_model(&frame, &geometry, v.kind, &bx)?;
        let image = render(&truth, &bvh, &texture, &model, &frame, n, n, &planes)?;
        let cam = build_virtual_camera(&model, &frame, &Raster::filled(n, n, 0.0), &planes)
            .map_err(|e| SynthError::Render(e.to_string()))?;
        let occluded = occlusion_mask(&truth, &bvh, &dem, &cam);
        views.push(SceneView { geometry, kind: v.kind, model, image, occluded });
    }
    let eval_mask = covisible_mask(&dem, &views, &frame, spec.eval_margin);
    Ok(Scene { spec: spec.clone(), frame, truth_dem: dem, truth_mesh: truth, texture, views, eval_mask })
}

/// Renders the textured mesh with 2x2 supersampling. Pixels whose rays all
/// miss the mesh are masked; partially covered pixels average their hits.
#[allow(clippy::too_many_arguments)]
pub fn render(
    mesh: &TriMesh,
    bvh: &Bvh,
    texture: &Texture,
    model: &RfmModel,
    frame: &LocalFrame,
    width: usize,
    height: usize,
    planes: &CameraPlanes,
) -> Result<Raster, SynthError> {
    let top = frame.height_of(planes.plane_h);
    let bottom = frame.height_of(planes.plane_h - planes.delta_h);
    const OFFSETS: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
    let pixels: Vec<Option<f64>> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let mut sum = 0.0;
            let mut count = 0;
            for (dx, dy) in OFFSETS {
                let px = PixelCoord::new(x + dx, y + dy);
                let Ok(g0) = model.inverse_at_height(&px, top, None) else { continue };
                let Ok(g1) = model.inverse_at_height(&px, bottom, Some((g0.lat, g0.lon))) else { continue };
                let o = frame.to_local(&g0);
                let d = (frame.to_local(&g1) - o).normalize();
                if let Some(hit) = bvh.intersect(mesh, &o, &d) {
                    sum += texture.value(&hit.point);
                    count += 1;
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    let values = pixels.iter().map(|p| p.unwrap_or(0.0)).collect();
    let mask = pixels.iter().map(|p| p.is_some()).collect();
    Raster::new(width, height, values)
        .and_then(|r| r.with_mask(mask))
        .map_err(|e| SynthError::Render(e.to_string()))
}

/// Per DEM cell: true when the cell's surface point is hidden from `cam` or
/// falls outside its image.
pub fn occlusion_mask(mesh: &TriMesh, bvh: &Bvh, dem: &DemGrid, cam: &VirtualCamera) -> Vec<bool> {
    (0..dem.nrows * dem.ncols)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / dem.ncols, i % dem.ncols);
            let Some(z) = dem.get(r, c) else { return true };
            let (x, y) = dem.cell_center(r, c);
            !visibility(bvh, mesh, &Vector3::new(x, y, z), cam)
        })
        .collect()
}

fn covisible_mask(dem: &DemGrid, views: &[SceneView], frame: &LocalFrame, margin: f64) -> DemGrid {
    let mut mask = dem.empty_like();
    let half_x = 0.5 * (dem.ncols as f64 - 1.0) * dem.cell_size;
    for r in 0..dem.nrows {
        for c in 0..dem.ncols {
            let i = r * dem.ncols + c;
            let (x, y) = dem.cell_center(r, c);
            let inside = x.abs() <= half_x - margin && y.abs() <= half_x - margin;
            let Some(z) = dem.get(r, c) else { continue };
            let seen = views.iter().all(|v| {
                !v.occluded[i]
                    && v
                        .model
                        .project(&frame.from_local(&Vector3::new(x, y, z)))
                        .is_ok_and(|p| v.image.bilinear(p).is_some())
            });
            if inside && seen {
                mask.heights[i] = 1.0;
            }
        }
    }
    mask
}

/// Adds seeded Gaussian noise to every vertex (or only to heights).
pub fn perturb_mesh(m: &TriMesh, sigma: f64, seed: u64, z_only: bool) -> TriMesh {
    let mut out = m.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let disp: Vec<Vector3<f64>> = (0..m.vertex_count())
        .map(|_| {
            if z_only {
                Vector3::new(0.0, 0.0, normal.sample(&mut rng))
            } else {
                Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))
            }
        })
        .collect();
    out.displace(&disp);
    out
}

/// Raises every vertex inside the axis-aligned rectangle by `dz`.
pub fn offset_region(m: &TriMesh, x: (f64, f64), y: (f64, f64), dz: f64) -> TriMesh {
    let mut out = m.clone();
    let disp: Vec<Vector3<f64>> = m
        .vertices()
        .iter()
        .map(|v| {
            if v.x >= x.0 && v.x <= x.1 && v.y >= y.0 && v.y <= y.1 {
                Vector3::new(0.0, 0.0, dz)
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    out.displace(&disp);
    out
}
